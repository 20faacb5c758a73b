"""Command-line entry point.

Machine-readable output goes to stdout (one JSON document under
``--json``, otherwise plain text, markdown, or CSV depending on the
subcommand); short human summaries go to stderr. Exit codes: 0 success,
1 validation error (bad arguments, grammars, or config), 2 I/O or
backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import analysis, formats, harness, vocab as vocab_mod
from .gbnf import CompiledGrammar, GrammarError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _note(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(args, doc: dict, text: str) -> None:
    if args.json:
        print(json.dumps(doc, ensure_ascii=False))
    elif text:
        print(text)


def _markdown_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    sep = "| " + " | ".join("-" * w for w in widths) + " |"
    return "\n".join([line(headers), sep] + [line(r) for r in rows])


def _csv_table(headers: list[str], rows: list[list[str]]) -> str:
    import csv as _csv
    import io
    buf = io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue().rstrip("\n")


def _render(args, headers: list[str], rows: list[list[str]]) -> str:
    if getattr(args, "csv", False):
        return _csv_table(headers, rows)
    return _markdown_table(headers, rows)


def _fmt(value, digits=3) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


# ---------------------------------------------------------------------------
# grammar


def _cmd_grammar_check(args) -> int:
    with open(args.grammar, "r", encoding="utf-8") as fh:
        grammar = CompiledGrammar.from_text(fh.read())
    accepted = grammar.validate(args.input)
    verdict = "accepted" if accepted else "rejected"
    _emit(args, {"input": args.input, "accepted": accepted}, verdict)
    _note(f"{args.grammar}: input {args.input!r} {verdict}")
    return EXIT_OK


def _cmd_grammar_mask(args) -> int:
    with open(args.grammar, "r", encoding="utf-8") as fh:
        grammar = CompiledGrammar.from_text(fh.read())
    vocabulary = vocab_mod.load_vocab(args.vocab)
    state = grammar.initial_state().advance_text(args.prefix)
    if state.rejected:
        _emit(args, {"prefix": args.prefix, "rejected": True}, "rejected")
        _note(f"prefix {args.prefix!r} is rejected by the grammar")
        return EXIT_OK
    mask = state.allowed_tokens(vocabulary)
    ids = mask.allowed_ids()
    shown = ids if args.limit is None else ids[:args.limit]
    doc = {"prefix": args.prefix, "allowed": mask.count, "eos": mask.allow_eos,
           "vocab_size": vocabulary.size,
           "tokens": [{"id": i, "surface": vocabulary.surface_text(i)} for i in shown]}
    lines = [f"{i}\t{vocabulary.surface_text(i)!r}" for i in shown]
    _emit(args, doc, "\n".join(lines))
    _note(f"{mask.count} of {vocabulary.size} tokens allowed; "
          f"eos {'allowed' if mask.allow_eos else 'blocked'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# formats


def _cmd_formats_emit(args) -> int:
    treatment_combos = formats.Treatments.all_combinations()
    specs = formats.build_grid(
        families=tuple(args.families.split(",")) if args.families else formats.FAMILIES,
        variants=tuple(args.variants.split(",")) if args.variants else formats.VARIANTS,
        treatment_combos=treatment_combos,
        integer_range=tuple(int(x) for x in args.integer_range.split(",")),
    )
    written = formats.emit_format_files(args.out, specs)
    _emit(args, {"written": written}, "\n".join(written))
    _note(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _cmd_run(args) -> int:
    config = harness.load_run_config(args.config)
    if args.output:
        config.output = args.output
    if args.jobs:
        config.jobs = min(args.jobs, 16)
    records = harness.execute_run(config)
    doc = {"run_id": config.run_id, "new_records": len(records),
           "output": config.output}
    _emit(args, doc, config.output)
    _note(f"run {config.run_id}: {len(records)} new records -> {config.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def _cmd_stats_correlate(args) -> int:
    records = harness.read_records(args.records)
    group_by = tuple(args.group_by.split(","))
    reports = analysis.correlation_table(records, group_by)
    headers = list(group_by) + ["rho", "r", "mse", "n", "fail_rate"]
    rows = [[_fmt(rep.group[g]) for g in group_by]
            + [_fmt(rep.rho), _fmt(rep.r), _fmt(rep.mse, 4), str(rep.n),
               _fmt(rep.parse_failure_rate)]
            for rep in reports]
    doc = {"groups": [{**rep.group, "rho": rep.rho, "r": rep.r, "mse": rep.mse,
                       "n": rep.n, "parse_failure_rate": rep.parse_failure_rate}
                      for rep in reports]}
    _emit(args, doc, _render(args, headers, rows))
    _note(f"{len(reports)} groups")
    return EXIT_OK


def _cmd_stats_deltas(args) -> int:
    records = harness.read_records(args.records)
    table = analysis.treatment_deltas(records)
    families = sorted({f for row in table.values() for f in row})
    headers = ["condition"] + families
    rows = [[cond] + [_fmt(table[cond].get(f)) for f in families]
            for cond in table]
    means = ["mean"] + [
        _fmt(float(np.mean([table[c][f] for c in table if f in table[c]])))
        for f in families]
    rows.append(means)
    _emit(args, {"deltas": table}, _render(args, headers, rows))
    _note(f"{len(table)} conditions x {len(families)} families")
    return EXIT_OK


def _cmd_stats_matrix(args) -> int:
    records = harness.read_records(args.records)
    format_ids, matrix = analysis.format_agreement_matrix(records, args.model)
    headers = ["format"] + format_ids
    rows = [[fid] + [_fmt(matrix[i, j]) for j in range(len(format_ids))]
            for i, fid in enumerate(format_ids)]
    doc = {"model": args.model, "formats": format_ids,
           "matrix": [[float(v) for v in row] for row in matrix]}
    _emit(args, doc, _render(args, headers, rows))
    _note(f"{len(format_ids)} formats for model {args.model}")
    return EXIT_OK


def _cmd_stats_choices(args) -> int:
    records = harness.read_records(args.records)
    table = analysis.choice_accuracy(records)
    headers = ["benchmark"] + list(table.arms)
    rows = []
    for bench in table.benchmarks:
        row = [bench]
        for arm in table.arms:
            acc = table.accuracy.get((bench, arm))
            if acc is None:
                row.append("-")
            else:
                change = table.change.get((bench, arm))
                row.append(f"{acc:.0f} ({change:+d}%)" if arm != "stock"
                           else f"{acc:.0f}")
        rows.append(row)
    mean = table.mean_row()
    stock_mean = mean.get("stock")
    mean_cells = ["mean"]
    for arm in table.arms:
        if arm not in mean:
            mean_cells.append("-")
        elif arm == "stock" or not stock_mean:
            mean_cells.append(f"{mean[arm]:.0f}")
        else:
            mean_cells.append(
                f"{mean[arm]:.0f} ({analysis.percent_change(mean[arm], stock_mean):+d}%)")
    rows.append(mean_cells)
    doc = {"benchmarks": table.benchmarks, "arms": table.arms,
           "accuracy": {f"{b}/{a}": v for (b, a), v in table.accuracy.items()},
           "change": {f"{b}/{a}": v for (b, a), v in table.change.items()}}
    _emit(args, doc, _render(args, headers, rows))
    _note(f"{len(table.benchmarks)} benchmarks x {len(table.arms)} arms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tokens


def _cmd_tokens_pairs(args) -> int:
    vocabulary = vocab_mod.load_vocab(args.vocab)
    pairs = vocab_mod.find_lw_pairs(vocabulary)
    rate = vocab_mod.pair_participation_rate(vocabulary, pairs)
    twins = vocab_mod.whitespace_twin_counts(vocabulary)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(vocab_mod.pairs_to_csv(vocabulary, pairs))
    doc = {"vocab_size": vocabulary.size, "n_pairs": len(pairs),
           "participation_rate": rate,
           "pair_rate": len(pairs) / vocabulary.size if vocabulary.size else 0.0,
           "whitespace_twins": twins,
           "csv": args.out}
    text = (f"pairs\t{len(pairs)}\nparticipation_rate\t{rate:.4f}\n"
            f"vocab_size\t{vocabulary.size}")
    _emit(args, doc, text)
    _note(f"{len(pairs)} pairs; {rate:.1%} of the vocabulary participates")
    return EXIT_OK


def _cmd_tokens_prevalence(args) -> int:
    vocabulary = vocab_mod.load_vocab(args.vocab)
    pairs = vocab_mod.find_lw_pairs(vocabulary)
    read = 0
    limit = args.limit_bytes

    def lines():
        nonlocal read
        with open(args.corpus, "r", encoding="utf-8", errors="replace") as fh:
            for line in fh:
                read += len(line)
                if limit and read > limit:
                    return
                yield line

    report = analysis.corpus_prevalence(vocabulary, pairs, lines())
    doc = json.loads(report.to_json())
    text = "\n".join(f"{k}\t{v}" for k, v in doc.items())
    _emit(args, doc, text)
    _note(f"ratio {report.ratio} over {report.total_tokens} tokens")
    return EXIT_OK


def _cmd_tokens_embsim(args) -> int:
    vocabulary = vocab_mod.load_vocab(args.vocab)
    pairs = vocab_mod.find_lw_pairs(vocabulary)
    matrix = analysis.load_embeddings(args.embeddings)
    stats = analysis.pair_similarity_stats(matrix, pairs,
                                           baseline_k=args.baseline_k,
                                           seed=args.seed)
    doc = asdict(stats)
    text = "\n".join(f"{k}\t{v}" for k, v in doc.items())
    _emit(args, doc, text)
    _note(f"pair mean cosine {stats.mean_cosine:.3f} vs baseline "
          f"{stats.baseline_mean:.3f} (d={stats.cohens_d:.2f})")
    return EXIT_OK


def _cmd_tokens_export_proj(args) -> int:
    vocabulary = vocab_mod.load_vocab(args.vocab)
    pairs = vocab_mod.find_lw_pairs(vocabulary)
    matrix = analysis.load_embeddings(args.embeddings)
    rows = analysis.export_projection_inputs(matrix, pairs, args.out,
                                             background_k=args.background_k,
                                             seed=args.seed)
    _emit(args, {"rows": rows, "out": args.out}, args.out)
    _note(f"wrote {rows} tagged vectors to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcd-audit",
                     description="Audit output-format grammars for "
                                 "grammar-constrained decoding.")
    parser.add_argument("--json", action="store_true",
                        help="emit exactly one JSON document on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    grammar = sub.add_parser("grammar", help="grammar tools")
    gsub = grammar.add_subparsers(dest="subcommand", required=True)
    check = gsub.add_parser("check", help="validate a string against a grammar")
    check.add_argument("grammar")
    check.add_argument("--input", required=True)
    check.set_defaults(func=_cmd_grammar_check)
    mask = gsub.add_parser("mask", help="allowed-token mask after a prefix")
    mask.add_argument("grammar")
    mask.add_argument("--vocab", required=True)
    mask.add_argument("--prefix", default="")
    mask.add_argument("--limit", type=int, default=None)
    mask.set_defaults(func=_cmd_grammar_mask)

    fmt = sub.add_parser("formats", help="format grammar emission")
    fsub = fmt.add_subparsers(dest="subcommand", required=True)
    emit = fsub.add_parser("emit", help="write grammar + value-map files")
    emit.add_argument("--out", required=True)
    emit.add_argument("--families", default=None)
    emit.add_argument("--variants", default=None)
    emit.add_argument("--integer-range", default="1,10")
    emit.set_defaults(func=_cmd_formats_emit)

    run = sub.add_parser("run", help="execute a benchmark run")
    run.add_argument("--config", required=True)
    run.add_argument("--output", default=None)
    run.add_argument("--jobs", type=int, default=None,
                     help="worker pool width (default from config, cap 16)")
    run.set_defaults(func=_cmd_run)

    stats = sub.add_parser("stats", help="statistics over run records")
    ssub = stats.add_subparsers(dest="subcommand", required=True)
    correlate = ssub.add_parser("correlate")
    correlate.add_argument("--records", required=True)
    correlate.add_argument("--group-by", default="model_family,size_tag,format_family")
    correlate.add_argument("--csv", action="store_true")
    correlate.set_defaults(func=_cmd_stats_correlate)
    deltas = ssub.add_parser("deltas")
    deltas.add_argument("--records", required=True)
    deltas.add_argument("--csv", action="store_true")
    deltas.set_defaults(func=_cmd_stats_deltas)
    matrix = ssub.add_parser("matrix")
    matrix.add_argument("--records", required=True)
    matrix.add_argument("--model", required=True)
    matrix.add_argument("--csv", action="store_true")
    matrix.set_defaults(func=_cmd_stats_matrix)
    choices = ssub.add_parser("choices")
    choices.add_argument("--records", required=True)
    choices.add_argument("--csv", action="store_true")
    choices.set_defaults(func=_cmd_stats_choices)

    tokens = sub.add_parser("tokens", help="vocabulary analyses")
    tsub = tokens.add_subparsers(dest="subcommand", required=True)
    pairs = tsub.add_parser("pairs")
    pairs.add_argument("--vocab", required=True)
    pairs.add_argument("--out", default=None, help="CSV output path")
    pairs.set_defaults(func=_cmd_tokens_pairs)
    prevalence = tsub.add_parser("prevalence")
    prevalence.add_argument("--vocab", required=True)
    prevalence.add_argument("--corpus", required=True)
    prevalence.add_argument("--limit-bytes", type=int, default=None)
    prevalence.set_defaults(func=_cmd_tokens_prevalence)
    embsim = tsub.add_parser("embsim")
    embsim.add_argument("--vocab", required=True)
    embsim.add_argument("--embeddings", required=True)
    embsim.add_argument("--baseline-k", type=int, default=20_000)
    embsim.add_argument("--seed", type=int, default=0)
    embsim.set_defaults(func=_cmd_tokens_embsim)
    proj = tsub.add_parser("export-proj")
    proj.add_argument("--vocab", required=True)
    proj.add_argument("--embeddings", required=True)
    proj.add_argument("--out", required=True)
    proj.add_argument("--background-k", type=int, default=1000)
    proj.add_argument("--seed", type=int, default=0)
    proj.set_defaults(func=_cmd_tokens_export_proj)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    try:
        return args.func(args)
    except (GrammarError, vocab_mod.VocabularyError, formats.FormatError,
            harness.ConfigError, harness.BenchmarkError,
            analysis.AnalysisError, ValueError) as exc:
        _note(f"error: {exc}")
        return EXIT_VALIDATION
    except (OSError, harness.BackendError, harness.RunIntegrityError) as exc:
        _note(f"error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
