"""Statistics over run records, token embeddings, and tokenized corpora.

All reductions are numpy sums (pairwise summation), so results are
reproducible across runs and worker counts. Correlations are computed on
normalized parsed values against normalized human labels; records whose
output failed grammar validation or surface lookup are excluded from
correlations and surfaced as a parse-failure rate instead.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .vocab import LwPair, Vocabulary


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Core statistics


def _clean_pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise AnalysisError("inputs must be one-dimensional")
    if x.shape != y.shape:
        raise AnalysisError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise AnalysisError("need at least two observations")
    return x, y


def average_ranks(xs) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank block."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(xs, ys) -> float:
    x, y = _clean_pair(xs, ys)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0.0:
        raise AnalysisError("correlation undefined for constant input")
    return float(np.sum(xc * yc) / denom)


def spearman(xs, ys) -> float:
    """Tie-aware Spearman: Pearson correlation of average ranks."""
    x, y = _clean_pair(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


def mse(xs, ys) -> float:
    x, y = _clean_pair(xs, ys)
    diff = x - y
    return float(np.mean(diff * diff))


def levenshtein(a: str, b: str) -> int:
    """Classic edit distance: insert, delete, substitute at unit cost."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            current[j] = min(previous[j] + 1,
                             current[j - 1] + 1,
                             previous[j - 1] + (ca != cb))
        previous = current
    return previous[-1]


def levenshtein_baseline(items) -> tuple[list[float], list[int]]:
    """Similarity predictions (1 - d / max length) plus raw distances.

    Accepts benchmark items (text_a/text_b) or plain string pairs.
    Similarity is 1.0 when both strings are empty. Reporting both
    directions avoids the sign confusion of correlating raw distances.
    """
    sims: list[float] = []
    dists: list[int] = []
    for entry in items:
        a, b = ((entry.text_a, entry.text_b)
                if hasattr(entry, "text_a") else entry)
        d = levenshtein(a, b)
        longest = max(len(a), len(b))
        sims.append(1.0 if longest == 0 else 1.0 - d / longest)
        dists.append(d)
    return sims, dists


def cohens_d(sample_a, sample_b) -> float:
    """Standardized mean difference with pooled (n-1) standard deviation."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise AnalysisError("Cohen's d needs at least two observations per sample")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    pooled = np.sqrt(((len(a) - 1) * var_a + (len(b) - 1) * var_b)
                     / (len(a) + len(b) - 2))
    if pooled == 0.0:
        raise AnalysisError("Cohen's d undefined for zero pooled variance")
    return float((a.mean() - b.mean()) / pooled)


# ---------------------------------------------------------------------------
# Correlation tables over run records


@dataclass
class CorrelationReport:
    group: dict
    rho: Optional[float]
    r: Optional[float]
    mse: Optional[float]
    n: int
    parse_failure_rate: float


def _valid(record: dict) -> bool:
    return record.get("parse_failure") is None and record.get("parsed_norm") is not None


def correlation_table(records: Sequence[dict],
                      group_by: Sequence[str] = ("model_family", "size_tag",
                                                 "format_family")) -> list[CorrelationReport]:
    """Per-group Spearman/Pearson/MSE of parsed values against labels.

    Groups with fewer than two valid records, or with a constant side,
    report None correlations rather than aborting the whole table.
    """
    if not records:
        raise AnalysisError("no records to correlate")
    groups: dict[tuple, list[dict]] = {}
    for record in records:
        key = tuple(record.get(k) for k in group_by)
        groups.setdefault(key, []).append(record)

    reports = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        bucket = groups[key]
        valid = [r for r in bucket if _valid(r)]
        failures = len(bucket) - len(valid)
        xs = [r["parsed_norm"] for r in valid]
        ys = [r["human_label"] for r in valid]
        rho = r_val = err = None
        if len(valid) >= 2:
            try:
                rho = spearman(xs, ys)
                r_val = pearson(xs, ys)
            except AnalysisError:
                pass
            err = mse(xs, ys)
        reports.append(CorrelationReport(
            group=dict(zip(group_by, key)),
            rho=rho, r=r_val, mse=err, n=len(valid),
            parse_failure_rate=failures / len(bucket)))
    return reports


# ---------------------------------------------------------------------------
# Treatment deltas


@dataclass(frozen=True)
class ArmCorrelation:
    """One correlation observation for the treatment-delta analysis."""

    model_family: str
    size_tag: str
    benchmark: str
    format_family: str
    variant: str
    with_space: bool
    with_newline: bool
    rho: float


TREATMENT_CONDITIONS = ("with_newline", "with_space", "as_word", "as_large")


def arm_correlations(records: Sequence[dict]) -> list[ArmCorrelation]:
    """Spearman per (family, size, benchmark, format, variant, treatments) arm."""
    groups: dict[tuple, list[dict]] = {}
    for record in records:
        key = (record["model_family"], record["size_tag"], record["benchmark"],
               record["format_family"], record["variant"],
               bool(record["with_space"]), bool(record["with_newline"]))
        groups.setdefault(key, []).append(record)
    arms = []
    for key in sorted(groups, key=str):
        valid = [r for r in groups[key] if _valid(r)]
        if len(valid) < 2:
            continue
        try:
            rho = spearman([r["parsed_norm"] for r in valid],
                           [r["human_label"] for r in valid])
        except AnalysisError:
            continue
        arms.append(ArmCorrelation(*key, rho=rho))
    return arms


def _delta_for(arms: list[ArmCorrelation], condition: str,
               family: str) -> float:
    """Mean paired rho difference for one family under one condition."""
    if condition == "with_newline":
        def ctx(a): return (a.size_tag, a.benchmark, a.format_family, a.variant,
                            a.with_space)
        def arm_of(a): return a.with_newline
    elif condition == "with_space":
        def ctx(a): return (a.size_tag, a.benchmark, a.format_family, a.variant,
                            a.with_newline)
        def arm_of(a): return a.with_space
    elif condition == "as_word":
        def ctx(a): return (a.size_tag, a.benchmark, a.format_family,
                            a.with_space, a.with_newline)
        def arm_of(a):
            if a.variant not in ("numeric", "word"):
                return None
            return a.variant == "word"
    elif condition == "as_large":
        def ctx(a): return (a.benchmark, a.format_family, a.variant,
                            a.with_space, a.with_newline)
        def arm_of(a):
            if a.size_tag not in ("small", "large"):
                return None
            return a.size_tag == "large"
    else:
        raise AnalysisError(f"unknown treatment condition {condition!r}")

    with_arm: dict[tuple, float] = {}
    without_arm: dict[tuple, float] = {}
    for arm in arms:
        if arm.model_family != family:
            continue
        flag = arm_of(arm)
        if flag is None:
            continue
        (with_arm if flag else without_arm)[ctx(arm)] = arm.rho
    deltas = [with_arm[c] - without_arm[c] for c in sorted(with_arm) if c in without_arm]
    if not deltas:
        raise AnalysisError(
            f"no paired arms for condition {condition!r} in family {family!r}")
    return float(np.mean(deltas))


def treatment_deltas_from_arms(arms: list[ArmCorrelation]) -> dict[str, dict[str, float]]:
    """Delta table: condition -> model family -> mean paired rho change."""
    families = sorted({a.model_family for a in arms})
    if not families:
        raise AnalysisError("no correlation arms supplied")
    table: dict[str, dict[str, float]] = {}
    for condition in TREATMENT_CONDITIONS:
        row: dict[str, float] = {}
        for family in families:
            try:
                row[family] = _delta_for(arms, condition, family)
            except AnalysisError:
                continue
        if row:
            table[condition] = row
    if not table:
        raise AnalysisError("no treatment condition has both arms present")
    return table


def treatment_deltas(records: Sequence[dict]) -> dict[str, dict[str, float]]:
    return treatment_deltas_from_arms(arm_correlations(records))


# ---------------------------------------------------------------------------
# Format agreement matrices


def format_agreement_matrix(records: Sequence[dict], model: str
                            ) -> tuple[list[str], np.ndarray]:
    """Spearman between per-item values of each format pair for one model."""
    by_format: dict[str, dict[str, float]] = {}
    for record in records:
        if record.get("model") != model or not _valid(record):
            continue
        by_format.setdefault(record["format_id"], {})[record["item_id"]] = \
            record["parsed_norm"]
    format_ids = sorted(by_format)
    if len(format_ids) < 2:
        raise AnalysisError(f"model {model!r} has fewer than two formats with data")
    k = len(format_ids)
    matrix = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            a, b = by_format[format_ids[i]], by_format[format_ids[j]]
            shared = sorted(set(a) & set(b))
            if len(shared) < 2:
                raise AnalysisError(
                    f"formats {format_ids[i]} and {format_ids[j]} share "
                    f"fewer than two items")
            rho = spearman([a[s] for s in shared], [b[s] for s in shared])
            matrix[i, j] = matrix[j, i] = rho
    return format_ids, matrix


# ---------------------------------------------------------------------------
# Multiple-choice accuracy


def percent_change(value: float, baseline: float) -> int:
    """Integer percent change vs baseline, rounding halves away from zero."""
    if baseline == 0:
        raise AnalysisError("percent change undefined for zero baseline")
    ratio = (value - baseline) / baseline * 100.0
    return int(np.floor(ratio + 0.5)) if ratio >= 0 else -int(np.floor(-ratio + 0.5))


def _choice_arm(record: dict) -> str:
    style = record["variant"]
    space, newline = bool(record["with_space"]), bool(record["with_newline"])
    if style == "stock":
        if newline and not space:
            return "with_newline"
        if space and not newline:
            return "with_space"
        if not space and not newline:
            return "stock"
    label = style
    if newline:
        label += "+newline"
    if space:
        label += "+space"
    return label


_CHOICE_ARM_ORDER = ("stock", "with_newline", "with_space",
                     "as_integer", "as_real", "as_word")


@dataclass
class ChoiceAccuracyTable:
    benchmarks: list[str]
    arms: list[str]
    accuracy: dict[tuple[str, str], float]  # (benchmark, arm) -> percent correct
    change: dict[tuple[str, str], int] = field(default_factory=dict)

    def mean_row(self) -> dict[str, float]:
        return {arm: float(np.mean([self.accuracy[(b, arm)]
                                    for b in self.benchmarks
                                    if (b, arm) in self.accuracy]))
                for arm in self.arms}


def choice_accuracy(records: Sequence[dict]) -> ChoiceAccuracyTable:
    """Accuracy (percent) per benchmark and arm, with change vs stock."""
    cells: dict[tuple[str, str], list[bool]] = {}
    for record in records:
        if record.get("format_family") != "choice":
            continue
        if record.get("gold_index") is None:
            raise AnalysisError(f"record {record.get('item_id')} lacks a gold index")
        arm = _choice_arm(record)
        correct = (_valid(record)
                   and int(record["parsed_value"]) == int(record["gold_index"]))
        cells.setdefault((record["benchmark"], arm), []).append(correct)
    if not cells:
        raise AnalysisError("no multiple-choice records found")
    benchmarks = sorted({b for b, _ in cells})
    arms_present = {a for _, a in cells}
    if "stock" not in arms_present:
        raise AnalysisError("stock arm missing; cannot compute baselines")
    arms = [a for a in _CHOICE_ARM_ORDER if a in arms_present]
    arms += sorted(arms_present - set(arms))
    accuracy = {key: 100.0 * float(np.mean(flags)) for key, flags in cells.items()}
    table = ChoiceAccuracyTable(benchmarks=benchmarks, arms=arms, accuracy=accuracy)
    for bench in benchmarks:
        stock = accuracy.get((bench, "stock"))
        if stock is None:
            raise AnalysisError(f"benchmark {bench!r} lacks a stock arm")
        for arm in arms:
            if (bench, arm) in accuracy and stock > 0:
                table.change[(bench, arm)] = percent_change(accuracy[(bench, arm)], stock)
    return table


# ---------------------------------------------------------------------------
# Embedding similarity


@dataclass
class PairSimStats:
    mean_cosine: float
    std_cosine: float
    n_pairs: int
    baseline_mean: float
    baseline_std: float
    baseline_n: int
    cohens_d: float
    excluded: int  # pairs dropped because a member embedding was a zero vector


def _row_cosines(matrix: np.ndarray, ids_a: np.ndarray, ids_b: np.ndarray
                 ) -> tuple[np.ndarray, int]:
    a = matrix[ids_a]
    b = matrix[ids_b]
    norm_a = np.linalg.norm(a, axis=1)
    norm_b = np.linalg.norm(b, axis=1)
    keep = (norm_a > 0) & (norm_b > 0)
    cos = np.sum(a[keep] * b[keep], axis=1) / (norm_a[keep] * norm_b[keep])
    return cos, int(np.sum(~keep))


def pair_similarity_stats(embeddings: np.ndarray, pairs: Sequence[LwPair],
                          baseline_k: int = 20_000, seed: int = 0) -> PairSimStats:
    """Cosine similarity of twin pairs vs uniformly random id pairs.

    The baseline draws ``baseline_k`` random pairs of distinct row ids
    (seeded); Cohen's d compares the two cosine samples with a pooled
    standard deviation.
    """
    matrix = np.asarray(embeddings, dtype=np.float64)
    if matrix.ndim != 2:
        raise AnalysisError("embedding matrix must be 2-D")
    if not pairs:
        raise AnalysisError("no pairs supplied")
    if baseline_k < 2:
        raise AnalysisError("baseline_k must be at least 2")
    max_id = max(max(p.lw_id, p.bare_id) for p in pairs)
    if max_id >= matrix.shape[0]:
        raise AnalysisError(
            f"pair id {max_id} out of range for {matrix.shape[0]}-row matrix")
    lw = np.array([p.lw_id for p in pairs])
    bare = np.array([p.bare_id for p in pairs])
    pair_cos, excluded = _row_cosines(matrix, lw, bare)
    if len(pair_cos) < 2:
        raise AnalysisError("fewer than two pairs with nonzero embeddings")

    rng = random.Random(seed)
    n_rows = matrix.shape[0]
    ids_a = np.empty(baseline_k, dtype=np.int64)
    ids_b = np.empty(baseline_k, dtype=np.int64)
    for i in range(baseline_k):
        a = rng.randrange(n_rows)
        b = rng.randrange(n_rows - 1)
        if b >= a:
            b += 1
        ids_a[i], ids_b[i] = a, b
    base_cos, base_excluded = _row_cosines(matrix, ids_a, ids_b)
    if len(base_cos) < 2:
        raise AnalysisError("fewer than two baseline pairs with nonzero embeddings")

    return PairSimStats(
        mean_cosine=float(pair_cos.mean()),
        std_cosine=float(pair_cos.std(ddof=1)),
        n_pairs=len(pair_cos),
        baseline_mean=float(base_cos.mean()),
        baseline_std=float(base_cos.std(ddof=1)),
        baseline_n=len(base_cos),
        cohens_d=cohens_d(pair_cos, base_cos),
        excluded=excluded + base_excluded)


# ---------------------------------------------------------------------------
# Embedding file I/O

_EMB_MAGIC = b"EMB1"


def save_embeddings(path, matrix: np.ndarray) -> None:
    """Write the binary embedding layout: magic, rows, cols, f32 row-major."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise AnalysisError("embedding matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def load_embeddings(path) -> np.ndarray:
    """Read the binary layout, falling back to delimited text."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _EMB_MAGIC:
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
            if data.size != rows * cols:
                raise AnalysisError(f"{path}: truncated embedding file")
            return data.reshape(rows, cols).astype(np.float64)
    try:
        return np.loadtxt(path, dtype=np.float64, delimiter=None, ndmin=2)
    except ValueError:
        return np.loadtxt(path, dtype=np.float64, delimiter=",", ndmin=2)


def export_projection_inputs(embeddings: np.ndarray, pairs: Sequence[LwPair],
                             path, background_k: int = 0, seed: int = 0) -> int:
    """Write tagged vectors (lw/bare members plus a random background sample)
    as tab-separated text for external projection. Returns rows written."""
    matrix = np.asarray(embeddings, dtype=np.float64)
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        dims = matrix.shape[1] if matrix.ndim == 2 else 0
        header = ["tag", "token_id"] + [f"d{i}" for i in range(dims)]
        fh.write("\t".join(header) + "\n")

        def emit(tag: str, tid: int) -> None:
            nonlocal rows
            vec = "\t".join(repr(float(v)) for v in matrix[tid])
            fh.write(f"{tag}\t{tid}\t{vec}\n")
            rows += 1

        members = set()
        for pair in pairs:
            emit("lw", pair.lw_id)
            emit("bare", pair.bare_id)
            members.update((pair.lw_id, pair.bare_id))
        if pairs and background_k > 0:
            pool = [i for i in range(matrix.shape[0]) if i not in members]
            rng = random.Random(seed)
            take = min(background_k, len(pool))
            for tid in sorted(rng.sample(pool, take)):
                emit("background", tid)
    return rows


# ---------------------------------------------------------------------------
# Corpus prevalence


@dataclass
class PrevalenceReport:
    total_tokens: int
    lw_total: int
    bare_total: int
    ratio: Optional[float]  # occurrence-weighted: sum(lw) / sum(bare)
    pair_averaged_ratio: Optional[float]  # mean over pairs with bare hits
    per_pair: list[tuple[int, int, int, int]]  # (bare_id, lw_id, bare_n, lw_n)

    def to_json(self) -> str:
        doc = {
            "total_tokens": self.total_tokens,
            "lw_total": self.lw_total,
            "bare_total": self.bare_total,
            "ratio": self.ratio,
            "pair_averaged_ratio": self.pair_averaged_ratio,
            "n_pairs": len(self.per_pair),
        }
        return json.dumps(doc, ensure_ascii=False)


def corpus_prevalence(vocab: Vocabulary, pairs: Sequence[LwPair],
                      lines: Iterable[str]) -> PrevalenceReport:
    """Occurrence counts of twin members over a line-sharded text stream.

    The trailing newline of each line is the shard separator and is not
    tokenized. Both counting conventions are reported: the
    occurrence-weighted ratio (total lw hits over total bare hits) and
    the mean of per-pair ratios.
    """
    lw_ids = {p.lw_id for p in pairs}
    bare_ids = {p.bare_id for p in pairs}
    counts: dict[int, int] = {}
    total = 0
    watched = lw_ids | bare_ids
    for line in lines:
        for tid in vocab.encode(line.rstrip("\n")):
            total += 1
            if tid in watched:
                counts[tid] = counts.get(tid, 0) + 1
    lw_total = sum(counts.get(t, 0) for t in lw_ids)
    bare_total = sum(counts.get(t, 0) for t in bare_ids)
    per_pair = [(p.bare_id, p.lw_id, counts.get(p.bare_id, 0), counts.get(p.lw_id, 0))
                for p in pairs]
    ratios = [lw_n / bare_n for _, _, bare_n, lw_n in per_pair if bare_n > 0]
    return PrevalenceReport(
        total_tokens=total,
        lw_total=lw_total,
        bare_total=bare_total,
        ratio=(lw_total / bare_total) if bare_total else None,
        pair_averaged_ratio=float(np.mean(ratios)) if ratios else None,
        per_pair=per_pair)
