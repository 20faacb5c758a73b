"""Toolkit for auditing output-format grammars under constrained decoding.

Builds format-variant grammars, enforces and validates them with a GBNF
recognizer over tokenizer vocabularies, runs benchmark evaluations
against inference backends, and computes the accompanying statistical
and tokenizer-level analyses.
"""

from .gbnf import (CompiledGrammar, ConstraintState, GrammarAst, GrammarError,
                   GrammarSyntaxError, LeftRecursionError, StackDepthError,
                   TokenMask, compile_grammar, parse_gbnf)
from .vocab import (LwPair, PrefixTree, Vocabulary, VocabularyError,
                    find_lw_pairs, load_vocab, pair_participation_rate)
from .formats import (ChoiceFormat, FormatSpec, Treatments, build_choice_format,
                      build_format, build_grid, token_budget,
                      stock_benchmark_grammars, UnmappedSurfaceError)
from .harness import (BenchmarkItem, HttpBackend, MockBackend, RunConfig,
                      RunRecord, execute_run, load_benchmark, load_run_config,
                      mock_complete, read_records, render_prompt, sample_items)
from .analysis import (CorrelationReport, PairSimStats, choice_accuracy,
                       cohens_d, correlation_table, corpus_prevalence,
                       format_agreement_matrix, levenshtein,
                       levenshtein_baseline, mse, pair_similarity_stats,
                       pearson, percent_change, spearman, treatment_deltas,
                       treatment_deltas_from_arms)

__version__ = "0.1.0"

__all__ = [
    "CompiledGrammar", "ConstraintState", "GrammarAst", "GrammarError",
    "GrammarSyntaxError", "LeftRecursionError", "StackDepthError", "TokenMask",
    "compile_grammar", "parse_gbnf",
    "LwPair", "PrefixTree", "Vocabulary", "VocabularyError", "find_lw_pairs",
    "load_vocab", "pair_participation_rate",
    "ChoiceFormat", "FormatSpec", "Treatments", "build_choice_format",
    "build_format", "build_grid", "token_budget", "stock_benchmark_grammars",
    "UnmappedSurfaceError",
    "BenchmarkItem", "HttpBackend", "MockBackend", "RunConfig", "RunRecord",
    "execute_run", "load_benchmark", "load_run_config", "mock_complete",
    "read_records", "render_prompt", "sample_items",
    "CorrelationReport", "PairSimStats", "choice_accuracy", "cohens_d",
    "correlation_table", "corpus_prevalence", "format_agreement_matrix",
    "levenshtein", "levenshtein_baseline", "mse", "pair_similarity_stats",
    "pearson", "percent_change", "spearman", "treatment_deltas",
    "treatment_deltas_from_arms",
    "__version__",
]
