import math
import os
import random
from itertools import combinations
from pathlib import Path

import pytest

from gcd_audit.gbnf import CompiledGrammar
from gcd_audit.vocab import Vocabulary

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"

REAL_TOKENIZER_ENV = "GCD_AUDIT_LLAMA_TOKENIZER"
REAL_CORPUS_ENV = "GCD_AUDIT_CORPUS"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


def _optional_asset(env_var: str) -> str:
    path = os.environ.get(env_var)
    if not path or not os.path.exists(path):
        pytest.skip(f"optional asset: set {env_var} to a local file to enable")
    return path


@pytest.fixture
def real_tokenizer_path() -> str:
    return _optional_asset(REAL_TOKENIZER_ENV)


@pytest.fixture
def real_corpus_path() -> str:
    return _optional_asset(REAL_CORPUS_ENV)


# ---------------------------------------------------------------------------
# Independent oracles. These stay deliberately naive: counting definitions,
# exhaustive alignment search, and per-token advancement with no sharing.


def rank_oracle(xs):
    """Average ranks by direct counting (1-based)."""
    ranks = []
    for x in xs:
        less = sum(1 for y in xs if y < x)
        eq = sum(1 for y in xs if y == x)
        ranks.append(less + (eq + 1) / 2)
    return ranks


def pearson_oracle(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    vx = sum((a - mx) ** 2 for a in xs)
    vy = sum((b - my) ** 2 for b in ys)
    return cov / math.sqrt(vx * vy)


def spearman_oracle(xs, ys):
    return pearson_oracle(rank_oracle(xs), rank_oracle(ys))


def mse_oracle(xs, ys):
    return sum((a - b) ** 2 for a, b in zip(xs, ys)) / len(xs)


def levenshtein_oracle(a: str, b: str) -> int:
    """Exhaustive minimum over all monotone alignments (traces)."""
    n, m = len(a), len(b)
    best = n + m
    for k in range(min(n, m) + 1):
        for ai in combinations(range(n), k):
            for bi in combinations(range(m), k):
                cost = (n - k) + (m - k) + sum(
                    a[i] != b[j] for i, j in zip(ai, bi))
                if cost < best:
                    best = cost
    return best


def mask_oracle(state, vocab):
    """Per-token brute force: advance the state by each decoded surface."""
    bits = 0
    for tid in range(vocab.size):
        text = vocab.surface_text(tid)
        if text is None:
            continue
        if not state.advance_text(text).rejected:
            bits |= 1 << tid
    return bits, state.terminable


# ---------------------------------------------------------------------------
# Randomized grammar / vocabulary generator for the mask-equivalence suite.

_ALPHABET = "abc01"


def _random_element(rng: random.Random, deeper_rules: list[str], depth: int) -> str:
    roll = rng.random()
    if roll < 0.40 or depth > 1:
        text = "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(1, 2)))
        return f'"{text}"'
    if roll < 0.65:
        chars = rng.sample(_ALPHABET, rng.randint(1, 3))
        return "[" + "".join(sorted(chars)) + "]"
    if roll < 0.80 and deeper_rules:
        return rng.choice(deeper_rules)
    inner = _random_element(rng, deeper_rules, depth + 1)
    return inner + rng.choice("*+?")


def random_grammar_text(rng: random.Random) -> str:
    """A random grammar of at most six rules with no left recursion.

    References point only at later rules, except for an optional
    tail-position self reference (plain right recursion).
    """
    n_rules = rng.randint(1, 6)
    names = ["root"] + [f"n{i}" for i in range(1, n_rules)]
    lines = []
    for idx, name in enumerate(names):
        deeper = names[idx + 1:]
        alts = []
        for _ in range(rng.randint(1, 3)):
            seq = [_random_element(rng, deeper, 0)
                   for _ in range(rng.randint(1, 3))]
            if rng.random() < 0.15:
                seq.append(name)  # right recursion
            alts.append(" ".join(seq))
        if all(name in alt.split() for alt in alts):
            alts.append('"a"')  # keep the language nonempty
        lines.append(f"{name} ::= " + " | ".join(alts))
    return "\n".join(lines)


def random_vocab(rng: random.Random) -> Vocabulary:
    n = rng.randint(1, 64)
    surfaces = []
    for _ in range(n):
        length = rng.randint(0, 4)
        surfaces.append("".join(rng.choice(_ALPHABET) for _ in range(length)))
    return Vocabulary.from_surfaces(surfaces)


def random_reachable_state(rng: random.Random, grammar: CompiledGrammar):
    state = grammar.initial_state()
    for _ in range(rng.randint(0, 5)):
        chars = list(_ALPHABET)
        rng.shuffle(chars)
        advanced = None
        for ch in chars:
            candidate = state.advance_scalar(ord(ch))
            if not candidate.rejected:
                advanced = candidate
                break
        if advanced is None:
            break
        state = advanced
    return state
