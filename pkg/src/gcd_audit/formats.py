"""Output-format grammars with exact surface -> value mappings.

Five format families (integer, real, percent, binary, likert), each in a
numeric and a word variant, crossed with two optional treatments: a
mandatory leading newline on the whole response and a leading space on
every surface. The grammar text and the value map are generated together
so that the grammar's accepted language is exactly the (treatment
prefixed) key set of the value map.

Values are on each family's native scale (percent surfaces map to
fractions, likert phrases to 1..5); ``normalized_value`` rescales to
[0, 1] for cross-family comparison. Rank statistics are unaffected by
either choice because every map is strictly increasing in ordinal order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

from .gbnf import CompiledGrammar

FAMILIES = ("integer", "real", "percent", "binary", "likert")
VARIANTS = ("numeric", "word")
CHOICE_STYLES = ("stock", "as_integer", "as_real", "as_word")

LIKERT_PHRASES = ("Strongly disagree", "Disagree", "Neither agree nor disagree",
                  "Agree", "Strongly agree")

_ONES = ("zero", "one", "two", "three", "four", "five", "six", "seven",
         "eight", "nine", "ten", "eleven", "twelve", "thirteen", "fourteen",
         "fifteen", "sixteen", "seventeen", "eighteen", "nineteen")
_TENS = ("twenty", "thirty", "forty", "fifty", "sixty", "seventy",
         "eighty", "ninety")


class FormatError(ValueError):
    pass


class UnmappedSurfaceError(FormatError):
    """The surface is not in the value map: backend/grammar mismatch."""


def english_number(n: int) -> str:
    """Lowercase English numeral for 0..100, hyphenated ("twenty-one")."""
    if not 0 <= n <= 100:
        raise ValueError(f"numeral out of supported range: {n}")
    if n == 100:
        return "one hundred"
    if n < 20:
        return _ONES[n]
    tens, ones = divmod(n, 10)
    word = _TENS[tens - 2]
    return f"{word}-{_ONES[ones]}" if ones else word


def _cap(word: str) -> str:
    return word[0].upper() + word[1:]


@dataclass(frozen=True)
class Treatments:
    with_space: bool = False
    with_newline: bool = False

    @property
    def prefix(self) -> str:
        return ("\n" if self.with_newline else "") + (" " if self.with_space else "")

    @property
    def suffix_id(self) -> str:
        return (("_space" if self.with_space else "")
                + ("_newline" if self.with_newline else ""))

    @classmethod
    def all_combinations(cls) -> tuple["Treatments", ...]:
        return tuple(cls(with_space=s, with_newline=n)
                     for s in (False, True) for n in (False, True))


def _escape_literal(s: str) -> str:
    return (s.replace("\\", "\\\\").replace('"', '\\"')
            .replace("\n", "\\n").replace("\t", "\\t"))


def _grammar_text(body: str, treatments: Treatments) -> str:
    root = 'root ::= "\\n" response' if treatments.with_newline else "root ::= response"
    return f"{root}\nresponse ::= {body}"


def _literal_body(surfaces: list[str], treatments: Treatments) -> str:
    prefix = " " if treatments.with_space else ""
    return " | ".join(f'"{_escape_literal(prefix + s)}"' for s in surfaces)


def _sequence_body(elements: str, treatments: Treatments) -> str:
    return f'" " {elements}' if treatments.with_space else elements


@dataclass(frozen=True)
class FormatSpec:
    family: str
    variant: str
    treatments: Treatments
    gbnf_text: str
    value_map: tuple[tuple[str, float], ...]  # un-prefixed surface -> native value
    max_tokens: int

    @property
    def spec_id(self) -> str:
        return f"{self.family}_{self.variant}{self.treatments.suffix_id}"

    @cached_property
    def _lookup(self) -> dict[str, float]:
        return dict(self.value_map)

    @cached_property
    def value_range(self) -> tuple[float, float]:
        values = [v for _, v in self.value_map]
        return min(values), max(values)

    @cached_property
    def compiled(self) -> CompiledGrammar:
        return CompiledGrammar.from_text(self.gbnf_text)

    def surfaces(self) -> list[str]:
        return [s for s, _ in self.value_map]

    def accepted_strings(self) -> list[str]:
        """Surfaces with treatment prefixes applied: the grammar's language."""
        return [self.treatments.prefix + s for s in self.surfaces()]

    def value_of(self, surface: str) -> float:
        stripped = surface.lstrip(" \t\n\r")
        try:
            return self._lookup[stripped]
        except KeyError:
            raise UnmappedSurfaceError(
                f"{self.spec_id}: surface {surface!r} has no mapped value") from None

    def normalized_value(self, surface: str) -> float:
        lo, hi = self.value_range
        return (self.value_of(surface) - lo) / (hi - lo)

    def nearest_surface(self, z: float) -> str:
        """Surface whose normalized value is closest to z (ties to the lower)."""
        lo, hi = self.value_range
        z = min(max(z, 0.0), 1.0)
        best, best_dist = None, None
        for surface, value in self.value_map:
            dist = abs((value - lo) / (hi - lo) - z)
            if best_dist is None or dist < best_dist:
                best, best_dist = surface, dist
        return best  # value_map is never empty


def _integer_surfaces(lo: int, hi: int, variant: str) -> list[tuple[str, float]]:
    if variant == "numeric":
        return [(str(i), float(i)) for i in range(lo, hi + 1)]
    return [(_cap(english_number(i)), float(i)) for i in range(lo, hi + 1)]


def _real_surfaces(variant: str, hundredths: bool) -> list[tuple[str, float]]:
    if variant == "numeric":
        if hundredths:
            return [(f"0.{i:02d}", i / 100) for i in range(100)]
        return [(f"0.{i}", i / 10) for i in range(1, 10)] + [("1", 1.0)]
    out = [(f"Zero point {_ONES[d]}", d / 10) for d in range(10)]
    out.append(("One", 1.0))
    return out


def _percent_surfaces(variant: str) -> list[tuple[str, float]]:
    if variant == "numeric":
        return [(f"{i}%", i / 100) for i in range(101)]
    return [(f"{_cap(english_number(i))} percent", i / 100) for i in range(101)]


def _binary_surfaces(variant: str) -> list[tuple[str, float]]:
    if variant == "numeric":
        return [("0", 0.0), ("1", 1.0)]
    return [("False", 0.0), ("True", 1.0)]


def _likert_surfaces(variant: str) -> list[tuple[str, float]]:
    if variant == "numeric":
        return [(str(i), float(i)) for i in range(1, 6)]
    return [(phrase, float(i + 1)) for i, phrase in enumerate(LIKERT_PHRASES)]


def build_format(family: str, variant: str,
                 treatments: Treatments = Treatments(),
                 integer_range: tuple[int, int] = (1, 10),
                 real_hundredths: bool = True) -> FormatSpec:
    """Construct one family x variant x treatments format.

    ``integer_range`` bounds the integer family (inclusive).
    ``real_hundredths`` selects the two-decimal real grammar
    ``"0."[0-9][0-9]``; pass False for the coarse {0.1, ..., 1} scale.
    """
    if family not in FAMILIES:
        raise FormatError(f"unknown family {family!r}")
    if variant not in VARIANTS:
        raise FormatError(f"unknown variant {variant!r}")

    if family == "integer":
        lo, hi = integer_range
        if not (0 <= lo < hi):
            raise FormatError(f"bad integer range {integer_range}")
        entries = _integer_surfaces(lo, hi, variant)
        body = _literal_body([s for s, _ in entries], treatments)
    elif family == "real":
        entries = _real_surfaces(variant, real_hundredths)
        if variant == "numeric" and real_hundredths:
            body = _sequence_body('"0." [0-9] [0-9]', treatments)
        else:
            body = _literal_body([s for s, _ in entries], treatments)
    elif family == "percent":
        entries = _percent_surfaces(variant)
        body = _literal_body([s for s, _ in entries], treatments)
    elif family == "binary":
        entries = _binary_surfaces(variant)
        display = ["1", "0"] if variant == "numeric" else ["True", "False"]
        body = _literal_body(display, treatments)
    else:
        entries = _likert_surfaces(variant)
        if variant == "numeric":
            body = _sequence_body("[1-5]", treatments)
        else:
            body = _literal_body([s for s, _ in entries], treatments)

    longest = max(len(treatments.prefix + s) for s, _ in entries)
    return FormatSpec(family=family, variant=variant, treatments=treatments,
                      gbnf_text=_grammar_text(body, treatments),
                      value_map=tuple(entries),
                      max_tokens=longest)


def build_grid(families=FAMILIES, variants=VARIANTS,
               treatment_combos: Optional[tuple[Treatments, ...]] = None,
               **kwargs) -> list[FormatSpec]:
    combos = treatment_combos or Treatments.all_combinations()
    return [build_format(f, v, t, **kwargs)
            for f in families for v in variants for t in combos]


# ---------------------------------------------------------------------------
# Multiple-choice formats


@dataclass(frozen=True)
class ChoiceFormat:
    style: str
    treatments: Treatments
    n: int
    surfaces: tuple[str, ...]  # un-prefixed, index-aligned with choices
    gbnf_text: str

    @property
    def spec_id(self) -> str:
        return f"choice_{self.style}_{self.n}{self.treatments.suffix_id}"

    @cached_property
    def compiled(self) -> CompiledGrammar:
        return CompiledGrammar.from_text(self.gbnf_text)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.surfaces)}

    def accepted_strings(self) -> list[str]:
        return [self.treatments.prefix + s for s in self.surfaces]

    def index_of(self, surface: str) -> int:
        stripped = surface.lstrip(" \t\n\r")
        try:
            return self._index[stripped]
        except KeyError:
            raise UnmappedSurfaceError(
                f"{self.spec_id}: surface {surface!r} is not a choice label") from None


def build_choice_format(style: str, treatments: Treatments = Treatments(),
                        n: int = 4) -> ChoiceFormat:
    """Choice-label format: letters, integers, spaced decimals, or "Choice k"."""
    if style not in CHOICE_STYLES:
        raise FormatError(f"unknown choice style {style!r}")
    if not 2 <= n <= 26:
        raise FormatError(f"choice arity {n} outside [2, 26]")
    if style == "stock":
        surfaces = tuple(chr(ord("A") + i) for i in range(n))
    elif style == "as_integer":
        surfaces = tuple(str(i + 1) for i in range(n))
    elif style == "as_real":
        surfaces = tuple(f"{i / (n - 1):.2f}" for i in range(n))
    else:
        surfaces = tuple(f"Choice {i + 1}" for i in range(n))
    assert len(set(surfaces)) == n
    body = _literal_body(list(surfaces), treatments)
    return ChoiceFormat(style=style, treatments=treatments, n=n,
                        surfaces=surfaces,
                        gbnf_text=_grammar_text(body, treatments))


# ---------------------------------------------------------------------------
# Budgets and file emission


def token_budget(spec, vocab) -> int:
    """Largest minimal-token spelling over the spec's surfaces.

    The leading space participates in the spelled text (it may fuse into
    a leading-whitespace token); a mandatory newline costs one extra.
    """
    space = " " if spec.treatments.with_space else ""
    surfaces = (spec.surfaces() if isinstance(spec, FormatSpec) else list(spec.surfaces))
    budget = max(vocab.min_token_count(space + s) for s in surfaces)
    return budget + (1 if spec.treatments.with_newline else 0)


def stock_benchmark_grammars() -> dict[str, str]:
    """The four stock benchmark grammars in their canonical spelling."""
    return {
        "stsb": 'root ::= response\nresponse ::= "0."[0-9][0-9]',
        "men": "root ::= response\nresponse ::= [1-5]",
        "qqp": 'root ::= response\nresponse ::= "True" | "False"',
        "toxicchat": "root ::= response\nresponse ::= [1-5]",
    }


def emit_format_files(out_dir: str, specs: list[FormatSpec]) -> list[str]:
    """Write ``<spec_id>.gbnf`` plus a ``.map.json`` sidecar per spec."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for spec in specs:
        gpath = os.path.join(out_dir, f"{spec.spec_id}.gbnf")
        with open(gpath, "w", encoding="utf-8") as fh:
            fh.write(spec.gbnf_text + "\n")
        sidecar = {
            "format_id": spec.spec_id,
            "family": spec.family,
            "variant": spec.variant,
            "treatments": {"with_space": spec.treatments.with_space,
                           "with_newline": spec.treatments.with_newline},
            "max_tokens": spec.max_tokens,
            "value_map": [[s, v] for s, v in spec.value_map],
        }
        mpath = os.path.join(out_dir, f"{spec.spec_id}.map.json")
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
        written.extend([gpath, mpath])
    return written
