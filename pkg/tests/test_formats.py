import json
from itertools import product

import pytest

from gcd_audit.formats import (CHOICE_STYLES, FAMILIES, VARIANTS,
                               FormatError, Treatments, UnmappedSurfaceError,
                               build_choice_format, build_format, build_grid,
                               emit_format_files, english_number,
                               stock_benchmark_grammars, token_budget)
from gcd_audit.gbnf import CompiledGrammar
from gcd_audit.vocab import Vocabulary


def all_treatments():
    return Treatments.all_combinations()


# ---------------------------------------------------------------------------
# build_format


def test_likert_numeric_matches_stock_grammar():
    spec = build_format("likert", "numeric")
    assert spec.gbnf_text == "root ::= response\nresponse ::= [1-5]"
    assert spec.value_map == tuple((str(i), float(i)) for i in range(1, 6))


def test_binary_word_matches_stock_grammar():
    spec = build_format("binary", "word")
    assert spec.gbnf_text == 'root ::= response\nresponse ::= "True" | "False"'
    assert spec.value_of("True") == 1.0
    assert spec.value_of("False") == 0.0


def test_integer_with_space_surfaces():
    spec = build_format("integer", "numeric", Treatments(with_space=True))
    assert spec.accepted_strings()[:3] == [" 1", " 2", " 3"]
    assert spec.value_of(" 7") == 7.0
    lang = spec.compiled.enumerate_language(4)
    assert lang == {f" {i}" for i in range(1, 11)}


def test_integer_range_is_configurable():
    spec = build_format("integer", "numeric", integer_range=(1, 5))
    assert spec.surfaces() == ["1", "2", "3", "4", "5"]
    with pytest.raises(FormatError):
        build_format("integer", "numeric", integer_range=(5, 2))


def test_integer_word_surfaces():
    spec = build_format("integer", "word")
    assert spec.surfaces()[0] == "One"
    assert spec.surfaces()[-1] == "Ten"


def test_real_numeric_default_is_two_decimals():
    spec = build_format("real", "numeric")
    assert len(spec.value_map) == 100
    assert spec.value_of("0.00") == 0.0
    assert spec.value_of("0.57") == pytest.approx(0.57)
    with pytest.raises(UnmappedSurfaceError):
        spec.value_of("1.00")


def test_real_numeric_coarse_option():
    spec = build_format("real", "numeric", real_hundredths=False)
    assert spec.surfaces() == [f"0.{i}" for i in range(1, 10)] + ["1"]
    assert spec.value_of("1") == 1.0


def test_real_word_surfaces():
    spec = build_format("real", "word")
    assert spec.value_of("Zero point zero") == 0.0
    assert spec.value_of("Zero point nine") == pytest.approx(0.9)
    assert spec.value_of("One") == 1.0


def test_percent_numeric_normalized_values():
    spec = build_format("percent", "numeric")
    assert spec.value_of("10%") == pytest.approx(0.10)
    assert spec.value_of("0%") == 0.0
    assert spec.value_of("100%") == 1.0


def test_percent_word_composed_numerals():
    spec = build_format("percent", "word")
    assert spec.surfaces()[10] == "Ten percent"
    assert spec.surfaces()[21] == "Twenty-one percent"
    assert spec.surfaces()[100] == "One hundred percent"


def test_likert_word_phrases():
    spec = build_format("likert", "word")
    assert spec.value_of("Strongly agree") == 5.0
    assert spec.value_of("Strongly disagree") == 1.0


def test_unknown_family_or_variant():
    with pytest.raises(FormatError):
        build_format("floats", "numeric")
    with pytest.raises(FormatError):
        build_format("real", "roman")


def test_english_number_bounds():
    assert english_number(0) == "zero"
    assert english_number(40) == "forty"
    assert english_number(99) == "ninety-nine"
    assert english_number(100) == "one hundred"
    with pytest.raises(ValueError):
        english_number(101)


# ---------------------------------------------------------------------------
# Grammar / value-map closure


@pytest.mark.parametrize("family,variant,treatments",
                         [(f, v, t) for f, v, t in
                          product(FAMILIES, VARIANTS, all_treatments())],
                         ids=lambda v: getattr(v, "suffix_id", str(v)) or "plain")
def test_closure_both_directions(family, variant, treatments):
    spec = build_format(family, variant, treatments)
    accepted = spec.accepted_strings()
    grammar = spec.compiled
    for surface in accepted:
        assert grammar.validate(surface), surface
    bound = max(len(s) for s in accepted) + 2
    assert grammar.enumerate_language(bound) == set(accepted)


def test_treatment_neutrality_of_values():
    for family, variant in product(FAMILIES, VARIANTS):
        plain = build_format(family, variant)
        spaced = build_format(family, variant, Treatments(with_space=True))
        for surface in plain.surfaces():
            assert spaced.value_of(" " + surface) == plain.value_of(surface)


def test_value_maps_strictly_increasing():
    for spec in build_grid():
        values = [v for _, v in spec.value_map]
        assert all(a < b for a, b in zip(values, values[1:])), spec.spec_id


def test_normalized_value_endpoints():
    for spec in build_grid():
        surfaces = spec.surfaces()
        assert spec.normalized_value(surfaces[0]) == 0.0
        assert spec.normalized_value(surfaces[-1]) == 1.0


def test_nearest_surface_endpoint_snapping():
    for spec in build_grid():
        assert spec.nearest_surface(0.0) == spec.surfaces()[0]
        assert spec.nearest_surface(1.0) == spec.surfaces()[-1]


def test_stock_benchmark_grammars_accept_expected_languages():
    stock = stock_benchmark_grammars()
    languages = {
        "stsb": {f"0.{i:02d}" for i in range(100)},
        "men": {str(i) for i in range(1, 6)},
        "qqp": {"True", "False"},
        "toxicchat": {str(i) for i in range(1, 6)},
    }
    for name, text in stock.items():
        grammar = CompiledGrammar.from_text(text)
        bound = max(len(s) for s in languages[name]) + 2
        assert grammar.enumerate_language(bound) == languages[name], name


# ---------------------------------------------------------------------------
# Choice formats


def test_choice_stock_letters():
    fmt = build_choice_format("stock", n=4)
    assert fmt.surfaces == ("A", "B", "C", "D")
    assert fmt.index_of("C") == 2


def test_choice_real_endpoints():
    fmt = build_choice_format("as_real", n=2)
    assert fmt.surfaces == ("0.00", "1.00")


def test_choice_real_four_way_spacing():
    fmt = build_choice_format("as_real", n=4)
    assert fmt.surfaces == ("0.00", "0.33", "0.67", "1.00")


def test_choice_word_with_newline_grammar():
    fmt = build_choice_format("as_word", Treatments(with_newline=True), n=5)
    lang = fmt.compiled.enumerate_language(12)
    assert lang == {f"\nChoice {k}" for k in range(1, 6)}
    assert fmt.index_of("\nChoice 3") == 2


def test_choice_arity_bounds():
    with pytest.raises(FormatError):
        build_choice_format("stock", n=1)
    with pytest.raises(FormatError):
        build_choice_format("stock", n=27)
    with pytest.raises(FormatError):
        build_choice_format("letters", n=4)


def test_choice_emits_exactly_n_surfaces():
    for style in CHOICE_STYLES:
        for n in (2, 4, 5, 26):
            fmt = build_choice_format(style, n=n)
            assert len(set(fmt.surfaces)) == n
            lang = fmt.compiled.enumerate_language(
                max(len(s) for s in fmt.surfaces) + 2)
            assert lang == set(fmt.surfaces)


def test_choice_unmapped_surface():
    fmt = build_choice_format("stock", n=2)
    with pytest.raises(UnmappedSurfaceError):
        fmt.index_of("Z")


# ---------------------------------------------------------------------------
# Token budgets and emission


@pytest.fixture
def byteish_vocab() -> Vocabulary:
    single = [chr(c) for c in range(0x20, 0x7F)]
    extras = ["\n", " 1", " 2", "10", "0.", "True", "False", "percent",
              "Strongly", " agree", "agree", "point"]
    return Vocabulary.from_surfaces(single + extras)


def test_budget_single_token_families(byteish_vocab):
    assert token_budget(build_format("likert", "numeric"), byteish_vocab) == 1
    assert token_budget(build_format("binary", "numeric"), byteish_vocab) == 1


def test_budget_real_word(byteish_vocab):
    budget = token_budget(build_format("real", "word"), byteish_vocab)
    # Worst case "Zero point eight": chars except the "point" token.
    assert budget == len("Zero") + 1 + 1 + 1 + len("eight")


def test_budget_real_word_with_wordy_vocab():
    # A vocabulary carrying word pieces keeps the word variant within a
    # small multi-token budget.
    words = ["Zero", " point", "One"]
    words += [" " + w for w in ("zero", "one", "two", "three", "four", "five",
                                "six", "seven", "eight", "nine")]
    vocab = Vocabulary.from_surfaces(words + ["\n", " "])
    budget = token_budget(build_format("real", "word"), vocab)
    assert budget <= 4


def test_budget_counts_newline(byteish_vocab):
    plain = token_budget(build_format("likert", "numeric"), byteish_vocab)
    newline = token_budget(
        build_format("likert", "numeric", Treatments(with_newline=True)),
        byteish_vocab)
    assert newline == plain + 1


def test_budget_uses_lw_tokens(byteish_vocab):
    # " 1" fuses into one leading-whitespace token; " 3" has no twin and
    # needs two, which sets the budget.
    assert byteish_vocab.min_token_count(" 1") == 1
    spaced = token_budget(
        build_format("likert", "numeric", Treatments(with_space=True)),
        byteish_vocab)
    assert spaced == 2


def test_max_tokens_field_is_conservative():
    for spec in build_grid():
        assert spec.max_tokens >= 1
        assert spec.max_tokens >= max(len(s) for s in spec.surfaces())


def test_emit_format_files(tmp_path):
    specs = [build_format("binary", "word"),
             build_format("likert", "numeric", Treatments(with_space=True,
                                                          with_newline=True))]
    written = emit_format_files(tmp_path, specs)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "binary_word.gbnf", "binary_word.map.json",
        "likert_numeric_space_newline.gbnf",
        "likert_numeric_space_newline.map.json"]
    sidecar = json.loads((tmp_path / "binary_word.map.json").read_text())
    assert sidecar["value_map"] == [["False", 0.0], ["True", 1.0]]
    assert len(written) == 4
