import random
from itertools import product

import pytest
from hypothesis import given, settings, strategies as st

from gcd_audit.gbnf import (CompiledGrammar, Cls, GrammarError, GrammarSyntaxError,
                            Lit, LeftRecursionError, Ref, Rep, StackDepthError,
                            compile_grammar, parse_gbnf)
from gcd_audit.vocab import Vocabulary

from conftest import (mask_oracle, random_grammar_text, random_reachable_state,
                      random_vocab)

MEN = "root ::= response\nresponse ::= [1-5]"
STSB = 'root ::= response\nresponse ::= "0."[0-9][0-9]'
QUORA = 'root ::= response\nresponse ::= "True" | "False"'


# ---------------------------------------------------------------------------
# Parsing


def test_parse_men_grammar():
    ast = parse_gbnf(MEN)
    assert ast.rule_names() == ["root", "response"]
    assert ast.rules["root"] == [[Ref("response")]]
    assert ast.rules["response"] == [[Cls(((ord("1"), ord("5")),), False)]]


def test_parse_empty_literal():
    ast = parse_gbnf('root ::= ""')
    assert ast.rules["root"] == [[Lit("")]]
    grammar = compile_grammar(ast)
    assert grammar.validate("")
    assert not grammar.validate("x")


def test_parse_literal_escapes():
    ast = parse_gbnf('root ::= "a\\n\\t\\"\\\\"')
    assert ast.rules["root"] == [[Lit('a\n\t"\\')]]


def test_parse_repetitions_and_groups():
    ast = parse_gbnf('root ::= "a"* ("b" | "c")+ [xy]?')
    (seq,) = ast.rules["root"]
    assert seq[0] == Rep(Lit("a"), "*")
    assert seq[1].kind == "+"
    assert seq[2] == Rep(Cls(((120, 120), (121, 121)), False), "?")


def test_parse_negated_class():
    ast = parse_gbnf("root ::= [^a-z]")
    assert ast.rules["root"] == [[Cls(((97, 122),), True)]]
    grammar = compile_grammar(ast)
    assert grammar.validate("Z")
    assert not grammar.validate("q")


def test_parse_comments_and_multiline_alternation():
    text = '# leading comment\nroot ::= "a" |  # tail comment\n  "b"\n'
    grammar = compile_grammar(parse_gbnf(text))
    assert grammar.enumerate_language(2) == {"a", "b"}


def test_syntax_error_carries_position():
    with pytest.raises(GrammarSyntaxError) as err:
        parse_gbnf('root ::= "unterminated')
    assert err.value.line == 1
    assert err.value.col == 10


def test_undefined_rule_reference():
    with pytest.raises(GrammarError, match="undefined rule 'missing'"):
        parse_gbnf("root ::= missing")


def test_missing_root_rule():
    with pytest.raises(GrammarError, match="no 'root' rule"):
        parse_gbnf('top ::= "x"')


def test_reversed_class_range_rejected():
    with pytest.raises(GrammarSyntaxError, match="reversed range"):
        parse_gbnf("root ::= [5-1]")


def test_accepted_language_of_two_decimal_grammar():
    # Oracle: hand recognizer over every string of length <= 4 drawn from
    # the grammar's alphabet.
    grammar = CompiledGrammar.from_text('root ::= "0." [0-9] [0-9]')
    alphabet = "0123456789."

    def hand_accepts(s):
        return (len(s) == 4 and s[0] == "0" and s[1] == "."
                and s[2].isdigit() and s[3].isdigit())

    accepted = set()
    for length in range(5):
        for chars in product(alphabet, repeat=length):
            s = "".join(chars)
            if grammar.validate(s):
                accepted.add(s)
            assert grammar.validate(s) == hand_accepts(s), s
    assert len(accepted) == 100


# ---------------------------------------------------------------------------
# Compilation


def test_compile_rejects_direct_left_recursion():
    with pytest.raises(LeftRecursionError):
        compile_grammar(parse_gbnf('root ::= root "x"'))


def test_compile_rejects_indirect_left_recursion():
    text = 'root ::= a\na ::= b "x"\nb ::= a | "y"'
    with pytest.raises(LeftRecursionError):
        compile_grammar(parse_gbnf(text))


def test_compile_rejects_left_recursion_through_nullable_prefix():
    text = 'root ::= opt root "x" | "y"\nopt ::= "z" | ""'
    with pytest.raises(LeftRecursionError):
        compile_grammar(parse_gbnf(text))


def test_compile_requires_root():
    ast = parse_gbnf(MEN)
    del ast.rules["root"]
    with pytest.raises(GrammarError, match="root"):
        compile_grammar(ast)


def test_plus_accepts_nonempty_digit_strings():
    grammar = CompiledGrammar.from_text("root ::= item+\nitem ::= [0-9]")
    digits = "0123456789"
    expected = {"".join(chars)
                for n in (1, 2, 3) for chars in product(digits, repeat=n)}
    assert grammar.enumerate_language(3) == expected


def test_rule_numbering_is_stable():
    a = CompiledGrammar.from_text(MEN)
    b = CompiledGrammar.from_text(MEN)
    assert a.rule_names == b.rule_names
    assert a.rules == b.rules
    assert a.root_id == b.root_id


def test_stack_depth_cap():
    # Center recursion grows one frame per consumed scalar.
    grammar = CompiledGrammar.from_text('root ::= "x" root "y" | ""')
    state = grammar.initial_state()
    with pytest.raises(StackDepthError):
        state.advance_text("x" * 2000)


# ---------------------------------------------------------------------------
# States and advancement


def test_initial_state_viability_men():
    state = CompiledGrammar.from_text(MEN).initial_state()
    # Char-by-char oracle over a wide scalar range.
    for cp in range(0x20, 0x80):
        expected = "1" <= chr(cp) <= "5"
        assert (not state.advance_scalar(cp).rejected) == expected
    assert state.viable_scalars() == {ord(c) for c in "12345"}


def test_initial_state_empty_grammar_terminable():
    state = CompiledGrammar.from_text('root ::= ""').initial_state()
    assert state.terminable


def test_initial_state_stsb_single_viable_scalar():
    state = CompiledGrammar.from_text(STSB).initial_state()
    assert state.viable_scalars() == {ord("0")}


def test_advance_text_accepts_and_terminates():
    grammar = CompiledGrammar.from_text(STSB)
    state = grammar.initial_state().advance_text("0.57")
    assert not state.rejected
    assert state.terminable


def test_advance_text_rejects_out_of_language():
    grammar = CompiledGrammar.from_text(STSB)
    assert grammar.initial_state().advance_text("1.00").rejected


def test_advance_empty_text_is_identity():
    for text in (MEN, STSB, QUORA):
        state = CompiledGrammar.from_text(text).initial_state()
        assert state.advance_text("") == state


def test_rejection_absorbs():
    grammar = CompiledGrammar.from_text(MEN)
    rejected = grammar.initial_state().advance_text("9")
    assert rejected.rejected
    assert rejected.advance_text("123").rejected


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="015.Tr", max_size=8))
def test_composition_property_stsb(text):
    grammar = CompiledGrammar.from_text(STSB)
    start = grammar.initial_state()
    for cut in range(len(text) + 1):
        left, right = text[:cut], text[cut:]
        assert start.advance_text(text) == start.advance_text(left).advance_text(right)


def test_validate_output_examples():
    stsb = CompiledGrammar.from_text(STSB)
    assert stsb.validate("0.09")
    assert not stsb.validate("0.9")  # prefix only, not terminable
    men = CompiledGrammar.from_text(MEN)
    assert not men.validate("")
    nullable = CompiledGrammar.from_text('root ::= "x"?')
    assert nullable.validate("")


# ---------------------------------------------------------------------------
# Token masks


def test_mask_men_toy_vocab():
    vocab = Vocabulary.from_surfaces(["1", "2", "3", "4", "5", "6", "12"])
    state = CompiledGrammar.from_text(MEN).initial_state()
    mask = state.allowed_tokens(vocab)
    assert mask.allowed_ids() == [0, 1, 2, 3, 4]  # "6" and "12" blocked
    assert not mask.allow_eos


def test_mask_quora_partial_tokens():
    vocab = Vocabulary.from_surfaces(["Tr", "True", "F", "x"])
    state = CompiledGrammar.from_text(QUORA).initial_state()
    mask = state.allowed_tokens(vocab)
    assert mask.allowed_ids() == [0, 1, 2]


def test_mask_after_full_match_allows_only_eos():
    vocab = Vocabulary.from_surfaces(["Tr", "True", "F", "x"])
    state = CompiledGrammar.from_text(QUORA).initial_state().advance_text("True")
    mask = state.allowed_tokens(vocab)
    assert mask.allowed_ids() == []
    assert mask.allow_eos


def test_mask_on_rejected_state_raises():
    vocab = Vocabulary.from_surfaces(["1"])
    state = CompiledGrammar.from_text(MEN).initial_state().advance_text("7")
    with pytest.raises(ValueError, match="rejected"):
        state.allowed_tokens(vocab)


def test_mask_skips_non_utf8_tokens():
    vocab = Vocabulary([b"1", b"\xff\xfe", b"2"])
    state = CompiledGrammar.from_text(MEN).initial_state()
    mask = state.allowed_tokens(vocab)
    assert mask.allowed_ids() == [0, 2]


def test_mask_oracle_equivalence_randomized():
    rng = random.Random(20240917)
    checked = 0
    while checked < 120:
        text = random_grammar_text(rng)
        try:
            grammar = CompiledGrammar.from_text(text)
        except GrammarError:
            continue
        vocab = random_vocab(rng)
        state = random_reachable_state(rng, grammar)
        if state.rejected:
            continue
        mask = state.allowed_tokens(vocab)
        bits, eos = mask_oracle(state, vocab)
        assert mask.bits == bits, text
        assert mask.allow_eos == eos
        checked += 1


def test_mask_determinism():
    vocab = Vocabulary.from_surfaces(["1", "2", "3", "4", "5", "6", "12"])
    grammar = CompiledGrammar.from_text(MEN)
    masks = {grammar.initial_state().allowed_tokens(vocab).bits for _ in range(20)}
    assert len(masks) == 1
