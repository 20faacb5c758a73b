import json

import pytest
from hypothesis import given, settings, strategies as st

from gcd_audit.vocab import (Vocabulary, VocabularyError, find_lw_pairs,
                             load_vocab, pair_participation_rate, pairs_to_csv,
                             whitespace_twin_counts)


@pytest.fixture
def byte_complete_vocab() -> Vocabulary:
    tokens = [bytes([b]) for b in range(256)]
    tokens += [b"th", b"the", b" cat", b"cat"]
    merges = [(b"t", b"h"), (b"th", b"e"), (b"c", b"a"), (b"ca", b"t"), (b" ", b"cat")]
    return Vocabulary(tokens, merges=merges)


# ---------------------------------------------------------------------------
# Loading


def test_load_flat_toy_vocab(fixtures_dir):
    vocab = load_vocab(fixtures_dir / "toy_vocab.json")
    assert vocab.size == 10
    assert vocab.token_bytes(6) == b"12"
    assert vocab.id_of(b"True") == 9


def test_load_byte_level_model_file(tmp_path):
    doc = {
        "model": {"type": "BPE",
                  "vocab": {"culture": 0, "Ġculture": 1, "Ġ": 2, "a": 3},
                  "merges": []},
        "added_tokens": [{"id": 4, "content": "<s>", "special": True}],
        "pre_tokenizer": {"type": "Sequence",
                          "pretokenizers": [{"type": "ByteLevel"}]},
    }
    path = tmp_path / "tok.json"
    path.write_text(json.dumps(doc))
    vocab = load_vocab(path)
    assert vocab.token_bytes(0) == b"culture"
    assert vocab.token_bytes(1) == b" culture"
    assert vocab.special_ids == {4}
    pairs = find_lw_pairs(vocab)
    assert [(p.lw_id, p.bare_id) for p in pairs] == [(1, 0)]


def test_load_sentencepiece_marker_file(tmp_path):
    doc = {"model": {"type": "Unigram",
                     "vocab": [["▁dog", -1.0], ["dog", -2.0], ["<0x0A>", -3.0]]}}
    path = tmp_path / "sp.json"
    path.write_text(json.dumps(doc))
    vocab = load_vocab(path)
    assert vocab.token_bytes(0) == b" dog"
    assert vocab.token_bytes(2) == b"\n"
    assert [(p.lw_id, p.bare_id) for p in find_lw_pairs(vocab)] == [(0, 1)]


def test_load_rejects_duplicate_surface(tmp_path):
    doc = {"model": {"vocab": {"x": 0, "y": 1}},
           "added_tokens": [{"id": 2, "content": "x"}]}
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(VocabularyError, match="duplicate surface"):
        load_vocab(path)


def test_load_rejects_non_dense_ids(tmp_path):
    path = tmp_path / "gap.json"
    path.write_text(json.dumps({"vocab": {"a": 0, "b": 3}}))
    with pytest.raises(VocabularyError, match="not dense"):
        load_vocab(path)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(VocabularyError, match="not valid JSON"):
        load_vocab(path)


def test_load_rejects_unknown_layout(tmp_path):
    path = tmp_path / "odd.json"
    path.write_text(json.dumps({"words": ["a"]}))
    with pytest.raises(VocabularyError, match="neither 'model' nor 'vocab'"):
        load_vocab(path)


# ---------------------------------------------------------------------------
# Encode / decode


def test_bpe_merge_order():
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    vocab = Vocabulary.from_surfaces(letters + ["th"], merges=[(b"t", b"h")])
    assert [vocab.token_bytes(i) for i in vocab.encode("the")] == [b"th", b"e"]


def test_encode_empty():
    vocab = Vocabulary.from_surfaces(["a"])
    assert vocab.encode("") == []
    assert vocab.decode([]) == b""


def test_decode_inverse_of_encode():
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    vocab = Vocabulary.from_surfaces(letters + ["th"], merges=[(b"t", b"h")])
    ids = vocab.encode("the")
    assert vocab.decode(ids) == b"the"


def test_decode_specials_modes():
    vocab = Vocabulary.from_surfaces(["<s>", "hi"], special_ids={0})
    assert vocab.decode([0, 1]) == b"<s>hi"
    assert vocab.decode([0, 1], specials="skip") == b"hi"
    with pytest.raises(ValueError, match="specials mode"):
        vocab.decode([0], specials="bogus")


def test_decode_rejects_out_of_range():
    vocab = Vocabulary.from_surfaces(["a"])
    with pytest.raises(IndexError):
        vocab.decode([1])


def test_encode_error_without_byte_fallback():
    vocab = Vocabulary.from_surfaces(["cat"])
    with pytest.raises(VocabularyError, match="byte fallback"):
        vocab.encode("dog")


def test_greedy_longest_match_mode():
    vocab = Vocabulary.from_surfaces(["cat", " cat", "dog", " ", "c", "a", "t"])
    parts = [vocab.token_bytes(i) for i in vocab.encode("cat cat cat")]
    assert parts == [b"cat", b" cat", b" cat"]


@settings(max_examples=150, deadline=None)
@given(st.text(max_size=40))
def test_round_trip_full_bpe(text):
    tokens = [bytes([b]) for b in range(256)]
    vocab = Vocabulary(tokens + [b"th", b" t"], merges=[(b"t", b"h"), (b" ", b"t")])
    assert vocab.decode(vocab.encode(text)) == text.encode("utf-8")


def test_min_token_count(byte_complete_vocab):
    assert byte_complete_vocab.min_token_count("the") == 1
    assert byte_complete_vocab.min_token_count("them") == 2
    assert byte_complete_vocab.min_token_count(" cat") == 1
    assert byte_complete_vocab.min_token_count("") == 0


# ---------------------------------------------------------------------------
# Prefix tree


def test_prefix_tree_enumerates_exact_surfaces():
    surfaces = ["", "a", "ab", "abc", "b", "ba"]
    vocab = Vocabulary.from_surfaces(surfaces)
    seen = sorted(vocab.prefix_tree().iter_tokens())
    assert seen == sorted((s, i) for i, s in enumerate(surfaces))


def test_prefix_tree_cached():
    vocab = Vocabulary.from_surfaces(["a", "b"])
    assert vocab.prefix_tree() is vocab.prefix_tree()


def test_prefix_tree_skips_invalid_utf8():
    vocab = Vocabulary([b"ok", b"\xff"])
    assert [tid for _, tid in vocab.prefix_tree().iter_tokens()] == [0]


# ---------------------------------------------------------------------------
# Leading-whitespace pairs


def test_find_lw_pairs_toy():
    vocab = Vocabulary.from_surfaces(["cat", " cat", "dog"])
    pairs = find_lw_pairs(vocab)
    assert [(p.lw_id, p.bare_id) for p in pairs] == [(1, 0)]
    assert pair_participation_rate(vocab, pairs) == pytest.approx(2 / 3)


def test_find_lw_pairs_none():
    vocab = Vocabulary.from_surfaces(["cat", "dog"])
    assert find_lw_pairs(vocab) == []
    assert pair_participation_rate(vocab, []) == 0.0


def test_lw_pairs_decode_identity_and_order():
    surfaces = ["b", " b", "a", " a", " ", "  a"]
    vocab = Vocabulary.from_surfaces(surfaces)
    pairs = find_lw_pairs(vocab)
    assert [p.bare_id for p in pairs] == sorted(p.bare_id for p in pairs)
    for pair in pairs:
        assert vocab.token_bytes(pair.lw_id) == b" " + vocab.token_bytes(pair.bare_id)
        assert pair.lw_id != pair.bare_id


def test_lw_pairs_ignore_whitespace_initial_bare():
    # " a" must not be treated as the bare side of ("  a", " a").
    vocab = Vocabulary.from_surfaces([" a", "  a"])
    assert find_lw_pairs(vocab) == []


def test_whitespace_twin_counts():
    vocab = Vocabulary.from_surfaces(["x", " x", "\tx", "\nx", "y", "\ty"])
    counts = whitespace_twin_counts(vocab)
    assert counts == {" ": 1, "\t": 2, "\n": 1}


def test_pairs_csv_shape():
    vocab = Vocabulary.from_surfaces(["cat", " cat", 'qu"ote', ' qu"ote'])
    pairs = find_lw_pairs(vocab)
    lines = pairs_to_csv(vocab, pairs).splitlines()
    assert lines[0] == "bare_id,lw_id,surface"
    assert len(lines) == 1 + len(pairs)


def test_real_tokenizer_pairs_optional(real_tokenizer_path):
    vocab = load_vocab(real_tokenizer_path)
    pairs = find_lw_pairs(vocab)
    rate = pair_participation_rate(vocab, pairs)
    assert 0.22 <= rate <= 0.45
    surfaces = {vocab.token_bytes(p.bare_id) for p in pairs}
    assert b"culture" in surfaces
