"""Tokenizer vocabularies: loading, byte-level BPE, leading-whitespace twins.

A :class:`Vocabulary` is an immutable dense id -> byte-string table with
optional ranked merge rules. Two JSON layouts are accepted by
:func:`load_vocab`:

* the widespread tokenizer model file with a top-level ``model`` object
  (``model.vocab`` as a mapping or ``[piece, score]`` list, optional
  ``model.merges``, optional ``added_tokens``); byte-level surface
  encodings and ``▁``-as-space markers are detected and resolved so
  that decoding always yields real bytes;
* a flat test-friendly layout ``{"vocab": {...}, "merges": [...],
  "special_tokens": [...], "byte_level": false}``.

Encoding is plain byte-level BPE: start from single bytes and repeatedly
apply the lowest-ranked applicable merge. Vocabularies shipped without
merges fall back to greedy longest-match over surfaces. Neither mode
splits text beforehand, so merges are applied across the whole input;
callers that shard a corpus should shard on newlines and encode each
line separately.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator, Optional

_BYTE_PIECE = re.compile(r"^<0x([0-9A-Fa-f]{2})>$")
_SP_SPACE = "▁"


class VocabularyError(ValueError):
    """Malformed vocabulary file or table invariant violation."""


@lru_cache(maxsize=1)
def _byte_to_unicode() -> dict[int, str]:
    """The byte <-> printable-character table used by byte-level vocabularies."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(bs, cs)}


@lru_cache(maxsize=1)
def _unicode_to_byte() -> dict[str, int]:
    return {c: b for b, c in _byte_to_unicode().items()}


@dataclass(frozen=True)
class LwPair:
    """A leading-whitespace twin: decode(lw_id) == b" " + decode(bare_id)."""

    lw_id: int
    bare_id: int


class _TrieNode:
    __slots__ = ("children", "token_ids")

    def __init__(self):
        self.children: dict[str, _TrieNode] = {}
        self.token_ids: list[int] = []


class PrefixTree:
    """Character-level trie over the decodable token surfaces of a vocabulary."""

    def __init__(self):
        self.root = _TrieNode()
        self.size = 0

    def insert(self, surface: str, token_id: int) -> None:
        node = self.root
        for ch in surface:
            node = node.children.setdefault(ch, _TrieNode())
        node.token_ids.append(token_id)
        self.size += 1

    def iter_tokens(self) -> Iterator[tuple[str, int]]:
        work: list[tuple[str, _TrieNode]] = [("", self.root)]
        while work:
            prefix, node = work.pop()
            for tid in node.token_ids:
                yield prefix, tid
            for ch, child in node.children.items():
                work.append((prefix + ch, child))


class Vocabulary:
    """Immutable token table; shareable across threads."""

    def __init__(self, tokens: list[bytes],
                 merges: Optional[list[tuple[bytes, bytes]]] = None,
                 special_ids: Iterable[int] = (),
                 name: str = ""):
        self._tokens: tuple[bytes, ...] = tuple(tokens)
        self.special_ids = frozenset(special_ids)
        self.name = name
        self._inverse: dict[bytes, int] = {}
        for tid, surface in enumerate(self._tokens):
            # First writer wins so byte-fallback aliases of a real piece
            # stay decodable without clobbering the canonical id.
            self._inverse.setdefault(surface, tid)
        self._merges = tuple(merges or ())
        self._merge_ranks = {pair: rank for rank, pair in enumerate(self._merges)}
        self._max_surface_len = max((len(t) for t in self._tokens), default=0)
        self._tree: Optional[PrefixTree] = None

    @classmethod
    def from_surfaces(cls, surfaces: Iterable[str], **kwargs) -> "Vocabulary":
        return cls([s.encode("utf-8") for s in surfaces], **kwargs)

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self._tokens):
            raise IndexError(f"token id {token_id} out of range [0, {len(self._tokens)})")
        return self._tokens[token_id]

    def id_of(self, surface: bytes) -> Optional[int]:
        return self._inverse.get(surface)

    def surface_text(self, token_id: int) -> Optional[str]:
        """Token bytes decoded as UTF-8, or None when they are not valid UTF-8."""
        try:
            return self.token_bytes(token_id).decode("utf-8")
        except UnicodeDecodeError:
            return None

    # -- encode / decode ---------------------------------------------------

    def decode(self, ids: Iterable[int], specials: str = "marker") -> bytes:
        """Concatenated token bytes; ``specials="skip"`` drops special ids."""
        if specials not in ("marker", "skip"):
            raise ValueError(f"unknown specials mode {specials!r}")
        out = []
        for tid in ids:
            piece = self.token_bytes(tid)
            if specials == "skip" and tid in self.special_ids:
                continue
            out.append(piece)
        return b"".join(out)

    def encode(self, text: str) -> list[int]:
        data = text.encode("utf-8")
        if not data:
            return []
        if self._merge_ranks:
            parts = self._bpe(data)
        else:
            parts = self._greedy_parts(data)
        return [self._part_id(p) for p in parts]

    def _part_id(self, part: bytes) -> int:
        tid = self._inverse.get(part)
        if tid is None:
            raise VocabularyError(
                f"no token for byte sequence {part!r}; vocabulary lacks byte fallback")
        return tid

    def _bpe(self, data: bytes) -> list[bytes]:
        parts = [data[i:i + 1] for i in range(len(data))]
        ranks = self._merge_ranks
        while len(parts) > 1:
            best_rank = None
            for i in range(len(parts) - 1):
                rank = ranks.get((parts[i], parts[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
            if best_rank is None:
                break
            left, right = self._merges[best_rank]
            merged: list[bytes] = []
            i = 0
            while i < len(parts):
                if (i + 1 < len(parts) and parts[i] == left
                        and parts[i + 1] == right):
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def _greedy_parts(self, data: bytes) -> list[bytes]:
        parts = []
        i = 0
        while i < len(data):
            taken = None
            for length in range(min(self._max_surface_len, len(data) - i), 0, -1):
                if data[i:i + length] in self._inverse:
                    taken = data[i:i + length]
                    break
            if taken is None:
                raise VocabularyError(
                    f"no token matches input at byte offset {i} "
                    f"({data[i:i+1]!r}); vocabulary lacks byte fallback")
            parts.append(taken)
            i += len(taken)
        return parts

    def min_token_count(self, text: str) -> int:
        """Fewest tokens that can spell ``text``, by shortest-path segmentation."""
        data = text.encode("utf-8")
        n = len(data)
        inf = n + 1
        dp = [0] + [inf] * n
        for i in range(n):
            if dp[i] > n:
                continue
            for length in range(1, min(self._max_surface_len, n - i) + 1):
                if data[i:i + length] in self._inverse:
                    dp[i + length] = min(dp[i + length], dp[i] + 1)
        if dp[n] > n:
            raise VocabularyError(f"{text!r} is not representable with this vocabulary")
        return dp[n]

    # -- structure ----------------------------------------------------------

    def prefix_tree(self) -> PrefixTree:
        """Trie over decodable surfaces, built once and cached."""
        if self._tree is None:
            tree = PrefixTree()
            for tid in range(len(self._tokens)):
                text = self.surface_text(tid)
                if text is not None:
                    tree.insert(text, tid)
            self._tree = tree
        return self._tree


# ---------------------------------------------------------------------------
# Loading


def _contains_type(obj, type_name: str) -> bool:
    if isinstance(obj, dict):
        if obj.get("type") == type_name:
            return True
        return any(_contains_type(v, type_name) for v in obj.values())
    if isinstance(obj, list):
        return any(_contains_type(v, type_name) for v in obj)
    return False


def _surface_to_bytes(raw: str, byte_level: bool, sp_marker: bool) -> bytes:
    if byte_level:
        table = _unicode_to_byte()
        try:
            return bytes(table[ch] for ch in raw)
        except KeyError as exc:
            raise VocabularyError(
                f"surface {raw!r} contains non-byte-level character {exc.args[0]!r}")
    m = _BYTE_PIECE.match(raw)
    if m:
        return bytes([int(m.group(1), 16)])
    if sp_marker:
        raw = raw.replace(_SP_SPACE, " ")
    return raw.encode("utf-8")


def _parse_merge_entry(entry) -> tuple[str, str]:
    if isinstance(entry, str):
        left, sep, right = entry.partition(" ")
        if not sep or not left or not right:
            raise VocabularyError(f"malformed merge entry {entry!r}")
        return left, right
    if isinstance(entry, (list, tuple)) and len(entry) == 2:
        return str(entry[0]), str(entry[1])
    raise VocabularyError(f"malformed merge entry {entry!r}")


def load_vocab(path) -> Vocabulary:
    """Load a tokenizer description file into a :class:`Vocabulary`.

    Raises :class:`VocabularyError` on malformed files, duplicate raw
    surfaces, or non-dense token ids.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VocabularyError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise VocabularyError(f"{path}: expected a JSON object at top level")

    raw_entries: dict[int, str] = {}
    special_ids: set[int] = set()
    merges_raw: list = []
    byte_level = False
    sp_marker = False

    if "model" in doc:
        model = doc["model"]
        if not isinstance(model, dict) or "vocab" not in model:
            raise VocabularyError(f"{path}: 'model' object lacks a 'vocab' table")
        vocab_obj = model["vocab"]
        if isinstance(vocab_obj, dict):
            for surface, tid in vocab_obj.items():
                _claim_id(raw_entries, int(tid), surface, path)
        elif isinstance(vocab_obj, list):  # unigram-style [piece, score] rows
            for tid, row in enumerate(vocab_obj):
                _claim_id(raw_entries, tid, str(row[0]), path)
        else:
            raise VocabularyError(f"{path}: unsupported 'vocab' layout")
        merges_raw = model.get("merges") or []
        for added in doc.get("added_tokens") or []:
            tid = int(added["id"])
            if tid not in raw_entries:
                _claim_id(raw_entries, tid, str(added["content"]), path)
            if added.get("special", False):
                special_ids.add(tid)
        byte_level = (_contains_type(doc.get("pre_tokenizer"), "ByteLevel")
                      or _contains_type(doc.get("decoder"), "ByteLevel"))
        if not byte_level:
            sp_marker = any(_SP_SPACE in s for s in raw_entries.values())
    elif "vocab" in doc:
        for surface, tid in doc["vocab"].items():
            _claim_id(raw_entries, int(tid), surface, path)
        merges_raw = doc.get("merges") or []
        byte_level = bool(doc.get("byte_level", False))
        if not byte_level:
            sp_marker = any(_SP_SPACE in s for s in raw_entries.values())
        for name in doc.get("special_tokens") or []:
            matches = [tid for tid, s in raw_entries.items() if s == name]
            if not matches:
                raise VocabularyError(f"{path}: special token {name!r} not in vocab")
            special_ids.update(matches)
    else:
        raise VocabularyError(f"{path}: neither 'model' nor 'vocab' key present")

    if not raw_entries:
        raise VocabularyError(f"{path}: empty vocabulary")
    n = len(raw_entries)
    if sorted(raw_entries) != list(range(n)):
        missing = sorted(set(range(n)) - set(raw_entries))[:5]
        raise VocabularyError(
            f"{path}: token ids are not dense in [0, {n}) (first gaps: {missing})")

    seen: dict[str, int] = {}
    for tid in range(n):
        surface = raw_entries[tid]
        if surface in seen:
            raise VocabularyError(
                f"{path}: duplicate surface {surface!r} (ids {seen[surface]} and {tid})")
        seen[surface] = tid

    tokens = []
    for tid in range(n):
        if tid in special_ids:
            tokens.append(raw_entries[tid].encode("utf-8"))
        else:
            tokens.append(_surface_to_bytes(raw_entries[tid], byte_level, sp_marker))

    merges = []
    for entry in merges_raw:
        left, right = _parse_merge_entry(entry)
        merges.append((_surface_to_bytes(left, byte_level, sp_marker),
                       _surface_to_bytes(right, byte_level, sp_marker)))

    return Vocabulary(tokens, merges=merges, special_ids=special_ids, name=str(path))


def _claim_id(entries: dict[int, str], tid: int, surface: str, path) -> None:
    if tid < 0:
        raise VocabularyError(f"{path}: negative token id {tid}")
    if tid in entries:
        raise VocabularyError(f"{path}: token id {tid} assigned twice")
    entries[tid] = surface


# ---------------------------------------------------------------------------
# Leading-whitespace twins

_WS_PREFIXES = (b" ", b"\t", b"\n", b"\r")


def find_lw_pairs(vocab: Vocabulary) -> list[LwPair]:
    """All (space-prefixed twin, bare token) pairs, ordered by bare id.

    Only a single leading ASCII space counts; tab and newline twins are
    tallied separately by :func:`whitespace_twin_counts`.
    """
    pairs = []
    for bare_id in range(vocab.size):
        surface = vocab.token_bytes(bare_id)
        if not surface or surface.startswith(_WS_PREFIXES):
            continue
        lw_id = vocab.id_of(b" " + surface)
        if lw_id is not None and lw_id != bare_id:
            pairs.append(LwPair(lw_id=lw_id, bare_id=bare_id))
    return pairs


def whitespace_twin_counts(vocab: Vocabulary) -> dict[str, int]:
    counts = {" ": 0, "\t": 0, "\n": 0}
    for bare_id in range(vocab.size):
        surface = vocab.token_bytes(bare_id)
        if not surface or surface.startswith(_WS_PREFIXES):
            continue
        for prefix in counts:
            twin = vocab.id_of(prefix.encode() + surface)
            if twin is not None and twin != bare_id:
                counts[prefix] += 1
    return counts


def pair_participation_rate(vocab: Vocabulary, pairs: list[LwPair]) -> float:
    """Fraction of token ids that belong to at least one twin pair."""
    members = {tid for p in pairs for tid in (p.lw_id, p.bare_id)}
    return len(members) / vocab.size if vocab.size else 0.0


def pairs_to_csv(vocab: Vocabulary, pairs: list[LwPair]) -> str:
    lines = ["bare_id,lw_id,surface"]
    for p in pairs:
        surface = vocab.token_bytes(p.bare_id).decode("utf-8", errors="replace")
        if any(c in surface for c in ',"\n'):
            surface = '"' + surface.replace('"', '""') + '"'
        lines.append(f"{p.bare_id},{p.lw_id},{surface}")
    return "\n".join(lines) + "\n"
