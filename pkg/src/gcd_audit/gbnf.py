"""GBNF grammar engine: parse, compile, incrementally recognize.

Grammars are interpreted over Unicode scalar values, never raw bytes. A
compiled grammar drives a stack-set recognizer: the automaton state is a
set of derivation stacks (flattened continuations) advanced one scalar at
a time. Token-level masks are computed by walking a vocabulary prefix
tree so shared token prefixes are checked once; the result is identical
to advancing every token separately.

Dialect accepted by :func:`parse_gbnf`:

* ``name ::= body`` rule definitions, one per line (a rule body may
  continue on the next line after a trailing ``|`` or before a leading
  ``|``, and freely inside parentheses)
* alternation ``|`` and juxtaposition
* quoted literals with ``\\n``, ``\\t``, ``\\"``, ``\\\\`` escapes
* character classes ``[a-z0-9]`` with ranges and leading ``^`` negation
* postfix ``*``, ``+``, ``?`` and grouping ``( ... )``
* ``#`` comments to end of line

Grouping and repetition are desugared at compile time into auxiliary
rules (``e*`` becomes ``r ::= e r | ""``), keeping the recognizer a plain
stack-set machine. Left-recursive grammars are rejected when compiled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

MAX_STACK_DEPTH = 1024


class GrammarError(ValueError):
    """Base error for grammar parsing, compilation, and recognition."""


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class LeftRecursionError(GrammarError):
    pass


class StackDepthError(GrammarError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Lit:
    text: str


@dataclass(frozen=True)
class Cls:
    ranges: tuple[tuple[int, int], ...]
    negated: bool = False


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Rep:
    item: "Element"
    kind: str  # one of "*", "+", "?"


@dataclass(frozen=True)
class Group:
    alternatives: tuple[tuple["Element", ...], ...]


Element = Union[Lit, Cls, Ref, Rep, Group]


@dataclass
class GrammarAst:
    """Rule table: name -> alternation (list of juxtaposition sequences)."""

    rules: dict[str, list[list[Element]]]

    def rule_names(self) -> list[str]:
        return list(self.rules)


# ---------------------------------------------------------------------------
# Lexer

_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
_IDENT_CONT = _IDENT_START | set("0123456789_-")
_LIT_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}
_CLS_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", "]": "]",
                "[": "[", "^": "^", "-": "-"}


@dataclass(frozen=True)
class _Tok:
    kind: str  # IDENT DEFINE PIPE STAR PLUS QMARK LPAREN RPAREN LIT CLS NL EOF
    value: object
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def err(msg: str) -> GrammarSyntaxError:
        return GrammarSyntaxError(msg, line, col)

    while i < n:
        c = text[i]
        if c == "\n":
            toks.append(_Tok("NL", None, line, col))
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
                col += 1
            continue
        if text.startswith("::=", i):
            toks.append(_Tok("DEFINE", None, line, col))
            i += 3
            col += 3
            continue
        if c in "|*+?()":
            kind = {"|": "PIPE", "*": "STAR", "+": "PLUS", "?": "QMARK",
                    "(": "LPAREN", ")": "RPAREN"}[c]
            toks.append(_Tok(kind, None, line, col))
            i += 1
            col += 1
            continue
        if c in _IDENT_START:
            start, scol = i, col
            while i < n and text[i] in _IDENT_CONT:
                i += 1
                col += 1
            toks.append(_Tok("IDENT", text[start:i], line, scol))
            continue
        if c == '"':
            sline, scol = line, col
            i += 1
            col += 1
            out: list[str] = []
            while True:
                if i >= n or text[i] == "\n":
                    raise GrammarSyntaxError("unterminated string literal", sline, scol)
                ch = text[i]
                if ch == '"':
                    i += 1
                    col += 1
                    break
                if ch == "\\":
                    if i + 1 >= n:
                        raise GrammarSyntaxError("unterminated escape", line, col)
                    esc = text[i + 1]
                    if esc not in _LIT_ESCAPES:
                        raise GrammarSyntaxError(f"unknown escape '\\{esc}'", line, col)
                    out.append(_LIT_ESCAPES[esc])
                    i += 2
                    col += 2
                    continue
                out.append(ch)
                i += 1
                col += 1
            toks.append(_Tok("LIT", "".join(out), sline, scol))
            continue
        if c == "[":
            sline, scol = line, col
            i += 1
            col += 1
            negated = False
            if i < n and text[i] == "^":
                negated = True
                i += 1
                col += 1
            items: list[str] = []

            def read_cls_char() -> str:
                nonlocal i, col
                if i >= n or text[i] == "\n":
                    raise GrammarSyntaxError("unterminated character class", sline, scol)
                ch = text[i]
                if ch == "\\":
                    if i + 1 >= n:
                        raise GrammarSyntaxError("unterminated escape", line, col)
                    esc = text[i + 1]
                    if esc not in _CLS_ESCAPES:
                        raise GrammarSyntaxError(f"unknown escape '\\{esc}'", line, col)
                    i += 2
                    col += 2
                    return _CLS_ESCAPES[esc]
                i += 1
                col += 1
                return ch

            ranges: list[tuple[int, int]] = []
            while True:
                if i >= n or text[i] == "\n":
                    raise GrammarSyntaxError("unterminated character class", sline, scol)
                if text[i] == "]":
                    i += 1
                    col += 1
                    break
                lo = read_cls_char()
                if i < n and text[i] == "-" and i + 1 < n and text[i + 1] != "]":
                    i += 1
                    col += 1
                    hi = read_cls_char()
                    if ord(lo) > ord(hi):
                        raise GrammarSyntaxError(
                            f"reversed range '{lo}-{hi}' in character class", line, col)
                    ranges.append((ord(lo), ord(hi)))
                else:
                    ranges.append((ord(lo), ord(lo)))
            if not ranges:
                raise GrammarSyntaxError("empty character class", sline, scol)
            toks.append(_Tok("CLS", (tuple(ranges), negated), sline, scol))
            continue
        raise err(f"unexpected character {c!r}")
    toks.append(_Tok("EOF", None, line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, toks: list[_Tok]):
        self.toks = toks
        self.pos = 0

    def peek(self, offset: int = 0) -> _Tok:
        return self.toks[min(self.pos + offset, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def skip_newlines(self) -> None:
        while self.peek().kind == "NL":
            self.next()

    def expect(self, kind: str, what: str) -> _Tok:
        tok = self.next()
        if tok.kind != kind:
            raise GrammarSyntaxError(f"expected {what}", tok.line, tok.col)
        return tok

    def parse(self) -> GrammarAst:
        rules: dict[str, list[list[Element]]] = {}
        self.skip_newlines()
        while self.peek().kind != "EOF":
            name_tok = self.expect("IDENT", "rule name")
            self.expect("DEFINE", "'::='")
            alts = self.parse_alternation(depth=0)
            if name_tok.value in rules:
                raise GrammarSyntaxError(
                    f"duplicate rule '{name_tok.value}'", name_tok.line, name_tok.col)
            rules[str(name_tok.value)] = alts
            self.skip_newlines()
        if not rules:
            raise GrammarError("grammar defines no rules")
        return GrammarAst(rules)

    def parse_alternation(self, depth: int) -> list[list[Element]]:
        # At depth 0 a newline ends the rule unless the alternation continues
        # with '|' on the next line; inside parentheses newlines are free.
        alts = [self.parse_sequence(depth)]
        while True:
            save = self.pos
            self.skip_newlines()
            if self.peek().kind == "PIPE":
                self.next()
                self.skip_newlines()
                alts.append(self.parse_sequence(depth))
                continue
            if depth == 0:
                self.pos = save
            return alts

    def parse_sequence(self, depth: int) -> list[Element]:
        elems = [self.parse_element(depth)]
        while True:
            if depth > 0:
                self.skip_newlines()
            kind = self.peek().kind
            if kind in ("IDENT", "LIT", "CLS", "LPAREN"):
                # An IDENT followed by '::=' starts the next rule.
                if kind == "IDENT" and self.peek(1).kind == "DEFINE":
                    return elems
                elems.append(self.parse_element(depth))
                continue
            return elems

    def parse_element(self, depth: int) -> Element:
        tok = self.next()
        if tok.kind == "LIT":
            item: Element = Lit(str(tok.value))
        elif tok.kind == "CLS":
            ranges, negated = tok.value  # type: ignore[misc]
            item = Cls(ranges, negated)
        elif tok.kind == "IDENT":
            item = Ref(str(tok.value))
        elif tok.kind == "LPAREN":
            self.skip_newlines()
            alts = self.parse_alternation(depth + 1)
            self.skip_newlines()
            self.expect("RPAREN", "')'")
            item = Group(tuple(tuple(seq) for seq in alts))
        else:
            raise GrammarSyntaxError("expected grammar element", tok.line, tok.col)
        while self.peek().kind in ("STAR", "PLUS", "QMARK"):
            op = self.next()
            item = Rep(item, {"STAR": "*", "PLUS": "+", "QMARK": "?"}[op.kind])
        return item


def _referenced_rules(elem: Element) -> Iterator[str]:
    if isinstance(elem, Ref):
        yield elem.name
    elif isinstance(elem, Rep):
        yield from _referenced_rules(elem.item)
    elif isinstance(elem, Group):
        for seq in elem.alternatives:
            for sub in seq:
                yield from _referenced_rules(sub)


def parse_gbnf(text: str) -> GrammarAst:
    """Parse GBNF source into an AST, validating rule references.

    Raises :class:`GrammarSyntaxError` with position info on malformed
    input, and :class:`GrammarError` when a referenced rule is undefined
    or no ``root`` rule exists.
    """
    ast = _Parser(_lex(text)).parse()
    for name, alts in ast.rules.items():
        for seq in alts:
            for elem in seq:
                for ref in _referenced_rules(elem):
                    if ref not in ast.rules:
                        raise GrammarError(
                            f"rule '{name}' references undefined rule '{ref}'")
    if "root" not in ast.rules:
        raise GrammarError("grammar has no 'root' rule")
    return ast


# ---------------------------------------------------------------------------
# Compiled form


@dataclass(frozen=True)
class Term:
    """Single-scalar terminal: a set of codepoint ranges, possibly negated."""

    ranges: tuple[tuple[int, int], ...]
    negated: bool = False

    def matches(self, cp: int) -> bool:
        hit = False
        for lo, hi in self.ranges:
            if lo <= cp <= hi:
                hit = True
                break
        return hit != self.negated


# A compiled symbol is either a Term or an int rule id.
Sym = Union[Term, int]


class CompiledGrammar:
    """Normalized rule table with repetitions desugared into auxiliary rules.

    Immutable after construction and safe to share across threads.
    """

    def __init__(self, rule_names: tuple[str, ...],
                 rules: tuple[tuple[tuple[Sym, ...], ...], ...], root_id: int):
        self.rule_names = rule_names
        self.rules = rules
        self.root_id = root_id

    @classmethod
    def from_text(cls, text: str) -> "CompiledGrammar":
        return compile_grammar(parse_gbnf(text))

    def rule_id(self, name: str) -> int:
        return self.rule_names.index(name)

    def initial_state(self) -> "ConstraintState":
        stacks = _expand(self.rules, (self.root_id,))
        return ConstraintState(self, frozenset(stacks), 0)

    def validate(self, text: str) -> bool:
        """True iff the grammar accepts exactly ``text`` (terminable match)."""
        state = self.initial_state().advance_text(text)
        return not state.rejected and state.terminable

    def enumerate_language(self, max_len: int, max_count: int = 200_000) -> set[str]:
        """All accepted strings of length <= max_len, by state-space walk.

        Only usable on grammars without negated character classes (those
        have effectively unbounded branching).
        """
        out: set[str] = set()
        work: list[tuple[str, ConstraintState]] = [("", self.initial_state())]
        while work:
            prefix, state = work.pop()
            if state.terminable:
                out.add(prefix)
                if len(out) > max_count:
                    raise GrammarError(
                        f"language enumeration exceeded {max_count} strings")
            if len(prefix) >= max_len:
                continue
            for cp in sorted(state.viable_scalars()):
                work.append((prefix + chr(cp), state.advance_scalar(cp)))
        return out

    def __repr__(self) -> str:
        return f"CompiledGrammar({len(self.rules)} rules, root={self.rule_names[self.root_id]!r})"


def _flatten(elem: Element, name_ids: dict[str, int], aux: "_AuxAllocator") -> tuple[Sym, ...]:
    if isinstance(elem, Lit):
        return tuple(Term(((ord(c), ord(c)),)) for c in elem.text)
    if isinstance(elem, Cls):
        return (Term(elem.ranges, elem.negated),)
    if isinstance(elem, Ref):
        return (name_ids[elem.name],)
    if isinstance(elem, Group):
        alts = tuple(
            sum((_flatten(e, name_ids, aux) for e in seq), ())
            for seq in elem.alternatives)
        return (aux.define(alts),)
    if isinstance(elem, Rep):
        body = _flatten(elem.item, name_ids, aux)
        if elem.kind == "?":
            return (aux.define((body, ())),)
        star = aux.allocate()
        aux.fill(star, (body + (star,), ()))
        if elem.kind == "*":
            return (star,)
        return body + (star,)  # "+" is one occurrence then star
    raise TypeError(f"unexpected AST element {elem!r}")


class _AuxAllocator:
    def __init__(self, base: list):
        self.rules = base

    def allocate(self) -> int:
        self.rules.append(None)
        return len(self.rules) - 1

    def fill(self, rid: int, alts: tuple[tuple[Sym, ...], ...]) -> None:
        self.rules[rid] = alts

    def define(self, alts: tuple[tuple[Sym, ...], ...]) -> int:
        rid = self.allocate()
        self.fill(rid, alts)
        return rid


def compile_grammar(ast: GrammarAst) -> CompiledGrammar:
    """Desugar, number, and validate an AST into a recognizer-ready table.

    Rejects grammars with direct or indirect left recursion (including
    recursion through nullable prefixes) and ASTs without a root rule.
    """
    names = list(ast.rules)
    if "root" not in ast.rules:
        raise GrammarError("grammar has no 'root' rule")
    name_ids = {nm: i for i, nm in enumerate(names)}
    for name, alts in ast.rules.items():
        for seq in alts:
            for elem in seq:
                for ref in _referenced_rules(elem):
                    if ref not in name_ids:
                        raise GrammarError(
                            f"rule '{name}' references undefined rule '{ref}'")

    table: list = [None] * len(names)
    aux = _AuxAllocator(table)
    aux_count = 0
    for name, alts in ast.rules.items():
        compiled = tuple(
            sum((_flatten(e, name_ids, aux) for e in seq), ())
            for seq in alts)
        table[name_ids[name]] = compiled
    rule_names = list(names)
    while len(rule_names) < len(table):
        aux_count += 1
        rule_names.append(f"${aux_count}")

    rules = tuple(table)
    _reject_left_recursion(rules, rule_names)
    return CompiledGrammar(tuple(rule_names), rules, name_ids["root"])


def _nullable_rules(rules: tuple[tuple[tuple[Sym, ...], ...], ...]) -> list[bool]:
    nullable = [False] * len(rules)
    changed = True
    while changed:
        changed = False
        for rid, alts in enumerate(rules):
            if nullable[rid]:
                continue
            for alt in alts:
                if all(isinstance(s, int) and nullable[s] for s in alt):
                    nullable[rid] = True
                    changed = True
                    break
    return nullable


def _reject_left_recursion(rules, rule_names) -> None:
    nullable = _nullable_rules(rules)
    edges: list[set[int]] = [set() for _ in rules]
    for rid, alts in enumerate(rules):
        for alt in alts:
            for sym in alt:
                if not isinstance(sym, int):
                    break  # terminal consumes input; prefix ends
                edges[rid].add(sym)
                if not nullable[sym]:
                    break

    WHITE, GRAY, BLACK = 0, 1, 2
    color = [WHITE] * len(rules)

    def visit(rid: int) -> None:
        color[rid] = GRAY
        for nxt in edges[rid]:
            if color[nxt] == GRAY:
                raise LeftRecursionError(
                    f"grammar is left-recursive through rule '{rule_names[nxt]}'")
            if color[nxt] == WHITE:
                visit(nxt)
        color[rid] = BLACK

    for rid in range(len(rules)):
        if color[rid] == WHITE:
            visit(rid)


# ---------------------------------------------------------------------------
# Recognition


def _expand(rules, cont: tuple) -> set[tuple]:
    """Rewrite a continuation until its head is a terminal (or it is empty)."""
    out: set[tuple] = set()
    seen: set[tuple] = set()
    work = [cont]
    while work:
        c = work.pop()
        if c in seen:
            continue
        seen.add(c)
        if len(c) > MAX_STACK_DEPTH:
            raise StackDepthError(
                f"derivation stack exceeded {MAX_STACK_DEPTH} frames")
        if not c or not isinstance(c[0], int):
            out.add(c)
            continue
        rest = c[1:]
        for alt in rules[c[0]]:
            work.append(alt + rest)
    return out


def _advance_stacks(rules, stacks: Iterable[tuple], cp: int) -> frozenset:
    nxt: set[tuple] = set()
    for cont in stacks:
        if cont and cont[0].matches(cp):
            nxt |= _expand(rules, cont[1:])
    return frozenset(nxt)


@dataclass(frozen=True)
class ConstraintState:
    """Recognizer position after consuming a prefix. Immutable value.

    ``stacks`` holds flattened derivation continuations whose heads are
    always terminals; an empty continuation means the prefix is a complete
    sentence. An empty *set* of continuations is the rejected state, which
    absorbs any further input.
    """

    grammar: CompiledGrammar = field(compare=False)
    stacks: frozenset
    consumed: int

    @property
    def rejected(self) -> bool:
        return not self.stacks

    @property
    def terminable(self) -> bool:
        return () in self.stacks

    def advance_scalar(self, cp: int) -> "ConstraintState":
        stacks = _advance_stacks(self.grammar.rules, self.stacks, cp)
        return ConstraintState(self.grammar, stacks, self.consumed + 1)

    def advance_text(self, text: str) -> "ConstraintState":
        state = self
        for ch in text:
            if state.rejected:
                break
            state = state.advance_scalar(ord(ch))
        if state.rejected and state.consumed < self.consumed + len(text):
            # Rejection absorbs the rest of the input.
            state = ConstraintState(self.grammar, frozenset(),
                                    self.consumed + len(text))
        return state

    def viable_scalars(self) -> set[int]:
        """Concrete scalars that keep at least one derivation alive.

        Raises on negated classes, whose viable set is unbounded.
        """
        out: set[int] = set()
        for cont in self.stacks:
            if not cont:
                continue
            head: Term = cont[0]
            if head.negated:
                raise GrammarError(
                    "cannot enumerate scalars of a negated character class")
            for lo, hi in head.ranges:
                out.update(range(lo, hi + 1))
        return out

    def allowed_tokens(self, vocab) -> "TokenMask":
        """Mask of vocabulary tokens whose decoded scalars keep the state alive.

        Walks the vocabulary prefix tree so common prefixes are advanced
        once; bit-identical to advancing each token independently.
        """
        if self.rejected:
            raise ValueError("allowed_tokens queried on a rejected state")
        tree = vocab.prefix_tree()
        rules = self.grammar.rules
        bits = 0
        work = [(tree.root, self.stacks)]
        while work:
            node, stacks = work.pop()
            for tid in node.token_ids:
                bits |= 1 << tid
            for ch, child in node.children.items():
                advanced = _advance_stacks(rules, stacks, ord(ch))
                if advanced:
                    work.append((child, advanced))
        return TokenMask(bits=bits, size=vocab.size, allow_eos=self.terminable)


@dataclass(frozen=True)
class TokenMask:
    """Per-token-id allow bitset plus an end-of-sequence flag."""

    bits: int
    size: int
    allow_eos: bool

    def is_allowed(self, token_id: int) -> bool:
        if not 0 <= token_id < self.size:
            raise IndexError(f"token id {token_id} out of range [0, {self.size})")
        return bool((self.bits >> token_id) & 1)

    def allowed_ids(self) -> list[int]:
        return [i for i in range(self.size) if (self.bits >> i) & 1]

    @property
    def count(self) -> int:
        return self.bits.bit_count()
