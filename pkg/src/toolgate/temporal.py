"""Past-time temporal rules over a session's call/result event trace.

A formula is evaluated at the latest trace position. The incremental
monitor keeps one boolean per subformula, so admitting a call is O(|formula|)
and needs no rescan; ``eval_at`` is the direct recursive reference semantics
used as the oracle in tests.

Recurrences (g = value at previous position, v = value now):
    prev f         -> g(f)            (false at the origin)
    once f         -> v(f) or g(once f)
    historically f -> v(f) and g(historically f)
    f since s      -> v(s) or (v(f) and g(f since s))
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

EVENT_KINDS = ("call", "ok", "tool_error")
ATOM_KINDS = ("call", "ok")
UNARY_OPS = ("not", "prev", "once", "historically")


@dataclass(frozen=True)
class Event:
    kind: str  # call | ok | tool_error
    tool: str
    position: int = 0


@dataclass(frozen=True)
class Atom:
    kind: str  # call | ok
    tool: str  # identifier or "*"

    def matches(self, e: Event) -> bool:
        return e.kind == self.kind and (self.tool == "*" or e.tool == self.tool)


@dataclass(frozen=True)
class TNot:
    operand: "TemporalFormula"


@dataclass(frozen=True)
class TAnd:
    left: "TemporalFormula"
    right: "TemporalFormula"


@dataclass(frozen=True)
class TOr:
    left: "TemporalFormula"
    right: "TemporalFormula"


@dataclass(frozen=True)
class TImplies:
    left: "TemporalFormula"
    right: "TemporalFormula"


@dataclass(frozen=True)
class Prev:
    operand: "TemporalFormula"


@dataclass(frozen=True)
class Once:
    operand: "TemporalFormula"


@dataclass(frozen=True)
class Historically:
    operand: "TemporalFormula"


@dataclass(frozen=True)
class Since:
    left: "TemporalFormula"
    right: "TemporalFormula"


TemporalFormula = Union[Atom, TNot, TAnd, TOr, TImplies, Prev, Once, Historically, Since]


class TemporalSyntaxError(Exception):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} (column {column})")
        self.column = column


_TOKEN_RE = re.compile(r"\s*(?P<tok>[A-Za-z_][A-Za-z0-9_]*|\*|\(|\))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens: list[tuple[str, int]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            col = len(text) - len(stripped)
            raise TemporalSyntaxError(f"unexpected character {stripped[0]!r}", col)
        tokens.append((m.group("tok"), m.start("tok")))
        pos = m.end()
    tokens.append(("", len(text)))
    return tokens


class _Parser:
    """Precedence, loosest first: implies (right), since (right), or, and, unary."""

    def __init__(self, tokens: list[tuple[str, int]]):
        self.tokens = tokens
        self.i = 0

    @property
    def cur(self) -> tuple[str, int]:
        return self.tokens[self.i]

    def advance(self) -> tuple[str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> TemporalFormula:
        f = self.implies_expr()
        tok, col = self.cur
        if tok:
            raise TemporalSyntaxError(f"trailing input starting at {tok!r}", col)
        return f

    def implies_expr(self) -> TemporalFormula:
        left = self.since_expr()
        if self.cur[0] == "implies":
            self.advance()
            return TImplies(left, self.implies_expr())
        return left

    def since_expr(self) -> TemporalFormula:
        left = self.or_expr()
        if self.cur[0] == "since":
            self.advance()
            return Since(left, self.since_expr())
        return left

    def or_expr(self) -> TemporalFormula:
        left = self.and_expr()
        while self.cur[0] == "or":
            self.advance()
            left = TOr(left, self.and_expr())
        return left

    def and_expr(self) -> TemporalFormula:
        left = self.unary()
        while self.cur[0] == "and":
            self.advance()
            left = TAnd(left, self.unary())
        return left

    def unary(self) -> TemporalFormula:
        tok, col = self.cur
        if tok in UNARY_OPS:
            self.advance()
            inner = self.unary()
            return {
                "not": TNot,
                "prev": Prev,
                "once": Once,
                "historically": Historically,
            }[tok](inner)
        if tok == "(":
            self.advance()
            inner = self.implies_expr()
            close, ccol = self.cur
            if close != ")":
                raise TemporalSyntaxError("expected ')'", ccol)
            self.advance()
            return inner
        if tok in ATOM_KINDS:
            self.advance()
            opn, ocol = self.cur
            if opn != "(":
                raise TemporalSyntaxError(f"expected '(' after {tok}", ocol)
            self.advance()
            name, ncol = self.cur
            if name != "*" and not re.match(r"^[a-z][a-z0-9_]*$", name):
                raise TemporalSyntaxError(f"expected a tool name or '*', found {name!r}", ncol)
            self.advance()
            close, ccol = self.cur
            if close != ")":
                raise TemporalSyntaxError("expected ')'", ccol)
            self.advance()
            return Atom(tok, name)
        raise TemporalSyntaxError(f"unexpected {tok or 'end of input'!r}", col)


def parse_formula(text: str) -> TemporalFormula:
    return _Parser(_tokenize(text)).parse()


# ---------------------------------------------------------------------------
# Reference semantics (oracle)
# ---------------------------------------------------------------------------


def eval_at(f: TemporalFormula, trace: list[Event], i: int) -> bool:
    """Direct recursive semantics over the prefix ending at position i."""
    if not 0 <= i < len(trace):
        raise IndexError(f"position {i} outside trace of length {len(trace)}")
    if isinstance(f, Atom):
        return f.matches(trace[i])
    if isinstance(f, TNot):
        return not eval_at(f.operand, trace, i)
    if isinstance(f, TAnd):
        return eval_at(f.left, trace, i) and eval_at(f.right, trace, i)
    if isinstance(f, TOr):
        return eval_at(f.left, trace, i) or eval_at(f.right, trace, i)
    if isinstance(f, TImplies):
        return (not eval_at(f.left, trace, i)) or eval_at(f.right, trace, i)
    if isinstance(f, Prev):
        return i > 0 and eval_at(f.operand, trace, i - 1)
    if isinstance(f, Once):
        return any(eval_at(f.operand, trace, j) for j in range(i + 1))
    if isinstance(f, Historically):
        return all(eval_at(f.operand, trace, j) for j in range(i + 1))
    if isinstance(f, Since):
        for j in range(i, -1, -1):
            if eval_at(f.right, trace, j):
                if all(eval_at(f.left, trace, k) for k in range(j + 1, i + 1)):
                    return True
        return False
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Incremental monitor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonitorState:
    """One boolean per subformula at the last processed position.

    ``values`` is None before any event has been processed.
    """

    values: Optional[tuple[bool, ...]] = None


_compiled: dict[TemporalFormula, list[tuple[TemporalFormula, tuple[int, ...]]]] = {}


def _compile(f: TemporalFormula) -> list[tuple[TemporalFormula, tuple[int, ...]]]:
    """Post-order node list with child indices; shared subformulas collapse."""
    cached = _compiled.get(f)
    if cached is not None:
        return cached
    order: list[tuple[TemporalFormula, tuple[int, ...]]] = []
    index: dict[TemporalFormula, int] = {}

    def visit(node: TemporalFormula) -> int:
        if node in index:
            return index[node]
        if isinstance(node, Atom):
            children: tuple[int, ...] = ()
        elif isinstance(node, (TNot, Prev, Once, Historically)):
            children = (visit(node.operand),)
        else:
            children = (visit(node.left), visit(node.right))
        idx = len(order)
        order.append((node, children))
        index[node] = idx
        return idx

    visit(f)
    _compiled[f] = order
    return order


def step(state: MonitorState, f: TemporalFormula, e: Event) -> tuple[MonitorState, bool]:
    """Advance one event; returns the new state and the root's truth value."""
    order = _compile(f)
    prior = state.values
    new: list[bool] = []
    for idx, (node, children) in enumerate(order):
        if isinstance(node, Atom):
            v = node.matches(e)
        elif isinstance(node, TNot):
            v = not new[children[0]]
        elif isinstance(node, TAnd):
            v = new[children[0]] and new[children[1]]
        elif isinstance(node, TOr):
            v = new[children[0]] or new[children[1]]
        elif isinstance(node, TImplies):
            v = (not new[children[0]]) or new[children[1]]
        elif isinstance(node, Prev):
            v = prior is not None and prior[children[0]]
        elif isinstance(node, Once):
            v = new[children[0]] or (prior is not None and prior[idx])
        elif isinstance(node, Historically):
            v = new[children[0]] and (prior is None or prior[idx])
        elif isinstance(node, Since):
            v = new[children[1]] or (new[children[0]] and prior is not None and prior[idx])
        else:
            raise TypeError(f"not a formula: {node!r}")
        new.append(v)
    return MonitorState(tuple(new)), new[-1]


def admit(
    rules: list[TemporalFormula],
    states: list[MonitorState],
    pending: Event,
) -> list[tuple[bool, MonitorState]]:
    """Speculatively extend each rule's trace with the pending event.

    Returns (holds, would-be state) per rule; committed states are untouched.
    The caller commits the returned state only if the call actually executes.
    """
    if len(rules) != len(states):
        raise ValueError("one state per rule required")
    return [
        (holds, new_state)
        for new_state, holds in (step(s, f, pending) for f, s in zip(rules, states))
    ]
