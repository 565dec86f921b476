"""Total boolean expression language for argument-validation rules.

Expressions read call arguments, session facts, and read-only collections:

    args.user_id == lookup('reservations', args.ticket_id).user_id

Precedence, loosest to tightest: or, and, not, comparisons/in, postfix
field access. ``and``/``or`` chains are left associative; a comparison may
not be chained. Evaluation is three-valued (true / false / error) with
Kleene combination, and every error fails closed at the engine.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Protocol, Union

from .values import Value, value_kind

DEFAULT_ROOTS = ("args", "session")
MAX_DEPTH = 64

FUNCTIONS = ("lookup", "len", "contains")
COMPARE_OPS = ("==", "!=", "<=", ">=", "<", ">")


class PredicateSyntaxError(Exception):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} (column {column})")
        self.column = column


class EvalError(Exception):
    """An evaluation that cannot produce a boolean; the engine denies on it."""


class DataAccess(Protocol):
    """Read-only, deterministic (collection, key) -> record capability."""

    def lookup(self, collection: str, key: Value) -> Optional[Value]: ...


class NullDataAccess:
    """A DataAccess with no collections; every lookup misses."""

    def lookup(self, collection: str, key: Value) -> Optional[Value]:
        return None


@dataclass(frozen=True)
class Lit:
    value: Value


@dataclass(frozen=True)
class PathRef:
    segments: tuple[str, ...]  # segments[0] is the root

    def __str__(self) -> str:
        return ".".join(self.segments)


@dataclass(frozen=True)
class FuncCall:
    name: str
    args: tuple["PredicateExpr", ...]


@dataclass(frozen=True)
class Member:
    base: "PredicateExpr"
    field: str


@dataclass(frozen=True)
class Compare:
    op: str
    left: "PredicateExpr"
    right: "PredicateExpr"


@dataclass(frozen=True)
class InExpr:
    item: "PredicateExpr"
    container: "PredicateExpr"


@dataclass(frozen=True)
class Not:
    operand: "PredicateExpr"


@dataclass(frozen=True)
class And:
    left: "PredicateExpr"
    right: "PredicateExpr"


@dataclass(frozen=True)
class Or:
    left: "PredicateExpr"
    right: "PredicateExpr"


PredicateExpr = Union[Lit, PathRef, FuncCall, Member, Compare, InExpr, Not, And, Or]


_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<num>-?\d+(?:\.\d+)?) |
        (?P<ident>[A-Za-z_][A-Za-z0-9_]*) |
        (?P<str>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*") |
        (?P<op>==|!=|<=|>=|<|>|\(|\)|,|\.)
    )""",
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "'": "'", '"': '"', "\\": "\\"}


def _unquote(tok: str, col: int) -> str:
    body = tok[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\":
            i += 1
            if i >= len(body) or body[i] not in _ESCAPES:
                raise PredicateSyntaxError("bad escape in string literal", col)
            out.append(_ESCAPES[body[i]])
        else:
            out.append(c)
        i += 1
    return "".join(out)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            col = len(text) - len(stripped)
            raise PredicateSyntaxError(f"unexpected character {stripped[0]!r}", col)
        col = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), col))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]], roots: tuple[str, ...], max_depth: int):
        self.tokens = tokens
        self.i = 0
        self.roots = roots
        self.max_depth = max_depth
        self.depth = 0

    @property
    def cur(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, col = self.cur
        if val != value:
            raise PredicateSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", col)
        self.advance()

    def _enter(self, col: int) -> None:
        self.depth += 1
        if self.depth > self.max_depth:
            raise PredicateSyntaxError(f"expression nests deeper than {self.max_depth}", col)

    def parse(self) -> PredicateExpr:
        expr = self.or_expr()
        kind, val, col = self.cur
        if kind != "end":
            raise PredicateSyntaxError(f"trailing input starting at {val!r}", col)
        return expr

    def or_expr(self) -> PredicateExpr:
        self._enter(self.cur[2])
        left = self.and_expr()
        while self.cur[:2] == ("ident", "or"):
            self.advance()
            left = Or(left, self.and_expr())
        self.depth -= 1
        return left

    def and_expr(self) -> PredicateExpr:
        left = self.not_expr()
        while self.cur[:2] == ("ident", "and"):
            self.advance()
            left = And(left, self.not_expr())
        return left

    def not_expr(self) -> PredicateExpr:
        if self.cur[:2] == ("ident", "not"):
            _, _, col = self.advance()
            self._enter(col)
            inner = Not(self.not_expr())
            self.depth -= 1
            return inner
        return self.comparison()

    def comparison(self) -> PredicateExpr:
        left = self.operand()
        kind, val, col = self.cur
        if kind == "op" and val in COMPARE_OPS:
            self.advance()
            return Compare(val, left, self.operand())
        if (kind, val) == ("ident", "in"):
            self.advance()
            return InExpr(left, self.operand())
        return left

    def operand(self) -> PredicateExpr:
        node = self.primary()
        while self.cur[:2] == ("op", "."):
            self.advance()
            kind, val, col = self.cur
            if kind != "ident":
                raise PredicateSyntaxError("expected a field name after '.'", col)
            self.advance()
            if isinstance(node, PathRef):
                node = PathRef(node.segments + (val,))
            else:
                node = Member(node, val)
        return node

    def primary(self) -> PredicateExpr:
        kind, val, col = self.advance()
        if kind == "num":
            return Lit(float(val) if "." in val else int(val))
        if kind == "str":
            return Lit(_unquote(val, col))
        if (kind, val) == ("op", "("):
            self._enter(col)
            inner = self.or_expr()
            self.expect(")")
            self.depth -= 1
            return inner
        if kind == "ident":
            if val == "true":
                return Lit(True)
            if val == "false":
                return Lit(False)
            if val == "null":
                return Lit(None)
            if val in ("and", "or", "not", "in"):
                raise PredicateSyntaxError(f"unexpected keyword {val!r}", col)
            if self.cur[:2] == ("op", "("):
                if val not in FUNCTIONS:
                    raise PredicateSyntaxError(f"unknown function {val!r}", col)
                self.advance()
                args: list[PredicateExpr] = []
                if self.cur[:2] != ("op", ")"):
                    self._enter(col)
                    args.append(self.or_expr())
                    while self.cur[:2] == ("op", ","):
                        self.advance()
                        args.append(self.or_expr())
                    self.depth -= 1
                self.expect(")")
                return FuncCall(val, tuple(args))
            if val not in self.roots:
                raise PredicateSyntaxError(
                    f"unknown path root {val!r} (expected one of {', '.join(self.roots)})", col
                )
            return PathRef((val,))
        raise PredicateSyntaxError(f"unexpected {val or 'end of input'!r}", col)


def parse_expr(
    text: str,
    roots: tuple[str, ...] = DEFAULT_ROOTS,
    max_depth: int = MAX_DEPTH,
) -> PredicateExpr:
    return _Parser(_tokenize(text), roots, max_depth).parse()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_ARITY = {"lookup": 2, "len": 1, "contains": 2}


def _as_bool(v: Value, context: str) -> bool:
    if isinstance(v, bool):
        return v
    raise EvalError(f"{context} needs a boolean, got {value_kind(v)}")


def _kleene_and(left: "_Trial", right: "_Trial") -> bool:
    if left.is_false() or right.is_false():
        return False
    left.unwrap("and operand")
    right.unwrap("and operand")
    return True


def _kleene_or(left: "_Trial", right: "_Trial") -> bool:
    if left.is_true() or right.is_true():
        return True
    left.unwrap("or operand")
    right.unwrap("or operand")
    return False


class _Trial:
    """Outcome of evaluating a subexpression: a value or a captured error."""

    def __init__(self, value: Value = None, error: EvalError | None = None):
        self.value = value
        self.error = error

    def is_true(self) -> bool:
        return self.error is None and self.value is True

    def is_false(self) -> bool:
        return self.error is None and self.value is False

    def unwrap(self, context: str) -> Value:
        if self.error is not None:
            raise self.error
        if not isinstance(self.value, bool):
            raise EvalError(f"{context} needs a boolean, got {value_kind(self.value)}")
        return self.value


def value_equal(a: Value, b: Value) -> bool:
    ka, kb = value_kind(a), value_kind(b)
    if ka != kb:
        return False
    if ka == "object":
        return a.keys() == b.keys() and all(value_equal(a[k], b[k]) for k in a)
    if ka == "array":
        return len(a) == len(b) and all(value_equal(x, y) for x, y in zip(a, b))
    return a == b


class Evaluator:
    def __init__(self, roots: dict[str, Value], db: DataAccess):
        self.roots = roots
        self.db = db

    def run(self, expr: PredicateExpr) -> bool:
        return _as_bool(self.eval(expr), "predicate")

    def _try(self, expr: PredicateExpr) -> _Trial:
        try:
            return _Trial(value=self.eval(expr))
        except EvalError as e:
            return _Trial(error=e)

    def eval(self, expr: PredicateExpr) -> Value:
        if isinstance(expr, Lit):
            return expr.value
        if isinstance(expr, PathRef):
            return self._walk(self.roots_value(expr.segments[0]), expr.segments, 1)
        if isinstance(expr, Member):
            base = self.eval(expr.base)
            return self._field(base, expr.field, str_of(expr))
        if isinstance(expr, FuncCall):
            return self._call(expr)
        if isinstance(expr, Not):
            return not _as_bool(self.eval(expr.operand), "not operand")
        if isinstance(expr, And):
            return _kleene_and(self._try(expr.left), self._try(expr.right))
        if isinstance(expr, Or):
            return _kleene_or(self._try(expr.left), self._try(expr.right))
        if isinstance(expr, Compare):
            return self._compare(expr)
        if isinstance(expr, InExpr):
            return self._contains(self.eval(expr.container), self.eval(expr.item))
        raise EvalError(f"unknown expression node {expr!r}")

    def roots_value(self, root: str) -> Value:
        if root not in self.roots:
            raise EvalError(f"unknown root {root!r}")
        return self.roots[root]

    def _walk(self, node: Value, segments: tuple[str, ...], start: int) -> Value:
        for i in range(start, len(segments)):
            node = self._field(node, segments[i], ".".join(segments[: i + 1]))
        return node

    def _field(self, node: Value, name: str, path: str) -> Value:
        if not isinstance(node, dict):
            raise EvalError(f"missing path {path} (not a record)")
        if name not in node:
            raise EvalError(f"missing path {path}")
        return node[name]

    def _call(self, expr: FuncCall) -> Value:
        if len(expr.args) != _ARITY[expr.name]:
            raise EvalError(f"{expr.name} takes {_ARITY[expr.name]} arguments")
        if expr.name == "lookup":
            collection = self.eval(expr.args[0])
            key = self.eval(expr.args[1])
            if not isinstance(collection, str):
                raise EvalError("lookup collection must be a string")
            if value_kind(key) not in ("string", "number", "boolean"):
                raise EvalError("lookup key must be a scalar")
            found = self.db.lookup(collection, key)
            if found is None:
                raise EvalError(f"lookup miss: no {key!r} in collection {collection!r}")
            return found
        if expr.name == "len":
            v = self.eval(expr.args[0])
            kind = value_kind(v)
            if kind in ("string", "array", "object"):
                return len(v)
            raise EvalError(f"len needs a string, array, or object, got {kind}")
        if expr.name == "contains":
            return self._contains(self.eval(expr.args[0]), self.eval(expr.args[1]))
        raise EvalError(f"unknown function {expr.name!r}")

    def _contains(self, container: Value, item: Value) -> bool:
        kind = value_kind(container)
        if kind == "string":
            if not isinstance(item, str):
                raise EvalError("substring check needs a string item")
            return item in container
        if kind == "array":
            return any(value_equal(x, item) for x in container)
        raise EvalError(f"containment needs a string or array container, got {kind}")

    def _compare(self, expr: Compare) -> bool:
        left = self.eval(expr.left)
        right = self.eval(expr.right)
        lk, rk = value_kind(left), value_kind(right)
        if lk != rk:
            raise EvalError(f"type-mismatched comparison: {lk} {expr.op} {rk}")
        if lk in ("object", "array"):
            raise EvalError(f"cannot compare {lk} values with {expr.op}")
        if expr.op == "==":
            return left == right
        if expr.op == "!=":
            return left != right
        if lk not in ("number", "string"):
            raise EvalError(f"ordering needs numbers or strings, got {lk}")
        if expr.op == "<":
            return left < right
        if expr.op == "<=":
            return left <= right
        if expr.op == ">":
            return left > right
        if expr.op == ">=":
            return left >= right
        raise EvalError(f"unknown comparison {expr.op!r}")


def str_of(expr: PredicateExpr) -> str:
    if isinstance(expr, PathRef):
        return str(expr)
    if isinstance(expr, Member):
        return f"{str_of(expr.base)}.{expr.field}"
    if isinstance(expr, FuncCall):
        return f"{expr.name}(...)"
    return "<expr>"


def eval_expr(
    expr: PredicateExpr,
    args: dict[str, Value],
    session_facts: dict[str, Value],
    db: DataAccess,
) -> bool:
    """Evaluate with the standard roots; raises EvalError rather than
    ever silently returning false on missing data."""
    return Evaluator({"args": args, "session": session_facts}, db).run(expr)


def eval_with_roots(expr: PredicateExpr, roots: dict[str, Value], db: DataAccess) -> bool:
    return Evaluator(roots, db).run(expr)
