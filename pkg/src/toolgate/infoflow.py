"""Result labeling, flow enforcement at the proxy boundary, and taint.

Labels attach to subtrees of a tool result matched by ``result.--``-rooted
path patterns (``[*]`` matches any list index). Enforcement is exact-match:
redaction replaces whole labeled subtrees with ``[REDACTED:<label>]``, and
the taint set remembers every labeled primitive leaf so the same scalar
re-entering through tool-call arguments can be blocked. Transformed or
substring leaks are out of scope by design; the model is a black box and
the proxy boundary is the only vantage point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .policy import FlowRule, InfoFlowRule, LabelRule
from .predicate import DataAccess, EvalError, eval_with_roots
from .values import (
    Path,
    Value,
    canonical_scalar,
    deep_copy,
    format_path,
    is_scalar,
    iter_scalars,
    value_kind,
)

REDACTED_FMT = "[REDACTED:{label}]"


@dataclass(frozen=True)
class RedactionRecord:
    path: str
    label: str


@dataclass(frozen=True)
class FlowBlock:
    """Whole-result block verdict from a block-action flow rule."""

    label: str
    requirement_id: str


class TaintSet:
    """Session-scoped (scalar, label) memory; grows monotonically.

    Scalars are stored by (kind, canonical representation) so string "120"
    and number 120 never collide.
    """

    def __init__(self) -> None:
        self._entries: set[tuple[str, str, str]] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, scalar: Value, label: str) -> None:
        if not is_scalar(scalar):
            raise ValueError("taint entries must be scalars")
        self._entries.add((value_kind(scalar), canonical_scalar(scalar), label))

    def labels_of(self, scalar: Value) -> set[str]:
        if not is_scalar(scalar):
            return set()
        kind, rep = value_kind(scalar), canonical_scalar(scalar)
        return {label for k, r, label in self._entries if k == kind and r == rep}

    def entries(self) -> set[tuple[str, str, str]]:
        return set(self._entries)

    def scalars(self) -> set[tuple[str, str]]:
        return {(k, r) for k, r, _ in self._entries}


@dataclass
class FlowPolicy:
    """All info_flow rules of a policy, indexed for the engine."""

    label_rules: list[tuple[str, LabelRule]] = field(default_factory=list)  # (req id, rule)
    flow_rules: dict[tuple[str, str], tuple[str, str]] = field(default_factory=dict)
    # (label, sink) -> (action, requirement id)

    @staticmethod
    def build(rules: Iterable[tuple[str, InfoFlowRule]]) -> "FlowPolicy":
        fp = FlowPolicy()
        for req_id, rule in rules:
            for lr in rule.label_rules:
                fp.label_rules.append((req_id, lr))
            for fr in rule.flow_rules:
                fp.flow_rules[(fr.label, fr.sink)] = (fr.action, req_id)
        return fp

    def rule_for(self, label: str, sink: str) -> tuple[str, str] | None:
        return self.flow_rules.get((label, sink))


Labels = dict[Path, frozenset[str]]


def _match_pattern(value: Value, pattern: Path, at: Path = ()) -> list[Path]:
    """All concrete paths in ``value`` matched by a pattern (sans root)."""
    if not pattern:
        return [at]
    head, rest = pattern[0], pattern[1:]
    out: list[Path] = []
    if head == "*":
        if isinstance(value, list):
            for i, item in enumerate(value):
                out.extend(_match_pattern(item, rest, at + (i,)))
    elif isinstance(head, int):
        if isinstance(value, list) and head < len(value):
            out.extend(_match_pattern(value[head], rest, at + (head,)))
    else:
        if isinstance(value, dict) and head in value:
            out.extend(_match_pattern(value[head], rest, at + (head,)))
    return out


def apply_label_rules(
    tool: str,
    result: Value,
    flow_policy: FlowPolicy,
    session_facts: dict[str, Value],
    db: DataAccess,
) -> tuple[Labels, list[str]]:
    """Label every subtree a rule matches and whose condition holds.

    A condition that fails to evaluate labels anyway (fail closed) and the
    problem is reported in the returned diagnostics.
    """
    labels: dict[Path, set[str]] = {}
    diagnostics: list[str] = []
    for req_id, lr in flow_policy.label_rules:
        if lr.tool != tool:
            continue
        for path in _match_pattern(result, lr.pattern[1:]):
            subtree = _at(result, path)
            if lr.condition is not None:
                try:
                    if not eval_with_roots(
                        lr.condition, {"value": subtree, "session": session_facts}, db
                    ):
                        continue
                except EvalError as e:
                    diagnostics.append(
                        f"{req_id}: label condition failed ({e}); labeling {lr.label!r} anyway"
                    )
            labels.setdefault(path, set()).add(lr.label)
    return {p: frozenset(ls) for p, ls in labels.items()}, diagnostics


def _at(value: Value, path: Path) -> Value:
    node = value
    for seg in path:
        node = node[seg]
    return node


def collect_taint(result: Value, labels: Labels, taint: TaintSet) -> None:
    """Record every primitive leaf under a labeled subtree."""
    for path, label_set in labels.items():
        subtree = _at(result, path)
        for _, scalar in iter_scalars(subtree):
            if scalar is None:
                continue
            for label in label_set:
                taint.add(scalar, label)


def enforce_flow(
    result: Value,
    labels: Labels,
    flow_policy: FlowPolicy,
    taint: TaintSet,
) -> tuple[Value, list[RedactionRecord]] | FlowBlock:
    """Apply agent_context flow rules to a labeled result.

    Taint is collected before redaction. Block beats redact; outermost
    labeled subtrees win; records are sorted by path then label so the
    output is independent of rule order.
    """
    collect_taint(result, labels, taint)

    for path in sorted(labels, key=_path_key):
        for label in sorted(labels[path]):
            rule = flow_policy.rule_for(label, "agent_context")
            if rule is not None and rule[0] == "block":
                return FlowBlock(label=label, requirement_id=rule[1])

    to_redact: dict[Path, str] = {}
    for path in sorted(labels, key=_path_key):
        redact_labels = sorted(
            label
            for label in labels[path]
            if (rule := flow_policy.rule_for(label, "agent_context")) is not None
            and rule[0] == "redact"
        )
        if redact_labels:
            to_redact[path] = redact_labels[0]

    if not to_redact:
        return deep_copy(result), []

    outermost = [
        p for p in sorted(to_redact, key=_path_key)
        if not any(p[: len(q)] == q for q in to_redact if q != p and len(q) < len(p))
    ]
    # one record per (outermost path, redact label on it)
    records = [
        RedactionRecord(path=format_path(("result",) + p), label=label)
        for p in outermost
        for label in sorted(labels[p])
        if (rule := flow_policy.rule_for(label, "agent_context")) is not None
        and rule[0] == "redact"
    ]
    redacted = deep_copy(result)
    for p in outermost:
        _replace(redacted, p, REDACTED_FMT.format(label=to_redact[p]))
    return redacted, records


def _path_key(path: Path):
    return tuple((0, s) if isinstance(s, int) else (1, s) for s in path)


def _replace(value: Value, path: Path, replacement: Value) -> None:
    node = value
    for seg in path[:-1]:
        node = node[seg]
    node[path[-1]] = replacement


@dataclass(frozen=True)
class TaintHit:
    arg_path: str
    label: str
    requirement_id: str


def taint_check_args(
    args: dict[str, Value],
    taint: TaintSet,
    flow_policy: FlowPolicy,
) -> Optional[TaintHit]:
    """First blocked tainted scalar re-entering via call arguments, if any."""
    for path, scalar in iter_scalars(args):
        for label in sorted(taint.labels_of(scalar)):
            rule = flow_policy.rule_for(label, "tool_args")
            if rule is not None and rule[0] == "block":
                return TaintHit(
                    arg_path=format_path(path), label=label, requirement_id=rule[1]
                )
    return None
