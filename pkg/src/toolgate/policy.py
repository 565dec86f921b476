"""Declarative guardrail policies.

A policy is a list of requirements. Every requirement carries the original
prose sentence plus specificity/enforceability annotations; a symbolically
enforceable requirement may additionally carry exactly one executable rule
of one of six kinds:

    api_validation      predicate over call args, session facts, lookups
    schema_constraint   agent output must be a valid call or user message
    temporal            past-time formula gating call admission
    info_flow           label rules + flow rules (redact / block)
    confirmation        rule-driven user confirmation before a tool runs
    response_template   fixed response text rendered from the tool result

The concrete file format is the line-oriented document of ``linedoc``;
``canonical_serialize`` fixes key order and whitespace so serialize∘parse
is idempotent and fixtures can be golden-tested.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from . import linedoc
from .linedoc import Cursor, DocError, Line, Writer
from .predicate import PredicateExpr, PredicateSyntaxError, parse_expr
from .protocol import EXTRA_PARAM_SOFT_LIMIT, ToolCatalog, split_extra_param, CatalogError
from .temporal import TemporalFormula, TemporalSyntaxError, parse_formula
from .values import Path, parse_dotted_path, ValueError_

SPECIFICITIES = ("no_policy", "goal_setting", "concrete_rule", "task_specific")
ENFORCEABILITIES = ("out_of_scope", "symbolic", "not_symbolic")
RULE_KINDS = (
    "api_validation",
    "schema_constraint",
    "temporal",
    "info_flow",
    "confirmation",
    "response_template",
)
SINKS = ("agent_context", "tool_args")
ACTIONS = ("redact", "block")

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # error | warning
    message: str
    line: int | None = None
    column: int | None = None
    requirement_id: str | None = None

    def __str__(self) -> str:
        where = f" (line {self.line})" if self.line is not None else ""
        who = f" [{self.requirement_id}]" if self.requirement_id else ""
        return f"{self.severity}{who}: {self.message}{where}"


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Template:
    """Literal text with ``{dotted.path}`` placeholders.

    The first path segment names the root record the template renders
    against: ``result`` for response templates, ``args`` for confirmation
    summaries.
    """

    text: str
    parts: tuple[Union[str, Path], ...] = ()

    @staticmethod
    def parse(text: str) -> "Template":
        parts: list[Union[str, Path]] = []
        i, n = 0, len(text)
        literal: list[str] = []
        while i < n:
            c = text[i]
            if c == "{":
                end = text.find("}", i)
                if end < 0:
                    raise ValueError_(f"unbalanced '{{' at column {i}")
                if literal:
                    parts.append("".join(literal))
                    literal = []
                body = text[i + 1 : end].strip()
                parts.append(parse_dotted_path(body))
                i = end + 1
            elif c == "}":
                raise ValueError_(f"unbalanced '}}' at column {i}")
            else:
                literal.append(c)
                i += 1
        if literal:
            parts.append("".join(literal))
        return Template(text=text, parts=tuple(parts))

    def placeholder_paths(self) -> list[Path]:
        return [p for p in self.parts if not isinstance(p, str)]


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApiValidationRule:
    tool: str
    predicate_text: str
    predicate: PredicateExpr
    extra_params: tuple[str, ...] = ()
    kind: str = field(default="api_validation", init=False)


@dataclass(frozen=True)
class SchemaConstraintRule:
    kind: str = field(default="schema_constraint", init=False)


@dataclass(frozen=True)
class TemporalRule:
    formula_text: str
    formula: TemporalFormula
    kind: str = field(default="temporal", init=False)


@dataclass(frozen=True)
class LabelRule:
    tool: str
    path_pattern: str
    pattern: Path
    label: str
    condition_text: str | None = None
    condition: PredicateExpr | None = None


@dataclass(frozen=True)
class FlowRule:
    label: str
    sink: str  # agent_context | tool_args
    action: str  # redact | block


@dataclass(frozen=True)
class InfoFlowRule:
    label_rules: tuple[LabelRule, ...]
    flow_rules: tuple[FlowRule, ...]
    kind: str = field(default="info_flow", init=False)


@dataclass(frozen=True)
class ConfirmationRule:
    tool: str
    summary_template: Template | None = None
    kind: str = field(default="confirmation", init=False)


@dataclass(frozen=True)
class ResponseTemplateRule:
    tool: str
    template: Template
    kind: str = field(default="response_template", init=False)


Rule = Union[
    ApiValidationRule,
    SchemaConstraintRule,
    TemporalRule,
    InfoFlowRule,
    ConfirmationRule,
    ResponseTemplateRule,
]


@dataclass(frozen=True)
class FactRule:
    """Capture a session fact from a successful tool result."""

    name: str
    tool: str
    path: str  # dotted path with "result" root


@dataclass(frozen=True)
class Requirement:
    id: str
    text: str
    specificity: str
    enforceability: str
    applicable: tuple[str, ...] = ()
    rule: Rule | None = None


@dataclass(frozen=True)
class PolicyDocument:
    version: int = 1
    domain: str = ""
    facts: tuple[FactRule, ...] = ()
    requirements: tuple[Requirement, ...] = ()

    def requirement(self, req_id: str) -> Requirement | None:
        for r in self.requirements:
            if r.id == req_id:
                return r
        return None

    def rules_of_kind(self, kind: str) -> list[Requirement]:
        return [r for r in self.requirements if r.rule is not None and r.rule.kind == kind]


@dataclass
class PolicyParse:
    document: PolicyDocument | None
    diagnostics: list[Diagnostic]

    @property
    def ok(self) -> bool:
        return self.document is not None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Collector:
    def __init__(self) -> None:
        self.diagnostics: list[Diagnostic] = []

    def error(self, message: str, line: Line | int | None = None, req: str | None = None) -> None:
        self.diagnostics.append(Diagnostic("error", message, _line_no(line), requirement_id=req))

    def warning(self, message: str, line: Line | int | None = None, req: str | None = None) -> None:
        self.diagnostics.append(Diagnostic("warning", message, _line_no(line), requirement_id=req))

    @property
    def failed(self) -> bool:
        return any(d.severity == "error" for d in self.diagnostics)


def _line_no(line: Line | int | None) -> int | None:
    if isinstance(line, Line):
        return line.line_no
    return line


def _attrs(
    lines: list[Line],
    indent: int,
    out: _Collector,
    req: str | None,
    allowed: tuple[str, ...] | None = None,
) -> dict[str, Line]:
    """Flatten one block level to a keyword->Line map; order is free."""
    found: dict[str, Line] = {}
    for line in lines:
        if line.indent != indent:
            out.error(f"unexpected nesting at {line.keyword!r}", line, req)
            continue
        if allowed is not None and line.keyword not in allowed:
            out.error(f"unknown attribute {line.keyword!r}", line, req)
            continue
        if line.keyword in found:
            out.error(f"duplicate attribute {line.keyword!r}", line, req)
        found[line.keyword] = line
    return found


def _want_str(attrs: dict[str, Line], key: str, out: _Collector, ctx: str, req: str | None,
              required: bool = True, at: Line | None = None) -> str | None:
    line = attrs.get(key)
    if line is None:
        if required:
            out.error(f"{ctx} is missing {key!r}", at, req)
        return None
    if not isinstance(line.value, str) or line.bare:
        out.error(f"{ctx} attribute {key!r} must be a JSON string", line, req)
        return None
    return line.value


def _want_word(attrs: dict[str, Line], key: str, allowed: tuple[str, ...], out: _Collector,
               ctx: str, req: str | None, at: Line | None = None) -> str | None:
    line = attrs.get(key)
    if line is None:
        out.error(f"{ctx} is missing {key!r}", at, req)
        return None
    if not line.bare or line.value not in allowed:
        out.error(f"{ctx} attribute {key!r} must be one of {', '.join(allowed)}", line, req)
        return None
    return line.value


def _parse_predicate(text: str, roots: tuple[str, ...], line: Line, out: _Collector,
                     req: str | None) -> PredicateExpr | None:
    try:
        return parse_expr(text, roots=roots)
    except PredicateSyntaxError as e:
        out.error(f"bad predicate: {e}", line, req)
        return None


def _parse_rule(kind_line: Line, body: list[Line], out: _Collector, req: str) -> Rule | None:
    kind = kind_line.value
    if not kind_line.bare or kind not in RULE_KINDS:
        out.error(f"unknown rule kind {kind_line.value!r}", kind_line, req)
        return None
    indent = kind_line.indent + 1
    if kind == "schema_constraint":
        if body:
            out.error("schema_constraint rules take no attributes", body[0], req)
            return None
        return SchemaConstraintRule()

    if kind == "api_validation":
        attrs = _attrs(body, indent, out, req, allowed=("tool", "predicate", "extra_params"))
        tool = _want_str(attrs, "tool", out, "api_validation rule", req, at=kind_line)
        pred_text = _want_str(attrs, "predicate", out, "api_validation rule", req, at=kind_line)
        extras_line = attrs.get("extra_params")
        extras: tuple[str, ...] = ()
        if extras_line is not None:
            v = extras_line.value
            if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
                out.error("extra_params must be a JSON array of strings", extras_line, req)
            else:
                extras = tuple(v)
                for entry in extras:
                    try:
                        split_extra_param(entry)
                    except CatalogError as e:
                        out.error(str(e), extras_line, req)
        if tool is None or pred_text is None:
            return None
        predicate = _parse_predicate(pred_text, ("args", "session"), attrs["predicate"], out, req)
        if predicate is None:
            return None
        return ApiValidationRule(tool=tool, predicate_text=pred_text, predicate=predicate,
                                 extra_params=extras)

    if kind == "temporal":
        attrs = _attrs(body, indent, out, req, allowed=("formula",))
        formula_text = _want_str(attrs, "formula", out, "temporal rule", req, at=kind_line)
        if formula_text is None:
            return None
        try:
            formula = parse_formula(formula_text)
        except TemporalSyntaxError as e:
            out.error(f"bad formula: {e}", attrs["formula"], req)
            return None
        return TemporalRule(formula_text=formula_text, formula=formula)

    if kind == "confirmation":
        attrs = _attrs(body, indent, out, req, allowed=("tool", "summary"))
        tool = _want_str(attrs, "tool", out, "confirmation rule", req, at=kind_line)
        summary = _want_str(attrs, "summary", out, "confirmation rule", req, required=False)
        template = None
        if summary is not None:
            template = _parse_template(summary, attrs["summary"], out, req)
            if template is None:
                return None
        if tool is None:
            return None
        return ConfirmationRule(tool=tool, summary_template=template)

    if kind == "response_template":
        attrs = _attrs(body, indent, out, req, allowed=("tool", "template"))
        tool = _want_str(attrs, "tool", out, "response_template rule", req, at=kind_line)
        text = _want_str(attrs, "template", out, "response_template rule", req, at=kind_line)
        if tool is None or text is None:
            return None
        template = _parse_template(text, attrs["template"], out, req)
        if template is None:
            return None
        return ResponseTemplateRule(tool=tool, template=template)

    # info_flow: a sequence of label_rule / flow_rule sub-blocks
    cursor = Cursor(body)
    label_rules: list[LabelRule] = []
    flow_rules: list[FlowRule] = []
    while (line := cursor.peek()) is not None:
        cursor.next()
        if line.indent != indent or line.keyword not in ("label_rule", "flow_rule"):
            out.error("info_flow rules contain label_rule and flow_rule blocks only", line, req)
            return None
        sub = cursor.block(indent)
        allowed = (
            ("tool", "path", "label", "condition")
            if line.keyword == "label_rule"
            else ("label", "sink", "action")
        )
        attrs = _attrs(sub, indent + 1, out, req, allowed=allowed)
        if line.keyword == "label_rule":
            tool = _want_str(attrs, "tool", out, "label_rule", req, at=line)
            pattern_text = _want_str(attrs, "path", out, "label_rule", req, at=line)
            label = _want_str(attrs, "label", out, "label_rule", req, at=line)
            condition_text = _want_str(attrs, "condition", out, "label_rule", req, required=False)
            if tool is None or pattern_text is None or label is None:
                return None
            try:
                pattern = parse_dotted_path(pattern_text)
            except ValueError_ as e:
                out.error(f"bad path pattern: {e}", attrs["path"], req)
                return None
            if pattern[0] != "result":
                out.error("label_rule paths must be rooted at 'result'", attrs["path"], req)
                return None
            condition = None
            if condition_text is not None:
                condition = _parse_predicate(
                    condition_text, ("value", "session"), attrs["condition"], out, req
                )
                if condition is None:
                    return None
            label_rules.append(
                LabelRule(tool=tool, path_pattern=pattern_text, pattern=pattern, label=label,
                          condition_text=condition_text, condition=condition)
            )
        else:
            label = _want_str(attrs, "label", out, "flow_rule", req, at=line)
            sink = _want_word(attrs, "sink", SINKS, out, "flow_rule", req, at=line)
            action = _want_word(attrs, "action", ACTIONS, out, "flow_rule", req, at=line)
            if label is None or sink is None or action is None:
                return None
            if sink == "tool_args" and action != "block":
                out.error("tool_args flow rules support only the block action", line, req)
                return None
            flow_rules.append(FlowRule(label=label, sink=sink, action=action))
    if not label_rules:
        out.error("info_flow rules need at least one label_rule", kind_line, req)
        return None
    seen_pairs: set[tuple[str, str]] = set()
    for fr in flow_rules:
        if (fr.label, fr.sink) in seen_pairs:
            out.error(f"duplicate flow rule for ({fr.label}, {fr.sink})", kind_line, req)
            return None
        seen_pairs.add((fr.label, fr.sink))
    return InfoFlowRule(label_rules=tuple(label_rules), flow_rules=tuple(flow_rules))


def _parse_template(text: str, line: Line, out: _Collector, req: str | None) -> Template | None:
    try:
        return Template.parse(text)
    except ValueError_ as e:
        out.error(f"bad template: {e}", line, req)
        return None


def parse_policy(text: str) -> PolicyParse:
    """Total parse: returns a document, or diagnostics locating every problem."""
    out = _Collector()
    try:
        lines = linedoc.parse_lines(text)
    except DocError as e:
        out.error(e.message, e.line_no)
        return PolicyParse(None, out.diagnostics)

    cursor = Cursor(lines)
    version: int | None = None
    domain = ""
    facts: list[FactRule] = []
    requirements: list[Requirement] = []
    seen_ids: set[str] = set()
    saw_policy = False

    while (line := cursor.peek()) is not None:
        cursor.next()
        if line.indent != 0:
            out.error(f"unexpected indented line {line.keyword!r}", line)
            cursor.block(0)
            continue
        body = cursor.block(0)

        if line.keyword == "policy":
            if saw_policy:
                out.error("duplicate policy block", line)
                continue
            saw_policy = True
            attrs = _attrs(body, 1, out, None, allowed=("version", "domain"))
            vline = attrs.get("version")
            if vline is None or not isinstance(vline.value, int) or isinstance(vline.value, bool):
                out.error("policy block needs an integer version", vline or line)
            else:
                version = vline.value
                if version != 1:
                    out.error(f"unsupported policy version {version} (only 1 is defined)", vline)
            domain = _want_str(attrs, "domain", out, "policy block", None, at=line) or ""

        elif line.keyword == "fact":
            if not isinstance(line.value, str) or line.bare:
                out.error("fact blocks need a JSON-string name", line)
                continue
            attrs = _attrs(body, 1, out, None, allowed=("tool", "path"))
            tool = _want_str(attrs, "tool", out, f"fact {line.value!r}", None, at=line)
            path = _want_str(attrs, "path", out, f"fact {line.value!r}", None, at=line)
            if tool is None or path is None:
                continue
            try:
                parsed = parse_dotted_path(path)
            except ValueError_ as e:
                out.error(f"bad fact path: {e}", attrs["path"])
                continue
            if parsed[0] != "result":
                out.error("fact paths must be rooted at 'result'", attrs["path"])
                continue
            facts.append(FactRule(name=line.value, tool=tool, path=path))

        elif line.keyword == "requirement":
            req_id = line.value
            if not isinstance(req_id, str) or line.bare or not _ID_RE.match(req_id or ""):
                out.error("requirement blocks need a nonempty JSON-string id", line)
                continue
            if req_id in seen_ids:
                out.error(f"duplicate requirement id {req_id!r}", line)
                continue
            seen_ids.add(req_id)
            req = _parse_requirement(req_id, line, body, out)
            if req is not None:
                requirements.append(req)

        else:
            out.error(f"unknown top-level block {line.keyword!r}", line)

    if not saw_policy:
        out.error("missing policy block", 1)
    if out.failed:
        return PolicyParse(None, out.diagnostics)
    doc = PolicyDocument(
        version=version or 1,
        domain=domain,
        facts=tuple(facts),
        requirements=tuple(requirements),
    )
    return PolicyParse(doc, out.diagnostics)


def _parse_requirement(req_id: str, opener: Line, body: list[Line], out: _Collector) -> Requirement | None:
    attrs: dict[str, Line] = {}
    rule_line: Line | None = None
    rule_body: list[Line] = []
    cursor = Cursor(body)
    while (line := cursor.peek()) is not None:
        cursor.next()
        if line.indent != 1:
            out.error(f"unexpected nesting under requirement {req_id!r}", line, req_id)
            return None
        if line.keyword == "rule":
            if rule_line is not None:
                out.error("a requirement may carry at most one rule", line, req_id)
                return None
            rule_line = line
            rule_body = cursor.block(1)
            continue
        if line.keyword in attrs:
            out.error(f"duplicate attribute {line.keyword!r}", line, req_id)
            return None
        attrs[line.keyword] = line

    text = _want_str(attrs, "text", out, f"requirement {req_id!r}", req_id, at=opener)
    spec = _want_word(attrs, "specificity", SPECIFICITIES, out, f"requirement {req_id!r}",
                      req_id, at=opener)
    enforce = _want_word(attrs, "enforceability", ENFORCEABILITIES, out,
                         f"requirement {req_id!r}", req_id, at=opener)
    applicable: tuple[str, ...] = ()
    app_line = attrs.get("applicable")
    if app_line is not None:
        v = app_line.value
        if not isinstance(v, list) or not all(isinstance(x, str) and x in RULE_KINDS for x in v):
            out.error("applicable must be a JSON array of rule kinds", app_line, req_id)
        else:
            applicable = tuple(v)
    for key in attrs:
        if key not in ("text", "specificity", "enforceability", "applicable"):
            out.error(f"unknown requirement attribute {key!r}", attrs[key], req_id)

    rule: Rule | None = None
    if rule_line is not None:
        if enforce is not None and enforce != "symbolic":
            out.error(
                f"requirement {req_id!r} carries a rule but is marked {enforce}",
                rule_line, req_id,
            )
            return None
        rule = _parse_rule(rule_line, rule_body, out, req_id)
        if rule is None:
            return None

    if text is None or spec is None or enforce is None:
        return None
    return Requirement(id=req_id, text=text, specificity=spec, enforceability=enforce,
                       applicable=applicable, rule=rule)


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def canonical_serialize(doc: PolicyDocument) -> str:
    w = Writer()
    w.line(0, "policy")
    w.line(1, "version", doc.version)
    w.line(1, "domain", doc.domain)
    for fact in doc.facts:
        w.blank()
        w.line(0, "fact", fact.name)
        w.line(1, "tool", fact.tool)
        w.line(1, "path", fact.path)
    for req in doc.requirements:
        w.blank()
        w.line(0, "requirement", req.id)
        w.line(1, "text", req.text)
        w.line(1, "specificity", req.specificity, bare=True)
        w.line(1, "enforceability", req.enforceability, bare=True)
        if req.applicable:
            w.line(1, "applicable", list(req.applicable))
        if req.rule is not None:
            _serialize_rule(w, req.rule)
    return w.text()


def _serialize_rule(w: Writer, rule: Rule) -> None:
    w.line(1, "rule", rule.kind, bare=True)
    if isinstance(rule, ApiValidationRule):
        w.line(2, "tool", rule.tool)
        if rule.extra_params:
            w.line(2, "extra_params", list(rule.extra_params))
        w.line(2, "predicate", rule.predicate_text)
    elif isinstance(rule, TemporalRule):
        w.line(2, "formula", rule.formula_text)
    elif isinstance(rule, ConfirmationRule):
        w.line(2, "tool", rule.tool)
        if rule.summary_template is not None:
            w.line(2, "summary", rule.summary_template.text)
    elif isinstance(rule, ResponseTemplateRule):
        w.line(2, "tool", rule.tool)
        w.line(2, "template", rule.template.text)
    elif isinstance(rule, InfoFlowRule):
        for lr in rule.label_rules:
            w.line(2, "label_rule")
            w.line(3, "tool", lr.tool)
            w.line(3, "path", lr.path_pattern)
            w.line(3, "label", lr.label)
            if lr.condition_text is not None:
                w.line(3, "condition", lr.condition_text)
        for fr in rule.flow_rules:
            w.line(2, "flow_rule")
            w.line(3, "label", fr.label)
            w.line(3, "sink", fr.sink, bare=True)
            w.line(3, "action", fr.action, bare=True)


# ---------------------------------------------------------------------------
# Catalog-aware validation
# ---------------------------------------------------------------------------


def validate_policy(doc: PolicyDocument, catalog: ToolCatalog) -> list[Diagnostic]:
    """Resolve every tool/param/field reference; diagnostics name the
    requirement and reason. Empty list means fully resolved."""
    out = _Collector()
    for fact in doc.facts:
        if catalog.get(fact.tool) is None:
            out.error(f"fact {fact.name!r} references unknown tool {fact.tool!r}")

    extras_per_tool: dict[str, list[str]] = {}
    for req in doc.requirements:
        rule = req.rule
        if rule is None:
            continue
        tool_name = getattr(rule, "tool", None)
        schema = None
        if tool_name is not None:
            schema = catalog.get(tool_name)
            if schema is None:
                out.error(f"references unknown tool {tool_name!r}", req=req.id)
                continue

        if isinstance(rule, ApiValidationRule):
            param_names = {p.name for p in schema.params}
            for entry in rule.extra_params:
                name, ptype = split_extra_param(entry)
                existing = schema.param(name)
                if existing is not None and existing.type != ptype:
                    out.error(
                        f"extra param {name!r} collides with an existing "
                        f"{existing.type} param of {tool_name!r}",
                        req=req.id,
                    )
                param_names.add(name)
                extras_per_tool.setdefault(tool_name, []).append(name)
            for root, first in _arg_references(rule.predicate):
                if root == "args" and first is not None and first not in param_names:
                    out.error(
                        f"predicate references unknown param args.{first} of {tool_name!r}",
                        req=req.id,
                    )
        elif isinstance(rule, ConfirmationRule):
            if rule.summary_template is not None:
                _check_template(rule.summary_template, "args", schema, out, req.id)
        elif isinstance(rule, ResponseTemplateRule):
            _check_template(rule.template, "result", schema, out, req.id)
        elif isinstance(rule, InfoFlowRule):
            produced = set()
            for lr in rule.label_rules:
                produced.add(lr.label)
                if catalog.get(lr.tool) is None:
                    out.error(f"label_rule references unknown tool {lr.tool!r}", req=req.id)
            for fr in rule.flow_rules:
                if fr.label not in produced:
                    out.warning(
                        f"flow rule references label {fr.label!r} no label_rule produces",
                        req=req.id,
                    )

    for tool_name, names in extras_per_tool.items():
        if len(set(names)) > EXTRA_PARAM_SOFT_LIMIT:
            out.warning(
                f"tool {tool_name!r} accumulates {len(set(names))} guardrail params "
                f"(more than the expected maximum of {EXTRA_PARAM_SOFT_LIMIT})"
            )
    return out.diagnostics


def _arg_references(expr: PredicateExpr) -> list[tuple[str, str | None]]:
    """(root, first segment) pairs for every path in the expression."""
    from .predicate import PathRef, FuncCall, Member, Compare, InExpr, Not, And, Or

    refs: list[tuple[str, str | None]] = []

    def walk(node: PredicateExpr) -> None:
        if isinstance(node, PathRef):
            refs.append((node.segments[0], node.segments[1] if len(node.segments) > 1 else None))
        elif isinstance(node, Member):
            walk(node.base)
        elif isinstance(node, FuncCall):
            for a in node.args:
                walk(a)
        elif isinstance(node, (Compare, InExpr, And, Or)):
            left = node.left if not isinstance(node, InExpr) else node.item
            right = node.right if not isinstance(node, InExpr) else node.container
            walk(left)
            walk(right)
        elif isinstance(node, Not):
            walk(node.operand)

    walk(expr)
    return refs


def _normalize_result_path(path: Path) -> str:
    segs = []
    for seg in path:
        if isinstance(seg, int) or seg == "*":
            segs.append("[*]")
        else:
            segs.append(("." if segs else "") + seg)
    return "".join(segs)


def _check_template(template: Template, root: str, schema, out: _Collector, req_id: str) -> None:
    declared = None
    if root == "result" and schema is not None and schema.result_fields:
        declared = {
            _normalize_result_path(parse_dotted_path(p)) for p in schema.result_fields
        }
    for path in template.placeholder_paths():
        if path[0] != root:
            out.error(
                f"template placeholder {{{'.'.join(str(s) for s in path)}}} must be rooted "
                f"at {root!r}",
                req=req_id,
            )
            continue
        if root == "args" and schema is not None:
            first = path[1] if len(path) > 1 else None
            names = {p.name for p in schema.params} | set(schema.guardrail_meta.extra_params)
            if first is not None and first not in names:
                out.warning(f"summary placeholder names unknown param {first!r}", req=req_id)
        elif declared is not None:
            rest = _normalize_result_path(path[1:])
            if rest and rest not in declared:
                out.warning(f"template placeholder references unknown path {rest!r}", req=req_id)


# ---------------------------------------------------------------------------
# Coverage reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageReport:
    total: int
    by_enforceability: dict[str, int]
    by_kind: dict[str, int]

    @property
    def in_scope(self) -> int:
        return self.by_enforceability.get("symbolic", 0) + self.by_enforceability.get(
            "not_symbolic", 0
        )

    @property
    def symbolic(self) -> int:
        return self.by_enforceability.get("symbolic", 0)


def coverage_report(doc: PolicyDocument) -> CoverageReport:
    by_enf = {label: 0 for label in ENFORCEABILITIES}
    by_kind = {kind: 0 for kind in RULE_KINDS}
    for req in doc.requirements:
        by_enf[req.enforceability] += 1
        if req.enforceability != "symbolic":
            continue
        kinds = req.applicable or ((req.rule.kind,) if req.rule is not None else ())
        for kind in kinds:
            by_kind[kind] += 1
    return CoverageReport(
        total=len(doc.requirements), by_enforceability=by_enf, by_kind=by_kind
    )
