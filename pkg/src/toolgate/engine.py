"""The guardrail decision core.

``GuardrailEngine.evaluate_call`` runs the fixed pipeline over a pending
call: argument schema, temporal admission, argument predicates, taint
check, confirmation. The first failure decides the verdict. ENFORCE mode
turns failures into denials before the upstream ever sees the call;
MONITOR mode records the same would-be verdict as a ViolationRecord and
lets the call through, which is what the evaluation baseline needs.

Result handling (labeling, redaction, fact capture, response templates)
lives in ``process_result`` so the proxy and the harness share one path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .infoflow import FlowBlock, FlowPolicy, TaintSet, apply_label_rules, collect_taint, enforce_flow, taint_check_args
from .policy import (
    ApiValidationRule,
    ConfirmationRule,
    Diagnostic,
    PolicyDocument,
    Requirement,
    ResponseTemplateRule,
    Template,
    TemporalRule,
)
from .predicate import DataAccess, EvalError, eval_expr
from .protocol import ToolCall, ToolCatalog, ToolResult, ToolSchema, augment_catalog, split_extra_param
from .temporal import Event, MonitorState, step
from .values import Value, args_hash, canonical_scalar, get_path, is_scalar, parse_dotted_path, value_kind

ENFORCE = "enforce"
MONITOR = "monitor"

ALLOW = "allow"
DENY = "deny"
NEEDS_CONFIRMATION = "needs_confirmation"


class UnknownToolError(Exception):
    """The call names a tool the active catalog does not serve."""


class SchemaInvalidError(Exception):
    """Unattributable schema failure: surfaces as a protocol-level error."""


@dataclass(frozen=True)
class ViolationRecord:
    session_id: str
    call_id: str
    requirement_id: str
    rule_kind: str
    message: str
    position: int


@dataclass(frozen=True)
class Verdict:
    decision: str  # allow | deny | needs_confirmation
    requirement_id: str | None = None
    rule_kind: str | None = None
    message: str = ""
    token: str | None = None
    summary: str | None = None
    monitor_violations: tuple[ViolationRecord, ...] = ()

    @property
    def allowed(self) -> bool:
        return self.decision == ALLOW


@dataclass
class PendingConfirmation:
    tool: str
    args_hash: str
    issue_seq: int


@dataclass
class SessionState:
    session_id: str
    trace: list[Event] = field(default_factory=list)
    temporal_states: dict[str, MonitorState] = field(default_factory=dict)
    taint: TaintSet = field(default_factory=TaintSet)
    pending_confirmations: dict[str, PendingConfirmation] = field(default_factory=dict)
    facts: dict[str, Value] = field(default_factory=dict)
    violations: list[ViolationRecord] = field(default_factory=list)
    eval_seq: int = 0
    token_seq: int = 0


class RenderError(Exception):
    def __init__(self, path: str):
        super().__init__(f"missing path {path}")
        self.path = path


def render_template(template: Template, roots: dict[str, Value]) -> str:
    """Fill placeholders with scalars from the named roots.

    Numbers render in canonical form; a missing path or a non-scalar hit
    raises RenderError with the offending path.
    """
    out: list[str] = []
    for part in template.parts:
        if isinstance(part, str):
            out.append(part)
            continue
        root = part[0]
        shown = ".".join(str(s) for s in part)
        if root not in roots:
            raise RenderError(shown)
        try:
            scalar = get_path(roots[root], part[1:])
        except (KeyError, IndexError, TypeError):
            raise RenderError(shown)
        if not is_scalar(scalar):
            raise RenderError(shown)
        out.append(canonical_scalar(scalar))
    return "".join(out)


def validate_args_schema(args: dict[str, Value], schema: ToolSchema) -> list[Diagnostic]:
    """Shape-check arguments against one tool schema; empty means valid."""
    diags: list[Diagnostic] = []
    names = {p.name for p in schema.params}
    for p in schema.params:
        if p.required and p.name not in args:
            diags.append(Diagnostic("error", f"missing required param {p.name!r}"))
    for name, value in args.items():
        if name not in names:
            diags.append(Diagnostic("error", f"unknown param {name!r}"))
            continue
        spec = schema.param(name)
        kind = value_kind(value)
        if kind == "null":
            if not spec.nullable:
                diags.append(Diagnostic("error", f"param {name!r} may not be null"))
        elif kind != spec.type:
            diags.append(
                Diagnostic("error", f"param {name!r} expects {spec.type}, got {kind}")
            )
    return diags


@dataclass(frozen=True)
class ToolCallCandidate:
    name: str
    arguments: dict[str, Value]
    confirmation_token: str | None = None


@dataclass(frozen=True)
class UserMessage:
    text: str


@dataclass(frozen=True)
class InvalidAction:
    diagnostics: tuple[str, ...]


ActionClassification = ToolCallCandidate | UserMessage | InvalidAction


def classify_agent_action(raw: str, catalog: ToolCatalog) -> ActionClassification:
    """Parse one agent turn against the action envelope.

    A tool call classifies only if the tool exists in the visible catalog
    and the arguments validate against its schema.
    """
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        return InvalidAction((f"action is not valid JSON: {e.msg} (offset {e.pos})",))
    if not isinstance(obj, dict):
        return InvalidAction(("action must be a JSON object",))
    action = obj.get("action")
    if action == "message":
        text = obj.get("text")
        if not isinstance(text, str):
            return InvalidAction(("message actions need a string text field",))
        return UserMessage(text)
    if action == "tool_call":
        name = obj.get("name")
        arguments = obj.get("arguments", {})
        token = obj.get("confirmation_token")
        if not isinstance(name, str):
            return InvalidAction(("tool_call actions need a string name",))
        if not isinstance(arguments, dict):
            return InvalidAction(("tool_call arguments must be an object",))
        if token is not None and not isinstance(token, str):
            return InvalidAction(("confirmation_token must be a string",))
        schema = catalog.get(name)
        if schema is None:
            return InvalidAction((f"unknown tool {name!r}",))
        diags = validate_args_schema(arguments, schema)
        if diags:
            return InvalidAction(tuple(d.message for d in diags))
        return ToolCallCandidate(name=name, arguments=arguments, confirmation_token=token)
    return InvalidAction((f"unknown action {action!r}",))


@dataclass(frozen=True)
class ProcessedResult:
    """Outcome of result-side processing for one executed call."""

    result: ToolResult
    withheld: Verdict | None = None  # set when ENFORCE must not forward the value
    diagnostics: tuple[str, ...] = ()


class GuardrailEngine:
    def __init__(
        self,
        policy: PolicyDocument,
        baseline_catalog: ToolCatalog,
        db: DataAccess,
        mode: str = ENFORCE,
    ):
        if mode not in (ENFORCE, MONITOR):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.policy = policy
        self.baseline_catalog = baseline_catalog
        self.augmented_catalog = augment_catalog(baseline_catalog, policy)
        self.db = db

        self.temporal_rules: list[tuple[Requirement, TemporalRule]] = []
        self.api_rules: list[tuple[Requirement, ApiValidationRule]] = []
        self.confirm_rules: dict[str, tuple[Requirement, ConfirmationRule]] = {}
        self.template_rules: dict[str, tuple[Requirement, ResponseTemplateRule]] = {}
        self.schema_requirement: Requirement | None = None
        flow_pairs = []
        self.extra_param_owner: dict[tuple[str, str], Requirement] = {}
        for req in policy.requirements:
            rule = req.rule
            if rule is None:
                continue
            if rule.kind == "temporal":
                self.temporal_rules.append((req, rule))
            elif rule.kind == "api_validation":
                self.api_rules.append((req, rule))
                for entry in rule.extra_params:
                    name, _ = split_extra_param(entry)
                    self.extra_param_owner[(rule.tool, name)] = req
            elif rule.kind == "confirmation":
                self.confirm_rules.setdefault(rule.tool, (req, rule))
            elif rule.kind == "response_template":
                self.template_rules.setdefault(rule.tool, (req, rule))
            elif rule.kind == "schema_constraint" and self.schema_requirement is None:
                self.schema_requirement = req
            elif rule.kind == "info_flow":
                flow_pairs.append((req.id, rule))
        self.flow_policy = FlowPolicy.build(flow_pairs)

    # -- catalogs -----------------------------------------------------------

    @property
    def active_catalog(self) -> ToolCatalog:
        """ENFORCE serves the augmented surface; MONITOR leaves signatures alone."""
        return self.augmented_catalog if self.mode == ENFORCE else self.baseline_catalog

    def new_session(self, session_id: str) -> SessionState:
        return SessionState(
            session_id=session_id,
            temporal_states={req.id: MonitorState() for req, _ in self.temporal_rules},
        )

    # -- call admission -----------------------------------------------------

    def evaluate_call(self, call: ToolCall, session: SessionState) -> Verdict:
        """Decide a pending call; in MONITOR the would-be verdict is recorded
        and the decision comes back as allow."""
        schema = self.active_catalog.get(call.tool)
        if schema is None:
            raise UnknownToolError(f"unknown tool {call.tool!r}")
        session.eval_seq += 1

        verdict = self._first_failure(call, schema, session)
        if verdict.decision == ALLOW or self.mode == ENFORCE:
            return verdict
        record = ViolationRecord(
            session_id=session.session_id,
            call_id=call.call_id,
            requirement_id=verdict.requirement_id or "",
            rule_kind=verdict.rule_kind or "",
            message=verdict.message or verdict.summary or "",
            position=len(session.trace),
        )
        session.violations.append(record)
        return Verdict(decision=ALLOW, monitor_violations=(record,))

    def _first_failure(self, call: ToolCall, schema: ToolSchema, session: SessionState) -> Verdict:
        # 1. argument schema, including guardrail extra params
        diags = validate_args_schema(call.args, schema)
        if diags:
            return self._schema_verdict(call, diags)

        # 2. temporal admission (speculative; state committed on execution)
        pending = Event("call", call.tool, len(session.trace))
        for req, rule in self.temporal_rules:
            _, holds = step(session.temporal_states[req.id], rule.formula, pending)
            if not holds:
                return self._deny(req, f"call to {call.tool!r} violates {rule.formula_text!r}")

        # 3. argument predicates for this tool
        for req, rule in self.api_rules:
            if rule.tool != call.tool:
                continue
            if self.mode == MONITOR and rule.extra_params:
                missing = [
                    name
                    for entry in rule.extra_params
                    for name in [split_extra_param(entry)[0]]
                    if name not in call.args
                ]
                if missing:
                    # Baseline signatures lack these; replay evaluation owns
                    # the safety question for this call.
                    continue
            try:
                ok = eval_expr(rule.predicate, call.args, session.facts, self.db)
            except EvalError as e:
                return self._deny(req, f"predicate could not be evaluated: {e}")
            if not ok:
                return self._deny(req, f"predicate {rule.predicate_text!r} not satisfied")

        # 4. tainted values re-entering through arguments
        hit = taint_check_args(call.args, session.taint, self.flow_policy)
        if hit is not None:
            req = self.policy.requirement(hit.requirement_id)
            return self._deny(
                req,
                f"argument {hit.arg_path} carries a value labeled {hit.label!r} "
                f"that may not flow to tools",
            )

        # 5. confirmation requirement
        entry = self.confirm_rules.get(call.tool)
        if entry is None:
            return Verdict(decision=ALLOW)
        req, rule = entry
        if self.mode == MONITOR:
            return self._deny(req, f"{call.tool!r} executed without rule-based confirmation")
        if call.confirmation_token is not None and self.redeem_confirmation(call, session):
            return Verdict(decision=ALLOW)
        return self._issue_confirmation(call, session, req, rule)

    def _schema_verdict(self, call: ToolCall, diags: list[Diagnostic]) -> Verdict:
        messages = "; ".join(d.message for d in diags)
        for d in diags:
            for (tool, param), req in self.extra_param_owner.items():
                if tool == call.tool and f"{param!r}" in d.message:
                    return self._deny(
                        req, f"guardrail argument check failed: {d.message}"
                    )
        if self.schema_requirement is not None:
            return self._deny(
                self.schema_requirement, f"call does not match the tool schema: {messages}"
            )
        raise SchemaInvalidError(messages)

    def _deny(self, req: Requirement | None, detail: str) -> Verdict:
        if req is None:
            # taint hits always trace back to a requirement; this is a guard
            return Verdict(decision=DENY, requirement_id="", rule_kind="info_flow", message=detail)
        return Verdict(
            decision=DENY,
            requirement_id=req.id,
            rule_kind=req.rule.kind if req.rule else "",
            message=f"requirement {req.id} violated: {req.text} ({detail})",
        )

    # -- confirmation tokens --------------------------------------------------

    def _issue_confirmation(
        self, call: ToolCall, session: SessionState, req: Requirement, rule: ConfirmationRule
    ) -> Verdict:
        binding_hash = args_hash(call.args)
        # one pending token per (tool, args hash)
        stale = [
            tok
            for tok, pending in session.pending_confirmations.items()
            if pending.tool == call.tool and pending.args_hash == binding_hash
        ]
        for tok in stale:
            del session.pending_confirmations[tok]
        session.token_seq += 1
        token = f"confirm-{binding_hash}-{session.token_seq}"
        session.pending_confirmations[token] = PendingConfirmation(
            tool=call.tool, args_hash=binding_hash, issue_seq=session.eval_seq
        )
        summary = f"Confirm {call.tool} with arguments {json.dumps(call.args, sort_keys=True)}"
        if rule.summary_template is not None:
            try:
                summary = render_template(rule.summary_template, {"args": call.args})
            except RenderError as e:
                return self._deny(req, f"confirmation summary could not be rendered: {e}")
        return Verdict(
            decision=NEEDS_CONFIRMATION,
            requirement_id=req.id,
            rule_kind="confirmation",
            message=f"requirement {req.id}: {req.text}",
            token=token,
            summary=summary,
        )

    def redeem_confirmation(self, call: ToolCall, session: SessionState) -> bool:
        """True iff the supplied token is live, bound to this exact call, and
        being used on the immediately next evaluated call. Consumed either way."""
        token = call.confirmation_token
        if token is None:
            return False
        pending = session.pending_confirmations.pop(token, None)
        if pending is None:
            return False
        if pending.issue_seq != session.eval_seq - 1:
            return False
        return pending.tool == call.tool and pending.args_hash == args_hash(call.args)

    # -- execution bookkeeping ----------------------------------------------

    def commit_call(self, call: ToolCall, session: SessionState) -> None:
        """Append the call event once the upstream execution is underway."""
        event = Event("call", call.tool, len(session.trace))
        session.trace.append(event)
        self._step_states(session, event)

    def process_result(self, call: ToolCall, result: ToolResult, session: SessionState) -> ProcessedResult:
        """Commit the result event, capture facts, label/redact, render."""
        event = Event(result.status, call.tool, len(session.trace))
        session.trace.append(event)
        self._step_states(session, event)
        diagnostics: list[str] = []

        if result.status != "ok":
            return ProcessedResult(result=result)

        for fact in self.policy.facts:
            if fact.tool != call.tool:
                continue
            path = parse_dotted_path(fact.path)
            try:
                scalar = get_path({"result": result.value}, path)
            except (KeyError, IndexError, TypeError):
                diagnostics.append(f"fact {fact.name!r}: path {fact.path} absent from result")
                continue
            if is_scalar(scalar):
                session.facts[fact.name] = scalar

        labels, label_diags = apply_label_rules(
            call.tool, result.value, self.flow_policy, session.facts, self.db
        )
        diagnostics.extend(label_diags)

        outbound = result
        if self.mode == ENFORCE:
            flowed = enforce_flow(result.value, labels, self.flow_policy, session.taint)
            if isinstance(flowed, FlowBlock):
                req = self.policy.requirement(flowed.requirement_id)
                return ProcessedResult(
                    result=result,
                    withheld=self._deny(
                        req,
                        f"result carries {flowed.label!r} data that may not reach the agent",
                    ),
                    diagnostics=tuple(diagnostics),
                )
            value, records = flowed
            outbound = ToolResult(
                call_id=result.call_id,
                status=result.status,
                value=value,
                rendered_response=result.rendered_response,
                verbatim=result.verbatim,
                redactions=tuple((r.path, r.label) for r in records),
            )
        else:
            collect_taint(result.value, labels, session.taint)
            self._record_monitor_flow(call, session, labels)

        entry = self.template_rules.get(call.tool)
        if entry is not None:
            req, rule = entry
            if self.mode == ENFORCE:
                try:
                    rendered = render_template(rule.template, {"result": outbound.value})
                except RenderError as e:
                    return ProcessedResult(
                        result=outbound,
                        withheld=self._deny(req, f"response template failed: {e}"),
                        diagnostics=tuple(diagnostics),
                    )
                outbound = ToolResult(
                    call_id=outbound.call_id,
                    status=outbound.status,
                    value=outbound.value,
                    rendered_response=rendered,
                    verbatim=True,
                    redactions=outbound.redactions,
                )
            else:
                try:
                    render_template(rule.template, {"result": result.value})
                except RenderError as e:
                    self._record(
                        session, call, req, f"response template failed: {e}"
                    )
        return ProcessedResult(result=outbound, diagnostics=tuple(diagnostics))

    def _record_monitor_flow(self, call: ToolCall, session: SessionState, labels) -> None:
        seen: set[str] = set()
        for label_set in labels.values():
            for label in sorted(label_set):
                rule = self.flow_policy.rule_for(label, "agent_context")
                if rule is None or rule[1] in seen:
                    continue
                seen.add(rule[1])
                req = self.policy.requirement(rule[1])
                self._record(
                    session,
                    call,
                    req,
                    f"{label!r} data flowed to the agent unchecked",
                )

    def _record(self, session: SessionState, call: ToolCall, req: Requirement | None, detail: str) -> None:
        verdict = self._deny(req, detail)
        session.violations.append(
            ViolationRecord(
                session_id=session.session_id,
                call_id=call.call_id,
                requirement_id=verdict.requirement_id or "",
                rule_kind=verdict.rule_kind or "",
                message=verdict.message,
                position=len(session.trace),
            )
        )

    def _step_states(self, session: SessionState, event: Event) -> None:
        for req, rule in self.temporal_rules:
            new_state, _ = step(session.temporal_states[req.id], rule.formula, event)
            session.temporal_states[req.id] = new_state

    # -- replay support -----------------------------------------------------

    def check_replayed_call(self, call: ToolCall, session: SessionState) -> tuple[bool, str | None]:
        """Run the extra-param guardrail checks on a replayed call.

        Used by the harness replay procedure: schema against the extended
        signature plus this tool's argument predicates, on a snapshot of the
        session facts. Returns (passed, failing requirement id).
        """
        schema = self.augmented_catalog.get(call.tool)
        if schema is None:
            return False, None
        diags = validate_args_schema(call.args, schema)
        if diags:
            for d in diags:
                for (tool, param), req in self.extra_param_owner.items():
                    if tool == call.tool and f"{param!r}" in d.message:
                        return False, req.id
            return False, self.schema_requirement.id if self.schema_requirement else None
        for req, rule in self.api_rules:
            if rule.tool != call.tool:
                continue
            try:
                ok = eval_expr(rule.predicate, call.args, session.facts, self.db)
            except EvalError:
                return False, req.id
            if not ok:
                return False, req.id
        return True, None
