"""Wire data model shared by the proxy, the decision engine, and the harness.

Frames are single-line JSON-RPC 2.0 objects, UTF-8, newline-terminated.
The five message shapes and the error-code table are frozen here so golden
tests can be byte-exact:

    method "tools/list"  -> ListRequest / ListResponse
    method "tools/call"  -> CallRequest / CallResponse
    error object         -> ErrorResponse

    -32050 guardrail_denied        -32051 confirmation_required
    -32000 upstream_error          -32600 protocol_error
    -32602 schema_invalid
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Optional, Union

from .values import Value, value_kind

if TYPE_CHECKING:
    from .policy import PolicyDocument

TOOL_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")

PARAM_TYPES = ("string", "number", "boolean", "object", "array")

ERROR_CODES = {
    "guardrail_denied": -32050,
    "confirmation_required": -32051,
    "upstream_error": -32000,
    "protocol_error": -32600,
    "schema_invalid": -32602,
}
ERROR_KINDS = {code: kind for kind, code in ERROR_CODES.items()}

EXTRA_PARAM_SOFT_LIMIT = 3


class FrameError(Exception):
    """A frame that could not be decoded into a protocol message."""

    def __init__(self, kind: str, message: str, offset: int | None = None):
        super().__init__(message)
        self.kind = kind  # protocol_error | schema_invalid
        self.offset = offset

    def to_payload(self) -> "ErrorPayload":
        data: dict[str, Value] = {}
        if self.offset is not None:
            data["offset"] = self.offset
        return ErrorPayload(kind=self.kind, message=str(self), data=data or None)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str = "string"
    required: bool = True
    description: str = ""
    nullable: bool = False


@dataclass(frozen=True)
class GuardrailMetadata:
    extra_params: tuple[str, ...] = ()
    requires_confirmation: bool = False
    has_response_template: bool = False

    @property
    def is_empty(self) -> bool:
        return not (self.extra_params or self.requires_confirmation or self.has_response_template)


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str = ""
    params: tuple[ParamSpec, ...] = ()
    guardrail_meta: GuardrailMetadata = GuardrailMetadata()
    # Dotted paths (without the "result" root) a tool declares for its ok
    # value; used only to lint template placeholders.
    result_fields: tuple[str, ...] = ()

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    def validate(self) -> list[str]:
        problems = []
        if not TOOL_NAME_RE.match(self.name):
            problems.append(f"bad tool name {self.name!r}")
        seen: set[str] = set()
        for p in self.params:
            if p.name in seen:
                problems.append(f"duplicate param {p.name!r} in tool {self.name!r}")
            seen.add(p.name)
            if p.type not in PARAM_TYPES:
                problems.append(f"unknown param type {p.type!r} in tool {self.name!r}")
        for name in self.guardrail_meta.extra_params:
            spec = self.param(name)
            if spec is None or not spec.required:
                problems.append(
                    f"guardrail param {name!r} of tool {self.name!r} must exist and be required"
                )
        return problems


@dataclass(frozen=True)
class ToolCatalog:
    tools: tuple[ToolSchema, ...] = ()

    def get(self, name: str) -> ToolSchema | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def names(self) -> list[str]:
        return [t.name for t in self.tools]

    def validate(self) -> list[str]:
        problems = []
        seen: set[str] = set()
        for t in self.tools:
            if t.name in seen:
                problems.append(f"duplicate tool name {t.name!r}")
            seen.add(t.name)
            problems.extend(t.validate())
        return problems


@dataclass(frozen=True)
class ToolCall:
    session_id: str
    call_id: str
    tool: str
    args: dict[str, Value] = field(default_factory=dict)
    confirmation_token: str | None = None


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    status: str = "ok"  # ok | tool_error
    value: Value = None
    rendered_response: str | None = None
    verbatim: bool = False
    redactions: tuple[tuple[str, str], ...] = ()  # (path, label)

    def __post_init__(self):
        if self.verbatim and self.rendered_response is None:
            raise ValueError("verbatim results must carry a rendered_response")


@dataclass(frozen=True)
class ErrorPayload:
    kind: str
    message: str
    code: int | None = None
    requirement_id: str | None = None
    rule_kind: str | None = None
    data: dict[str, Value] | None = None

    def __post_init__(self):
        if self.kind not in ERROR_CODES:
            raise ValueError(f"unknown error kind {self.kind!r}")
        if self.code is None:
            object.__setattr__(self, "code", ERROR_CODES[self.kind])
        if self.kind == "guardrail_denied":
            if not (self.requirement_id and self.rule_kind and self.message):
                raise ValueError("guardrail denials must name a requirement and rule kind")


@dataclass(frozen=True)
class ListRequest:
    pass


@dataclass(frozen=True)
class ListResponse:
    catalog: ToolCatalog


@dataclass(frozen=True)
class CallRequest:
    call: ToolCall


@dataclass(frozen=True)
class CallResponse:
    result: ToolResult


@dataclass(frozen=True)
class ErrorResponse:
    error: ErrorPayload


ProtocolMessage = Union[ListRequest, ListResponse, CallRequest, CallResponse, ErrorResponse]


# ---------------------------------------------------------------------------
# Frame codec
# ---------------------------------------------------------------------------


def _dump(obj: dict) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def _schema_to_wire(t: ToolSchema) -> dict:
    props: dict[str, Any] = {}
    required = []
    for p in t.params:
        entry: dict[str, Any] = {"type": [p.type, "null"] if p.nullable else p.type}
        if p.description:
            entry["description"] = p.description
        props[p.name] = entry
        if p.required:
            required.append(p.name)
    meta: dict[str, Any] = {
        "guardrails": {
            "extra_params": list(t.guardrail_meta.extra_params),
            "requires_confirmation": t.guardrail_meta.requires_confirmation,
            "has_response_template": t.guardrail_meta.has_response_template,
        }
    }
    if t.result_fields:
        meta["result_fields"] = list(t.result_fields)
    return {
        "name": t.name,
        "description": t.description,
        "inputSchema": {"type": "object", "properties": props, "required": required},
        "_meta": meta,
    }


def _schema_from_wire(obj: Any) -> ToolSchema:
    if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
        raise FrameError("schema_invalid", "tool descriptor must be an object with a name")
    name = obj["name"]
    schema = obj.get("inputSchema")
    if not isinstance(schema, dict):
        schema = {}
    props = schema.get("properties")
    if not isinstance(props, dict):
        props = {}
    required = set(schema.get("required") or [])
    params = []
    for pname, entry in props.items():
        ptype = entry.get("type", "string") if isinstance(entry, dict) else "string"
        nullable = False
        if isinstance(ptype, list):
            nullable = "null" in ptype
            remaining = [x for x in ptype if x != "null"]
            ptype = remaining[0] if remaining else "string"
        params.append(
            ParamSpec(
                name=pname,
                type=ptype,
                required=pname in required,
                description=(entry.get("description", "") if isinstance(entry, dict) else ""),
                nullable=nullable,
            )
        )
    meta = obj.get("_meta") or {}
    g = meta.get("guardrails") or {}
    return ToolSchema(
        name=name,
        description=obj.get("description", ""),
        params=tuple(params),
        guardrail_meta=GuardrailMetadata(
            extra_params=tuple(g.get("extra_params") or ()),
            requires_confirmation=bool(g.get("requires_confirmation", False)),
            has_response_template=bool(g.get("has_response_template", False)),
        ),
        result_fields=tuple(meta.get("result_fields") or ()),
    )


def encode_frame(msg: ProtocolMessage) -> bytes:
    """One newline-terminated JSON-RPC frame; decode_frame inverts it."""
    if isinstance(msg, ListRequest):
        return _dump({"jsonrpc": "2.0", "id": 0, "method": "tools/list", "params": {}})
    if isinstance(msg, CallRequest):
        call = msg.call
        meta: dict[str, Any] = {"session_id": call.session_id}
        if call.confirmation_token is not None:
            meta["confirmation_token"] = call.confirmation_token
        return _dump(
            {
                "jsonrpc": "2.0",
                "id": call.call_id,
                "method": "tools/call",
                "params": {"name": call.tool, "arguments": call.args, "_meta": meta},
            }
        )
    if isinstance(msg, ListResponse):
        return _dump(
            {
                "jsonrpc": "2.0",
                "id": 0,
                "result": {"tools": [_schema_to_wire(t) for t in msg.catalog.tools]},
            }
        )
    if isinstance(msg, CallResponse):
        r = msg.result
        meta = {}
        if r.rendered_response is not None:
            meta["rendered_response"] = r.rendered_response
        if r.verbatim:
            meta["verbatim"] = True
        if r.redactions:
            meta["redactions"] = [{"path": p, "label": l} for p, l in r.redactions]
        result: dict[str, Any] = {"content": r.value}
        if r.status == "tool_error":
            result["isError"] = True
        if meta:
            result["_meta"] = meta
        return _dump({"jsonrpc": "2.0", "id": r.call_id, "result": result})
    if isinstance(msg, ErrorResponse):
        e = msg.error
        data: dict[str, Any] = {}
        if e.requirement_id is not None:
            data["requirement_id"] = e.requirement_id
        if e.rule_kind is not None:
            data["rule_kind"] = e.rule_kind
        if e.data:
            data.update(e.data)
        err: dict[str, Any] = {"code": e.code, "message": e.message}
        if data:
            err["data"] = data
        frame_id = data.get("call_id")
        return _dump({"jsonrpc": "2.0", "id": frame_id, "error": err})
    raise TypeError(f"not a protocol message: {msg!r}")


def decode_frame(line: bytes | str) -> ProtocolMessage:
    """Parse one frame; raises FrameError (never anything else) on bad input."""
    if isinstance(line, bytes):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FrameError("protocol_error", "frame is not valid UTF-8", offset=e.start)
    else:
        text = line
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FrameError("protocol_error", f"malformed frame: {e.msg}", offset=e.pos)
    if not isinstance(obj, dict):
        raise FrameError("schema_invalid", "frame must be a JSON object")

    if "method" in obj:
        method = obj["method"]
        if method == "tools/list":
            return ListRequest()
        if method == "tools/call":
            params = obj.get("params")
            if not isinstance(params, dict):
                raise FrameError("schema_invalid", "tools/call needs an object params field")
            name = params.get("name")
            arguments = params.get("arguments", {})
            meta = params.get("_meta") or {}
            if not isinstance(name, str):
                raise FrameError("schema_invalid", "tools/call params.name must be a string")
            if not isinstance(arguments, dict):
                raise FrameError("schema_invalid", "tools/call arguments must be an object")
            session_id = meta.get("session_id")
            if not isinstance(session_id, str) or not session_id:
                raise FrameError("schema_invalid", "tools/call needs _meta.session_id")
            token = meta.get("confirmation_token")
            if token is not None and not isinstance(token, str):
                raise FrameError("schema_invalid", "confirmation_token must be a string")
            return CallRequest(
                ToolCall(
                    session_id=session_id,
                    call_id=str(obj.get("id", "")),
                    tool=name,
                    args=arguments,
                    confirmation_token=token,
                )
            )
        raise FrameError("protocol_error", f"unknown method {method!r}")

    if "error" in obj:
        err = obj["error"]
        if not isinstance(err, dict) or not isinstance(err.get("code"), int):
            raise FrameError("schema_invalid", "error frames need an integer code")
        code = err["code"]
        kind = ERROR_KINDS.get(code, "upstream_error")
        data = err.get("data") or {}
        if not isinstance(data, dict):
            raise FrameError("schema_invalid", "error data must be an object")
        req_id = data.pop("requirement_id", None)
        rule_kind = data.pop("rule_kind", None)
        try:
            payload = ErrorPayload(
                kind=kind,
                code=code,
                message=str(err.get("message", "")),
                requirement_id=req_id,
                rule_kind=rule_kind,
                data=data or None,
            )
        except ValueError as e:
            raise FrameError("schema_invalid", str(e))
        return ErrorResponse(payload)

    if "result" in obj:
        result = obj["result"]
        if not isinstance(result, dict):
            raise FrameError("schema_invalid", "result must be an object")
        if "tools" in result:
            tools_obj = result["tools"]
            if not isinstance(tools_obj, list):
                raise FrameError("schema_invalid", "tools must be a list")
            catalog = ToolCatalog(tuple(_schema_from_wire(t) for t in tools_obj))
            problems = catalog.validate()
            if problems:
                raise FrameError("schema_invalid", "; ".join(problems))
            return ListResponse(catalog)
        meta = result.get("_meta") or {}
        redactions = tuple(
            (r.get("path", ""), r.get("label", "")) for r in (meta.get("redactions") or [])
        )
        try:
            parsed = ToolResult(
                call_id=str(obj.get("id", "")),
                status="tool_error" if result.get("isError") else "ok",
                value=result.get("content"),
                rendered_response=meta.get("rendered_response"),
                verbatim=bool(meta.get("verbatim", False)),
                redactions=redactions,
            )
        except ValueError as e:
            raise FrameError("schema_invalid", str(e))
        return CallResponse(parsed)

    raise FrameError("schema_invalid", "frame has neither method, result, nor error")


# ---------------------------------------------------------------------------
# Catalog augmentation
# ---------------------------------------------------------------------------


class CatalogError(Exception):
    """A policy references tools or params the catalog cannot satisfy."""


def split_extra_param(entry: str) -> tuple[str, str]:
    """Extra params are declared as ``name`` or ``name:type``."""
    if ":" in entry:
        name, ptype = entry.split(":", 1)
    else:
        name, ptype = entry, "string"
    if ptype not in PARAM_TYPES:
        raise CatalogError(f"unknown extra param type {ptype!r} in {entry!r}")
    return name, ptype


def augment_catalog(base: ToolCatalog, policy: "PolicyDocument") -> ToolCatalog:
    """Apply a policy's guardrail surface to a baseline catalog.

    Tool names and descriptions are untouched; api_validation extra params
    are appended (required, in policy order) and the confirmation/template
    flags are set. Idempotent.
    """
    by_name = {t.name: t for t in base.tools}
    extras: dict[str, list[tuple[str, str, str]]] = {}  # tool -> (name, type, req id)
    confirm: set[str] = set()
    template: set[str] = set()
    for req in policy.requirements:
        rule = req.rule
        if rule is None:
            continue
        tool = getattr(rule, "tool", None)
        if tool is not None and tool not in by_name:
            raise CatalogError(f"requirement {req.id} references unknown tool {tool!r}")
        if rule.kind == "api_validation":
            for entry in rule.extra_params:
                name, ptype = split_extra_param(entry)
                extras.setdefault(tool, []).append((name, ptype, req.id))
        elif rule.kind == "confirmation":
            confirm.add(tool)
        elif rule.kind == "response_template":
            template.add(tool)

    out = []
    for t in base.tools:
        params = list(t.params)
        names = {p.name: p for p in params}
        extra_names: list[str] = list(t.guardrail_meta.extra_params)
        for name, ptype, req_id in extras.get(t.name, ()):
            existing = names.get(name)
            if existing is not None:
                if existing.type != ptype:
                    raise CatalogError(
                        f"extra param {name!r} of {t.name!r} collides with an existing "
                        f"{existing.type} param (requirement {req_id})"
                    )
                if not existing.required:
                    idx = params.index(existing)
                    params[idx] = replace(existing, required=True)
                    names[name] = params[idx]
            else:
                spec = ParamSpec(name=name, type=ptype, required=True)
                params.append(spec)
                names[name] = spec
            if name not in extra_names:
                extra_names.append(name)
        out.append(
            replace(
                t,
                params=tuple(params),
                guardrail_meta=GuardrailMetadata(
                    extra_params=tuple(extra_names),
                    requires_confirmation=t.name in confirm,
                    has_response_template=t.name in template,
                ),
            )
        )
    return ToolCatalog(tuple(out))
