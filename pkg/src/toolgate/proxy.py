"""Guardrail proxy between an agent client and an upstream tool server.

The transport-free core (``ProxyCore.handle_line``) serves the augmented
catalog, runs the engine on every call, forwards allowed calls upstream
with guardrail-only parameters stripped, applies labeling/redaction to
results, and answers denials with structured error frames. Every decision
is appended to the JSONL trace log before its response frame leaves.

``serve_tcp`` wraps the core in a threaded line-per-frame TCP server;
the harness drives the same core in process.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

from . import linedoc
from .engine import (
    ENFORCE,
    MONITOR,
    GuardrailEngine,
    SchemaInvalidError,
    SessionState,
    UnknownToolError,
    Verdict,
)
from .harness.environment import FixtureDataAccess
from .policy import PolicyDocument, parse_policy, validate_policy
from .predicate import DataAccess, NullDataAccess
from .protocol import (
    CallRequest,
    CallResponse,
    ErrorPayload,
    ErrorResponse,
    FrameError,
    ListRequest,
    ListResponse,
    ToolCall,
    ToolCatalog,
    ToolResult,
    decode_frame,
    encode_frame,
    split_extra_param,
)
from .values import Value, args_hash


class Upstream(Protocol):
    def catalog(self) -> ToolCatalog: ...

    def call(self, tool: str, args: dict[str, Value], call_id: str) -> ToolResult: ...


class UpstreamUnavailable(Exception):
    pass


class SocketUpstream:
    """Line-framed JSON-RPC client over one TCP connection."""

    def __init__(self, endpoint: str, session_id: str = "proxy-upstream"):
        self.endpoint = endpoint
        self.session_id = session_id
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._file = None

    def _connect(self):
        host, port = split_endpoint(self.endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=30)
        except OSError as e:
            raise UpstreamUnavailable(f"cannot reach upstream at {self.endpoint}: {e}")
        self._file = self._sock.makefile("rwb")

    def _roundtrip(self, frame: bytes) -> bytes:
        with self._lock:
            if self._file is None:
                self._connect()
            try:
                self._file.write(frame)
                self._file.flush()
                line = self._file.readline()
            except OSError as e:
                self.close()
                raise UpstreamUnavailable(f"upstream connection failed: {e}")
        if not line:
            self.close()
            raise UpstreamUnavailable("upstream closed the connection")
        return line

    def catalog(self) -> ToolCatalog:
        msg = decode_frame(self._roundtrip(encode_frame(ListRequest())))
        if not isinstance(msg, ListResponse):
            raise UpstreamUnavailable(f"upstream answered tools/list with {type(msg).__name__}")
        return msg.catalog

    def call(self, tool: str, args: dict[str, Value], call_id: str) -> ToolResult:
        frame = encode_frame(
            CallRequest(ToolCall(session_id=self.session_id, call_id=call_id, tool=tool, args=args))
        )
        msg = decode_frame(self._roundtrip(frame))
        if isinstance(msg, CallResponse):
            return msg.result
        if isinstance(msg, ErrorResponse):
            return ToolResult(
                call_id=call_id, status="tool_error", value={"error": msg.error.message}
            )
        raise UpstreamUnavailable(f"upstream answered tools/call with {type(msg).__name__}")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._file = None


class UpstreamDataAccess:
    """Bind collections to read-only upstream tools: lookup calls the tool
    with its single declared parameter set to the key."""

    def __init__(self, upstream: Upstream, bindings: dict[str, tuple[str, str]]):
        self.upstream = upstream
        self.bindings = bindings  # collection -> (tool, key param)
        self._seq = 0

    def lookup(self, collection: str, key: Value) -> Optional[Value]:
        binding = self.bindings.get(collection)
        if binding is None:
            return None
        tool, param = binding
        self._seq += 1
        result = self.upstream.call(tool, {param: key}, f"db-{self._seq}")
        if result.status != "ok":
            return None
        return result.value


class TraceLog:
    """Append-only JSONL sink; one lock, flushed per record."""

    def __init__(self, path: str | Path | None, clock: Callable[[], float] = time.time):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None
        self.records: list[dict] = []  # retained for in-process inspection

    def append(self, record: dict) -> None:
        record = {"ts": self.clock(), **record}
        with self._lock:
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


@dataclass
class _Session:
    state: SessionState
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_seen: float = 0.0


class ProxyCore:
    """Transport-independent frame handler; one instance per proxy."""

    def __init__(
        self,
        engine: GuardrailEngine,
        upstream: Upstream,
        trace: TraceLog,
        idle_timeout: float | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.engine = engine
        self.upstream = upstream
        self.trace = trace
        self.idle_timeout = idle_timeout
        self.clock = clock
        self._sessions: dict[str, _Session] = {}
        self._sessions_lock = threading.Lock()
        # Params the policy added per tool; stripped before forwarding.
        self._extra_params: dict[str, set[str]] = {}
        for req in engine.policy.requirements:
            rule = req.rule
            if rule is not None and rule.kind == "api_validation" and rule.extra_params:
                names = {split_extra_param(e)[0] for e in rule.extra_params}
                self._extra_params.setdefault(rule.tool, set()).update(names)

    # -- sessions -------------------------------------------------------------

    def session(self, session_id: str) -> _Session:
        now = self.clock()
        with self._sessions_lock:
            entry = self._sessions.get(session_id)
            if entry is not None and self.idle_timeout is not None:
                if now - entry.last_seen > self.idle_timeout:
                    entry = None  # evicted: stale state is discarded, fail closed
            if entry is None:
                entry = _Session(state=self.engine.new_session(session_id))
                self._sessions[session_id] = entry
            entry.last_seen = now
            return entry

    # -- frame handling ---------------------------------------------------------

    def handle_line(self, line: bytes | str) -> bytes:
        try:
            msg = decode_frame(line)
        except FrameError as e:
            return encode_frame(ErrorResponse(e.to_payload()))
        if isinstance(msg, ListRequest):
            return encode_frame(ListResponse(self.engine.active_catalog))
        if isinstance(msg, CallRequest):
            return self.handle_call(msg.call)
        return encode_frame(
            ErrorResponse(
                ErrorPayload(
                    kind="protocol_error",
                    message=f"{type(msg).__name__} frames are not accepted by the proxy",
                )
            )
        )

    def handle_call(self, call: ToolCall) -> bytes:
        entry = self.session(call.session_id)
        with entry.lock:
            return self._handle_call_locked(call, entry.state)

    def _error(self, call: ToolCall, payload: ErrorPayload) -> bytes:
        return encode_frame(ErrorResponse(payload))

    def _log(self, call: ToolCall, event: str, **extra) -> None:
        self.trace.append(
            {
                "session_id": call.session_id,
                "call_id": call.call_id,
                "event": event,
                "tool": call.tool,
                "args_hash": args_hash(call.args),
                **extra,
            }
        )

    def _handle_call_locked(self, call: ToolCall, session: SessionState) -> bytes:
        try:
            verdict = self.engine.evaluate_call(call, session)
        except UnknownToolError as e:
            self._log(call, "decision", verdict="schema_invalid")
            return self._error(
                call,
                ErrorPayload(kind="schema_invalid", message=str(e), data={"call_id": call.call_id}),
            )
        except SchemaInvalidError as e:
            self._log(call, "decision", verdict="schema_invalid")
            return self._error(
                call,
                ErrorPayload(kind="schema_invalid", message=str(e), data={"call_id": call.call_id}),
            )

        for violation in verdict.monitor_violations:
            self._log(call, "violation", requirement_id=violation.requirement_id)

        if verdict.decision == "deny":
            self._log(call, "decision", verdict="deny", requirement_id=verdict.requirement_id)
            return self._error(
                call,
                ErrorPayload(
                    kind="guardrail_denied",
                    message=verdict.message,
                    requirement_id=verdict.requirement_id,
                    rule_kind=verdict.rule_kind,
                    data={"call_id": call.call_id},
                ),
            )
        if verdict.decision == "needs_confirmation":
            self._log(
                call, "decision", verdict="needs_confirmation",
                requirement_id=verdict.requirement_id,
            )
            return self._error(
                call,
                ErrorPayload(
                    kind="confirmation_required",
                    message=verdict.message,
                    requirement_id=verdict.requirement_id,
                    rule_kind=verdict.rule_kind,
                    data={
                        "call_id": call.call_id,
                        "confirmation_token": verdict.token,
                        "summary": verdict.summary,
                    },
                ),
            )

        self._log(call, "decision", verdict="allow")
        self.engine.commit_call(call, session)
        upstream_args = self._strip_extras(call)
        try:
            result = self.upstream.call(call.tool, upstream_args, call.call_id)
        except UpstreamUnavailable as e:
            self._log(call, "result", status="upstream_error")
            return self._error(
                call,
                ErrorPayload(kind="upstream_error", message=str(e), data={"call_id": call.call_id}),
            )
        processed = self.engine.process_result(call, result, session)
        if processed.withheld is not None:
            v = processed.withheld
            self._log(call, "decision", verdict="deny", requirement_id=v.requirement_id)
            return self._error(
                call,
                ErrorPayload(
                    kind="guardrail_denied",
                    message=v.message,
                    requirement_id=v.requirement_id,
                    rule_kind=v.rule_kind,
                    data={"call_id": call.call_id},
                ),
            )
        outbound = processed.result
        self._log(
            call, "result", status=outbound.status,
            redactions=[{"path": p, "label": l} for p, l in outbound.redactions],
        )
        return encode_frame(CallResponse(outbound))

    def _strip_extras(self, call: ToolCall) -> dict[str, Value]:
        if self.engine.mode != ENFORCE:
            return call.args
        extras = self._extra_params.get(call.tool)
        if not extras:
            return call.args
        return {k: v for k, v in call.args.items() if k not in extras}


# ---------------------------------------------------------------------------
# Configuration and TCP serving
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProxyConfig:
    listen: str
    upstream: str
    policy_path: str
    mode: str = ENFORCE
    trace_log: str | None = None
    idle_timeout: float | None = None
    db_fixture: str | None = None
    db_tools: tuple[tuple[str, str, str], ...] = ()  # (collection, tool, key param)


class ConfigError(Exception):
    pass


class PolicyConfigError(ConfigError):
    """The policy file is unusable: parse failure or unresolved references."""


def parse_proxy_config(text: str) -> ProxyConfig:
    try:
        lines = linedoc.parse_lines(text)
    except linedoc.DocError as e:
        raise ConfigError(str(e))
    cursor = linedoc.Cursor(lines)
    values: dict[str, object] = {}
    db_tools: list[tuple[str, str, str]] = []
    opener = cursor.peek()
    if opener is None or opener.keyword != "proxy" or opener.indent != 0:
        raise ConfigError("config must start with a 'proxy' block")
    cursor.next()
    for line in cursor.block(0):
        if line.keyword == "db_tool":
            v = line.value
            if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, str) for x in v)):
                raise ConfigError(
                    f"line {line.line_no}: db_tool takes [collection, tool, key_param]"
                )
            db_tools.append((v[0], v[1], v[2]))
            continue
        values[line.keyword] = line.value
    if cursor.peek() is not None:
        raise ConfigError(f"line {cursor.peek().line_no}: only one proxy block is allowed")

    def need_str(key: str) -> str:
        v = values.get(key)
        if not isinstance(v, str):
            raise ConfigError(f"proxy config needs a string {key!r}")
        return v

    mode = values.get("mode", ENFORCE)
    if mode not in (ENFORCE, MONITOR):
        raise ConfigError(f"mode must be {ENFORCE} or {MONITOR}")
    listen = need_str("listen")
    upstream = need_str("upstream")
    if listen == upstream:
        raise ConfigError("listen and upstream endpoints must differ")
    timeout = values.get("idle_timeout")
    if timeout is not None and not isinstance(timeout, (int, float)):
        raise ConfigError("idle_timeout must be a number of seconds")
    trace = values.get("trace_log")
    if trace is not None and not isinstance(trace, str):
        raise ConfigError("trace_log must be a path string")
    fixture = values.get("db_fixture")
    if fixture is not None and not isinstance(fixture, str):
        raise ConfigError("db_fixture must be a path string")
    return ProxyConfig(
        listen=listen,
        upstream=upstream,
        policy_path=need_str("policy"),
        mode=str(mode),
        trace_log=trace,
        idle_timeout=float(timeout) if timeout is not None else None,
        db_fixture=fixture,
        db_tools=tuple(db_tools),
    )


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint {endpoint!r} must look like host:port")
    return host, int(port)


def build_core(config: ProxyConfig, upstream: Upstream | None = None) -> ProxyCore:
    """Assemble a ProxyCore from config: load + validate the policy against
    the upstream catalog, wire the db binding, open the trace log."""
    with open(config.policy_path, "r", encoding="utf-8") as fh:
        parsed = parse_policy(fh.read())
    if not parsed.ok:
        raise PolicyConfigError(
            "policy failed to parse: " + "; ".join(str(d) for d in parsed.diagnostics)
        )
    if upstream is None:
        upstream = SocketUpstream(config.upstream)
    catalog = upstream.catalog()
    problems = [
        d for d in validate_policy(parsed.document, catalog) if d.severity == "error"
    ]
    if problems:
        raise PolicyConfigError(
            "policy does not fit the upstream catalog: "
            + "; ".join(str(d) for d in problems)
        )
    db: DataAccess
    if config.db_fixture is not None:
        db = FixtureDataAccess.from_file(config.db_fixture)
    elif config.db_tools:
        db = UpstreamDataAccess(upstream, {c: (t, p) for c, t, p in config.db_tools})
    else:
        db = NullDataAccess()
    engine = GuardrailEngine(parsed.document, catalog, db, mode=config.mode)
    trace = TraceLog(config.trace_log)
    return ProxyCore(
        engine=engine, upstream=upstream, trace=trace, idle_timeout=config.idle_timeout
    )


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        core: ProxyCore = self.server.core  # type: ignore[attr-defined]
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            response = core.handle_line(line)
            try:
                self.wfile.write(response)
                self.wfile.flush()
            except OSError:
                return


class LineServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, endpoint: str, core: ProxyCore):
        self.core = core
        super().__init__(split_endpoint(endpoint), _LineHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve_tcp(core: ProxyCore, listen: str) -> LineServer:
    """Bind and return the server; caller runs serve_forever (or a thread)."""
    return LineServer(listen, core)
