"""Structured value trees and their canonical forms.

Values are plain Python trees: ``None``, ``bool``, ``int``/``float``,
``str``, ``dict`` (str keys) and ``list``. Everything that must be stable
across runs and implementations (argument hashes, taint entries, template
rendering) goes through the canonical forms defined here.
"""

from __future__ import annotations

from typing import Any, Iterator

Value = Any  # None | bool | int | float | str | dict[str, "Value"] | list["Value"]

SCALAR_KINDS = ("string", "number", "boolean", "null")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


class ValueError_(Exception):
    """Raised for malformed value trees (bad kinds, unstringable keys)."""


def value_kind(v: Value) -> str:
    """Classify a node: string/number/boolean/null/object/array.

    ``bool`` is checked before ``int`` because it subclasses it.
    """
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, dict):
        return "object"
    if isinstance(v, list):
        return "array"
    raise ValueError_(f"unsupported value of type {type(v).__name__}")


def is_scalar(v: Value) -> bool:
    return value_kind(v) in SCALAR_KINDS


def canonical_number(n: int | float) -> str:
    """Canonical text for a number: integral values print without a point."""
    if isinstance(n, bool):
        raise ValueError_("boolean is not a number")
    if isinstance(n, int):
        return str(n)
    if n != n or n in (float("inf"), float("-inf")):
        raise ValueError_("non-finite numbers have no canonical form")
    if n.is_integer():
        return str(int(n))
    return repr(n)


def canonical_scalar(v: Value) -> str:
    """Canonical text for a scalar leaf (used in taint entries and renders)."""
    kind = value_kind(v)
    if kind == "string":
        return v
    if kind == "number":
        return canonical_number(v)
    if kind == "boolean":
        return "true" if v else "false"
    if kind == "null":
        return "null"
    raise ValueError_(f"{kind} is not a scalar")


def _canon(v: Value, out: list[str]) -> None:
    kind = value_kind(v)
    if kind == "object":
        out.append("{")
        for i, key in enumerate(sorted(v)):
            if i:
                out.append(",")
            out.append(_quote(key))
            out.append(":")
            _canon(v[key], out)
        out.append("}")
    elif kind == "array":
        out.append("[")
        for i, item in enumerate(v):
            if i:
                out.append(",")
            _canon(item, out)
        out.append("]")
    elif kind == "string":
        out.append(_quote(v))
    else:
        out.append(canonical_scalar(v))


def _quote(s: str) -> str:
    import json

    return json.dumps(s, ensure_ascii=False)


def canonical_json(v: Value) -> str:
    """Deterministic serialization: sorted keys, canonical number form."""
    out: list[str] = []
    _canon(v, out)
    return "".join(out)


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def args_hash(args: dict[str, Value]) -> str:
    """64-bit FNV-1a over the canonical serialization, as 16 hex digits."""
    return format(fnv1a64(canonical_json(args).encode("utf-8")), "016x")


Path = tuple[Any, ...]  # str segments for fields, int segments for indices


def format_path(path: Path) -> str:
    parts: list[str] = []
    for seg in path:
        if isinstance(seg, int):
            parts.append(f"[{seg}]")
        else:
            parts.append(("." if parts else "") + seg)
    return "".join(parts)


def get_path(v: Value, path: Path) -> Value:
    """Walk a path; raises KeyError/IndexError/TypeError on a miss."""
    node = v
    for seg in path:
        if isinstance(seg, int):
            if not isinstance(node, list):
                raise TypeError(f"not an array at {format_path(path)}")
            node = node[seg]
        else:
            if not isinstance(node, dict):
                raise TypeError(f"not an object at {format_path(path)}")
            node = node[seg]
    return node


def iter_scalars(v: Value, prefix: Path = ()) -> Iterator[tuple[Path, Value]]:
    """Yield (path, scalar) for every primitive leaf, depth-first."""
    kind = value_kind(v)
    if kind == "object":
        for key in v:
            yield from iter_scalars(v[key], prefix + (key,))
    elif kind == "array":
        for i, item in enumerate(v):
            yield from iter_scalars(item, prefix + (i,))
    else:
        yield prefix, v


def deep_copy(v: Value) -> Value:
    kind = value_kind(v)
    if kind == "object":
        return {k: deep_copy(x) for k, x in v.items()}
    if kind == "array":
        return [deep_copy(x) for x in v]
    return v


def parse_dotted_path(text: str) -> Path:
    """Parse ``a.b[0].c`` / ``a.b[*]`` into path segments.

    ``*`` index segments come back as the string ``"*"`` (pattern use only).
    """
    segs: list[Any] = []
    i, n = 0, len(text)
    while i < n:
        if text[i] == ".":
            if not segs or i + 1 >= n:
                raise ValueError_(f"dangling '.' in path {text!r}")
            i += 1
            continue
        if text[i] == "[":
            end = text.find("]", i)
            if end < 0:
                raise ValueError_(f"unclosed '[' in path {text!r}")
            body = text[i + 1 : end]
            if body == "*":
                segs.append("*")
            elif body.isdigit():
                segs.append(int(body))
            else:
                raise ValueError_(f"bad index {body!r} in path {text!r}")
            i = end + 1
            continue
        start = i
        while i < n and (text[i].isalnum() or text[i] == "_"):
            i += 1
        if i == start:
            raise ValueError_(f"unexpected {text[i]!r} at column {i} in path {text!r}")
        seg = text[start:i]
        if seg[0].isdigit():
            raise ValueError_(f"field {seg!r} may not start with a digit in {text!r}")
        segs.append(seg)
    if not segs:
        raise ValueError_("empty path")
    return tuple(segs)
