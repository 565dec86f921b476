"""Line-oriented structured documents (policies, proxy configs, task suites).

One statement per line: two-space indentation, a lowercase keyword, and an
optional value that is either a bare enum word or a single-line JSON value.
``#`` starts a full-line comment; blank lines separate blocks visually but
carry no meaning. The format exists so every bundled artifact is diffable
and golden-testable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

INDENT = "  "


@dataclass(frozen=True)
class Line:
    indent: int
    keyword: str
    value: Any  # None when absent; str bare word; parsed JSON otherwise
    bare: bool  # True when the value was a bare word, not JSON
    line_no: int


@dataclass
class DocError(Exception):
    message: str
    line_no: int
    column: int = 0

    def __str__(self) -> str:
        return f"line {self.line_no}, column {self.column}: {self.message}"


def _split_line(text: str, line_no: int) -> Line:
    expanded = text.rstrip("\n")
    stripped = expanded.lstrip(" ")
    pad = len(expanded) - len(stripped)
    if pad % len(INDENT) != 0:
        raise DocError("indentation must be multiples of two spaces", line_no, pad)
    if "\t" in expanded[:pad]:
        raise DocError("tabs are not allowed in indentation", line_no, 0)
    indent = pad // len(INDENT)
    parts = stripped.split(None, 1)
    keyword = parts[0]
    if not keyword.replace("_", "").isalpha() or keyword != keyword.lower():
        raise DocError(f"bad keyword {keyword!r}", line_no, pad)
    if len(parts) == 1:
        return Line(indent, keyword, None, False, line_no)
    rest = parts[1].strip()
    if rest[0] in "\"'[{" or rest[0] in "-0123456789":
        try:
            value = json.loads(rest)
        except json.JSONDecodeError as e:
            raise DocError(f"bad JSON value: {e.msg}", line_no, pad + e.pos)
        return Line(indent, keyword, value, False, line_no)
    if rest == "true" or rest == "false":
        return Line(indent, keyword, rest == "true", False, line_no)
    if not all(c.isalnum() or c in "_-" for c in rest):
        raise DocError(f"value {rest!r} is neither JSON nor a bare word", line_no, pad)
    return Line(indent, keyword, rest, True, line_no)


def parse_lines(text: str) -> list[Line]:
    lines: list[Line] = []
    for i, raw in enumerate(text.splitlines(), start=1):
        body = raw.strip()
        if not body or body.startswith("#"):
            continue
        lines.append(_split_line(raw, i))
    return lines


class Cursor:
    """Sequential reader over parsed lines with indent-scoped blocks."""

    def __init__(self, lines: list[Line]):
        self.lines = lines
        self.i = 0

    def peek(self) -> Optional[Line]:
        return self.lines[self.i] if self.i < len(self.lines) else None

    def next(self) -> Line:
        line = self.lines[self.i]
        self.i += 1
        return line

    def block(self, indent: int) -> list[Line]:
        """Consume all following lines indented strictly deeper than indent."""
        out = []
        while self.i < len(self.lines) and self.lines[self.i].indent > indent:
            out.append(self.lines[self.i])
            self.i += 1
        return out


def dump_value(v: Any) -> str:
    return json.dumps(v, ensure_ascii=False, separators=(", ", ": "))


@dataclass
class Writer:
    parts: list[str] = field(default_factory=list)

    def line(self, indent: int, keyword: str, value: Any = None, bare: bool = False) -> None:
        if value is None:
            self.parts.append(f"{INDENT * indent}{keyword}")
        elif bare:
            self.parts.append(f"{INDENT * indent}{keyword} {value}")
        else:
            self.parts.append(f"{INDENT * indent}{keyword} {dump_value(value)}")

    def blank(self) -> None:
        self.parts.append("")

    def text(self) -> str:
        return "\n".join(self.parts) + "\n"
