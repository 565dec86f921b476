"""Task suite files: tasks, named snapshots, and expected final states.

Expected states are declared as field-level edits on a base snapshot, so
the utility oracle is spelled out in the fixture rather than derived from
the tool implementations under test.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import linedoc
from ..values import Value, deep_copy

CATEGORIES = ("benign", "adversarial")


class SuiteError(Exception):
    pass


@dataclass(frozen=True)
class Task:
    id: str
    category: str
    script: str
    snapshot: str
    expected: str | None = None  # benign only
    targets: tuple[str, ...] = ()  # adversarial only


@dataclass
class Suite:
    domain: str
    tasks: list[Task]
    snapshots: dict[str, dict[str, dict[str, dict]]]
    policy_path: str | None = None  # relative to the suite file
    db_path: str | None = None


def load_suite(text: str, base_state: dict[str, dict[str, dict]]) -> Suite:
    try:
        lines = linedoc.parse_lines(text)
    except linedoc.DocError as e:
        raise SuiteError(str(e))
    cursor = linedoc.Cursor(lines)
    domain = ""
    policy_path: str | None = None
    db_path: str | None = None
    snapshots: dict[str, dict] = {"base": deep_copy(base_state)}
    tasks: list[Task] = []
    seen_ids: set[str] = set()

    while (line := cursor.peek()) is not None:
        cursor.next()
        if line.indent != 0:
            raise SuiteError(f"line {line.line_no}: unexpected indentation")
        body = cursor.block(0)
        attrs = {b.keyword: b for b in body if b.indent == 1}

        if line.keyword == "suite":
            domain = _str_attr(attrs, "domain")
            if "policy" in attrs:
                policy_path = _str_attr(attrs, "policy")
            if "db" in attrs:
                db_path = _str_attr(attrs, "db")
        elif line.keyword == "snapshot":
            name = line.value
            if not isinstance(name, str) or name in snapshots:
                raise SuiteError(f"line {line.line_no}: bad or duplicate snapshot name")
            source = _str_attr(attrs, "from")
            if source not in snapshots:
                raise SuiteError(f"line {line.line_no}: unknown base snapshot {source!r}")
            state = deep_copy(snapshots[source])
            for edit in (b for b in body if b.keyword == "set"):
                _apply_edit(state, edit)
            snapshots[name] = state
        elif line.keyword == "task":
            task = _parse_task(line, attrs)
            if task.id in seen_ids:
                raise SuiteError(f"line {line.line_no}: duplicate task id {task.id!r}")
            seen_ids.add(task.id)
            tasks.append(task)
        else:
            raise SuiteError(f"line {line.line_no}: unknown block {line.keyword!r}")

    for task in tasks:
        if task.snapshot not in snapshots:
            raise SuiteError(f"task {task.id}: unknown snapshot {task.snapshot!r}")
        if task.expected is not None and task.expected not in snapshots:
            raise SuiteError(f"task {task.id}: unknown expected snapshot {task.expected!r}")
    return Suite(
        domain=domain,
        tasks=tasks,
        snapshots=snapshots,
        policy_path=policy_path,
        db_path=db_path,
    )


def _str_attr(attrs: dict, key: str) -> str:
    line = attrs.get(key)
    if line is None or not isinstance(line.value, str):
        raise SuiteError(f"missing string attribute {key!r}")
    return line.value


def _apply_edit(state: dict, edit: linedoc.Line) -> None:
    v = edit.value
    if not (isinstance(v, list) and len(v) == 4 and all(isinstance(x, str) for x in v[:3])):
        raise SuiteError(
            f"line {edit.line_no}: set takes [collection, key, field, value]"
        )
    collection, key, field_name, value = v
    try:
        state[collection][key][field_name] = value
    except KeyError:
        raise SuiteError(f"line {edit.line_no}: no record {collection}/{key}")


def _parse_task(line: linedoc.Line, attrs: dict) -> Task:
    task_id = line.value
    if not isinstance(task_id, str) or not task_id:
        raise SuiteError(f"line {line.line_no}: task blocks need a string id")
    category = attrs.get("category")
    if category is None or category.value not in CATEGORIES:
        raise SuiteError(f"task {task_id}: category must be benign or adversarial")
    script = _str_attr(attrs, "script")
    snapshot = _str_attr(attrs, "snapshot")
    expected = None
    targets: tuple[str, ...] = ()
    if category.value == "benign":
        expected = _str_attr(attrs, "expected")
    else:
        t = attrs.get("targets")
        if t is None or not isinstance(t.value, list) or not t.value:
            raise SuiteError(f"task {task_id}: adversarial tasks name at least one target")
        targets = tuple(t.value)
    return Task(
        id=task_id,
        category=category.value,
        script=script,
        snapshot=snapshot,
        expected=expected,
        targets=targets,
    )
