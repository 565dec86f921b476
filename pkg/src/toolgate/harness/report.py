"""Condition aggregation, significance testing, and table rendering.

The text table follows the evaluation layout: one row per condition with
Unsafe / Unk. / Safe percentages and first-attempt task completion, then
pairwise McNemar lines (per-task safety and per-task utility). Rendering
is a pure function of the report document so re-rendering from disk is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

from ..stats import McNemarResult, PairedOutcomes, mcnemar, pass_hat_1
from .runner import TaskResult


class ReportError(Exception):
    pass


@dataclass(frozen=True)
class ConditionSummary:
    condition: str
    tasks: int
    unsafe: int
    unknown: int
    safe: int
    benign_total: int
    benign_successes: int

    @property
    def pass1(self) -> Fraction:
        return pass_hat_1(self.benign_successes, self.benign_total)


def aggregate_report(results_by_condition: dict[str, list[TaskResult]]) -> dict:
    """Fold per-task results into the run report document.

    All conditions must cover the same task set; McNemar pairs conditions
    over per-task safety (safe vs not) and per-task benign utility.
    """
    conditions = list(results_by_condition)
    if not conditions:
        raise ReportError("no conditions to report")
    task_sets = {
        cond: tuple(sorted(r.task_id for r in results))
        for cond, results in results_by_condition.items()
    }
    reference = task_sets[conditions[0]]
    for cond, ids in task_sets.items():
        if ids != reference:
            raise ReportError(f"condition {cond!r} ran a different task set")

    summaries: dict[str, ConditionSummary] = {}
    violations: dict[str, dict[str, int]] = {}
    outcomes: dict[str, dict[str, dict]] = {}
    for cond, results in results_by_condition.items():
        ordered = sorted(results, key=lambda r: r.task_id)
        benign = [r for r in ordered if r.category == "benign"]
        summaries[cond] = ConditionSummary(
            condition=cond,
            tasks=len(ordered),
            unsafe=sum(1 for r in ordered if r.safety == "unsafe"),
            unknown=sum(1 for r in ordered if r.safety == "unknown"),
            safe=sum(1 for r in ordered if r.safety == "safe"),
            benign_total=len(benign),
            benign_successes=sum(1 for r in benign if r.success),
        )
        counts: dict[str, int] = {}
        for r in ordered:
            for _, req_id in r.unsafe_evidence:
                if req_id:
                    counts[req_id] = counts.get(req_id, 0) + 1
        violations[cond] = dict(sorted(counts.items()))
        outcomes[cond] = {
            r.task_id: {
                "category": r.category,
                "safety": r.safety,
                "success": r.success,
                "turns": r.turns,
            }
            for r in ordered
        }

    mcnemar_rows = []
    for i, cond_a in enumerate(conditions):
        for cond_b in conditions[i + 1 :]:
            a_by_id = outcomes[cond_a]
            b_by_id = outcomes[cond_b]
            safety_pairs = [
                (a_by_id[t]["safety"] == "safe", b_by_id[t]["safety"] == "safe")
                for t in reference
            ]
            utility_pairs = [
                (bool(a_by_id[t]["success"]), bool(b_by_id[t]["success"]))
                for t in reference
                if a_by_id[t]["category"] == "benign"
            ]
            safety = mcnemar(PairedOutcomes.from_pairs(safety_pairs))
            utility = mcnemar(PairedOutcomes.from_pairs(utility_pairs))
            mcnemar_rows.append(
                {
                    "conditions": [cond_a, cond_b],
                    "safety": _mcnemar_doc(safety),
                    "utility": _mcnemar_doc(utility),
                }
            )

    return {
        "format": "toolgate-run-report",
        "version": 1,
        "conditions": conditions,
        "tasks": list(reference),
        "summaries": {
            cond: {
                "tasks": s.tasks,
                "unsafe": s.unsafe,
                "unknown": s.unknown,
                "safe": s.safe,
                "benign_total": s.benign_total,
                "benign_successes": s.benign_successes,
            }
            for cond, s in summaries.items()
        },
        "violations_by_requirement": violations,
        "outcomes": outcomes,
        "mcnemar": mcnemar_rows,
    }


def _mcnemar_doc(result: McNemarResult) -> dict:
    doc = {"b": result.b, "c": result.c, "method": result.method, "p_value": result.p_value}
    if result.statistic is not None:
        doc["statistic"] = result.statistic
    return doc


def serialize_report(report: dict) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def _pct(count: int, total: int) -> str:
    return f"{100.0 * count / total:.1f}%"


def render_table(report: dict) -> str:
    """Fixed-width condition table plus McNemar lines; pure re-render."""
    lines = []
    header = f"{'Condition':<20}{'Unsafe':>8}{'Unk.':>8}{'Safe':>8}{'Pass^1':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for cond in report["conditions"]:
        s = report["summaries"][cond]
        total = s["tasks"]
        pass1 = pass_hat_1(s["benign_successes"], s["benign_total"])
        lines.append(
            f"{cond:<20}"
            f"{_pct(s['unsafe'], total):>8}"
            f"{_pct(s['unknown'], total):>8}"
            f"{_pct(s['safe'], total):>8}"
            f"{float(pass1):>8.2f}"
        )
    for row in report.get("mcnemar", []):
        a, b = row["conditions"]
        s, u = row["safety"], row["utility"]
        lines.append("")
        lines.append(
            f"McNemar {a} vs {b}: "
            f"safety p={s['p_value']!r} ({s['method']}, b={s['b']}, c={s['c']}); "
            f"utility p={u['p_value']!r} ({u['method']}, b={u['b']}, c={u['c']})"
        )
    return "\n".join(lines) + "\n"


def render_violation_breakdown(report: dict) -> str:
    lines = []
    for cond in report["conditions"]:
        counts = report["violations_by_requirement"].get(cond, {})
        lines.append(f"{cond}: violations by requirement")
        if not counts:
            lines.append("  (none)")
        for req_id, n in counts.items():
            lines.append(f"  {req_id:<22}{n:>5}")
    return "\n".join(lines) + "\n"
