"""Aggregate statistics over completed runs.

Reproduces the engine-side analyses: initial vs final score medians, the
median-ratio improvement percentage, per-generation improvement curves,
generations-to-convergence counts, and which operator produced each accepted
improvement. A report is a pure function of the run logs it reads.
"""

from __future__ import annotations

import json
import statistics
from pathlib import Path

from .runlog import RunLog, read_run_log

__all__ = ["collect_run_logs", "compute_report", "format_report"]


def collect_run_logs(runs_dir) -> list:
    """All run logs under a directory, located via their manifests.

    Returns (manifest, RunLog) pairs sorted by run id for determinism.
    """
    runs_dir = Path(runs_dir)
    found = []
    for manifest_path in sorted(runs_dir.rglob("manifest.json")):
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        log_path = manifest_path.parent / manifest["paths"]["run_log"]
        found.append((manifest, read_run_log(log_path)))
    found.sort(key=lambda pair: pair[0].get("run_id", ""))
    return found


def _run_row(manifest: dict, log: RunLog) -> dict:
    initial = log.header["initial_score"]
    result = log.result or {}
    final = result.get("final_score", initial)
    accepted = sum(1 for g in log.generations if g.accepted is not None)
    return {
        "run_id": manifest.get("run_id"),
        "prompt": manifest.get("prompt"),
        "category": manifest.get("category"),
        "initial_score": initial,
        "final_score": final,
        "improvement": final - initial,
        "generations": len(log.generations),
        "accepted_generations": accepted,
        "termination_reason": result.get("termination_reason"),
    }


def _curves(logs) -> dict:
    """Mean/stdev of cumulative improvement at each generation index.

    Runs that converged earlier carry their final value forward, so every
    run contributes to every generation index.
    """
    max_generation = max((len(log.generations) for _, log in logs), default=0)
    curves = {"generation": [], "mean_improvement": [], "stdev_improvement": []}
    for generation in range(1, max_generation + 1):
        improvements = []
        for _, log in logs:
            initial = log.header["initial_score"]
            incumbent = initial
            for g in log.generations[:generation]:
                incumbent = g.incumbent_score_after
            improvements.append(incumbent - initial)
        curves["generation"].append(generation)
        curves["mean_improvement"].append(statistics.mean(improvements))
        curves["stdev_improvement"].append(
            statistics.pstdev(improvements) if len(improvements) > 1 else 0.0
        )
    return curves


def _operator_attribution(logs) -> dict:
    """Accepted-mutation counts and score deltas, keyed by generation index."""
    attribution = {}
    for _, log in logs:
        incumbent = log.header["initial_score"]
        for g in log.generations:
            if g.accepted is not None:
                delta = g.incumbent_score_after - incumbent
                per_gen = attribution.setdefault(str(g.index), {})
                entry = per_gen.setdefault(g.accepted.kind, {"count": 0, "total_delta": 0.0})
                entry["count"] += 1
                entry["total_delta"] += delta
            incumbent = g.incumbent_score_after
    for per_gen in attribution.values():
        for entry in per_gen.values():
            entry["mean_delta"] = entry["total_delta"] / entry["count"]
    return attribution


def _aggregate(logs) -> dict:
    rows = [_run_row(manifest, log) for manifest, log in logs]
    initials = [row["initial_score"] for row in rows]
    finals = [row["final_score"] for row in rows]
    median_initial = statistics.median(initials)
    median_final = statistics.median(finals)
    convergence = {}
    for row in rows:
        convergence[str(row["generations"])] = convergence.get(str(row["generations"]), 0) + 1
    return {
        "runs": rows,
        "run_count": len(rows),
        "median_initial": median_initial,
        "median_final": median_final,
        "median_improvement": statistics.median(row["improvement"] for row in rows),
        # paper-style percentage: how much better the median final score is
        "median_improvement_pct": (median_final / median_initial - 1.0) * 100.0
        if median_initial != 0
        else None,
        "generations_to_convergence": dict(sorted(convergence.items(), key=lambda kv: int(kv[0]))),
        "improvement_by_generation": _curves(logs),
        "operator_attribution": _operator_attribution(logs),
    }


def compute_report(runs_dir, by_category: bool = False) -> dict:
    logs = collect_run_logs(runs_dir)
    if not logs:
        raise ValueError(f"no completed runs found under {runs_dir}")
    report = _aggregate(logs)
    if by_category:
        categories = {}
        for manifest, log in logs:
            categories.setdefault(manifest.get("category") or "uncategorized", []).append(
                (manifest, log)
            )
        report["categories"] = {
            name: _aggregate(group) for name, group in sorted(categories.items())
        }
    return report


def format_report(report: dict) -> str:
    lines = [
        f"runs: {report['run_count']}",
        f"median initial score: {report['median_initial']:.4f}",
        f"median final score:   {report['median_final']:.4f}",
        f"median improvement:   {report['median_improvement']:.4f}",
    ]
    if report["median_improvement_pct"] is not None:
        lines.append(f"median improvement (of medians): {report['median_improvement_pct']:.2f}%")
    lines.append("generations to convergence: " + json.dumps(report["generations_to_convergence"]))
    for generation, per_gen in sorted(
        report["operator_attribution"].items(), key=lambda kv: int(kv[0])
    ):
        parts = [
            f"{op}×{entry['count']} (mean +{entry['mean_delta']:.4f})"
            for op, entry in sorted(per_gen.items())
        ]
        lines.append(f"  gen {generation} accepted: " + ", ".join(parts))
    if "categories" in report:
        lines.append("per-category medians:")
        for name, sub in report["categories"].items():
            lines.append(
                f"  {name}: initial {sub['median_initial']:.4f} -> final {sub['median_final']:.4f}"
                f" ({sub['run_count']} runs)"
            )
    return "\n".join(lines)
