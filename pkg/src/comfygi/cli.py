"""Command-line surface: run, apply-patch, batch, report.

Backend URLs resolve flag > environment > default, with the environment
variables COMFYGI_COMFYUI_URL, COMFYGI_OLLAMA_URL and COMFYGI_SCORER_URL.
Timestamps honor SOURCE_DATE_EPOCH so runs can be made byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from .backends import (
    BackendFailure,
    ComfyUIEvaluator,
    NullLlm,
    OllamaLlm,
    SimulatedEvaluator,
    load_landscape,
)
from .mutations import MutationConfig, default_mutation_config, load_statement_pool
from .patch import Patch, apply_patch, read_patch, write_patch
from .report import compute_report, format_report
from .rng import derive_child_seed
from .runlog import write_run_log
from .search import OPERATORS, SearchConfig, planned_slots_per_generation, run_hill_climb
from .workflow import (
    parse_workflow,
    resolve_roles,
    serialize_workflow,
    set_field,
    workflow_hash,
)

logger = logging.getLogger(__name__)

DEFAULT_COMFYUI_URL = "http://127.0.0.1:8188"
DEFAULT_OLLAMA_URL = "http://127.0.0.1:11434"
DEFAULT_SCORER_URL = "http://127.0.0.1:8200"


class CliError(Exception):
    pass


def _now_iso() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(epoch) if epoch else time.time()
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _resolve_url(flag_value, env_name: str, default: str) -> str:
    if flag_value:
        return flag_value
    return os.environ.get(env_name) or default


def _load_workflow(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read workflow {path}: {exc}") from exc
    return parse_workflow(text)


def _bundled_prompts_path():
    return resources.files("comfygi").joinpath("data").joinpath("benchmark_prompts.tsv")


def read_prompts_tsv(path) -> list:
    """Benchmark prompts: UTF-8 TSV of ``category<TAB>prompt`` rows."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise CliError(f"{path}: line {line_number} is not category<TAB>prompt")
            category, prompt = line.split("\t", 1)
            entries.append((category.strip(), prompt))
    return entries


def _mutation_config(args) -> MutationConfig:
    cfg = default_mutation_config()
    overrides = {}
    if getattr(args, "checkpoint_pool", None):
        overrides["checkpoint_pool"] = load_statement_pool(args.checkpoint_pool)
    if getattr(args, "positive_pool", None):
        overrides["positive_statement_pool"] = load_statement_pool(args.positive_pool)
    if getattr(args, "negative_pool", None):
        overrides["negative_statement_pool"] = load_statement_pool(args.negative_pool)
    if overrides:
        cfg = MutationConfig(
            checkpoint_pool=overrides.get("checkpoint_pool", cfg.checkpoint_pool),
            positive_statement_pool=overrides.get(
                "positive_statement_pool", cfg.positive_statement_pool
            ),
            negative_statement_pool=overrides.get(
                "negative_statement_pool", cfg.negative_statement_pool
            ),
            llm_models=cfg.llm_models,
            llm_temperature_range=cfg.llm_temperature_range,
        )
    return cfg


def _make_backend(args):
    """Returns (evaluator, backend_descriptor)."""
    if args.backend == "simulated":
        if not args.landscape:
            raise CliError("--backend simulated requires --landscape PATH")
        landscape = load_landscape(args.landscape)
        return SimulatedEvaluator(landscape), {
            "kind": "simulated",
            "landscape": str(args.landscape),
        }
    comfyui_url = _resolve_url(args.comfyui_url, "COMFYGI_COMFYUI_URL", DEFAULT_COMFYUI_URL)
    scorer_url = _resolve_url(args.scorer_url, "COMFYGI_SCORER_URL", DEFAULT_SCORER_URL)
    evaluator = ComfyUIEvaluator(comfyui_url, scorer_url, timeout=args.generation_timeout)
    return evaluator, {"kind": "comfyui", "comfyui_url": comfyui_url, "scorer_url": scorer_url}


def _make_llm(args):
    explicit = args.ollama_url or os.environ.get("COMFYGI_OLLAMA_URL")
    if explicit:
        return OllamaLlm(explicit), {"ollama_url": explicit}
    if args.backend == "comfyui":
        return OllamaLlm(DEFAULT_OLLAMA_URL), {"ollama_url": DEFAULT_OLLAMA_URL}
    # simulated runs without an explicit LLM skip rewrite slots deterministically
    return NullLlm(), {"ollama_url": None}


def _parse_operators(raw: str) -> tuple:
    ops = tuple(op.strip() for op in raw.split(",") if op.strip())
    unknown = set(ops) - set(OPERATORS)
    if unknown:
        raise CliError(f"unknown operators: {sorted(unknown)} (choose from {', '.join(OPERATORS)})")
    if not ops:
        raise CliError("--operators must name at least one operator")
    return ops


def execute_run(
    *,
    workflow_path,
    prompt: str,
    category,
    out_dir,
    run_seed: int,
    args,
    run_id=None,
) -> dict:
    """Shared driver for ``run`` and ``batch``: one hill-climb run plus artifacts."""
    baseline = _load_workflow(workflow_path)
    roles = resolve_roles(baseline)
    baseline = set_field(baseline, roles.positive_prompt_id, "text", prompt)

    search_cfg = SearchConfig(
        neighbors_per_operator=args.neighbors,
        enabled_operators=_parse_operators(args.operators),
        max_generations=args.max_generations,
        run_seed=run_seed,
        randomize_initial_checkpoint=args.randomize_initial,
        randomize_initial_seed=args.randomize_initial,
        max_concurrent_evaluations=args.concurrency,
    )
    mcfg = _mutation_config(args)
    evaluator, backend_descriptor = _make_backend(args)
    llm, llm_descriptor = _make_llm(args)

    if run_id is None:
        run_id = f"run-{derive_child_seed(run_seed, workflow_hash(baseline), prompt):016x}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = run_hill_climb(baseline, search_cfg, mcfg, evaluator, llm, prompt_context=prompt)

    (out_dir / "baseline_workflow.json").write_text(
        serialize_workflow(result.baseline), encoding="utf-8"
    )
    (out_dir / "optimized_workflow.json").write_text(
        serialize_workflow(result.optimized), encoding="utf-8"
    )

    config_snapshot = {
        "neighbors_per_operator": search_cfg.neighbors_per_operator,
        "enabled_operators": list(search_cfg.enabled_operators),
        "planned_slots_per_generation": planned_slots_per_generation(search_cfg),
        "max_generations": search_cfg.max_generations,
        "randomize_initial_checkpoint": search_cfg.randomize_initial_checkpoint,
        "randomize_initial_seed": search_cfg.randomize_initial_seed,
    }
    header = {
        "run_id": run_id,
        "prompt": prompt,
        "category": category,
        "run_seed": run_seed,
        "baseline_hash": workflow_hash(result.baseline),
        "initial_score": result.initial_score,
        "config": config_snapshot,
        "backend": {**backend_descriptor, **llm_descriptor},
    }
    write_run_log(out_dir / "run.jsonl", header, result)

    patch = Patch(
        baseline_hash=result.patch.baseline_hash,
        mutations=result.patch.mutations,
        metadata={
            **result.patch.metadata,
            "run_id": run_id,
            "created_at": _now_iso(),
        },
    )
    write_patch(patch, out_dir / "patch.json")

    paths = {
        "run_log": "run.jsonl",
        "patch": "patch.json",
        "baseline_workflow": "baseline_workflow.json",
        "optimized_workflow": "optimized_workflow.json",
    }
    if backend_descriptor["kind"] == "comfyui":
        for name, wf in (("initial", result.baseline), ("final", result.optimized)):
            try:
                _, image_bytes = evaluator.evaluate_with_image(wf, prompt)
            except Exception as exc:  # archival is best-effort
                logger.warning("could not archive %s image: %s", name, exc)
                continue
            image_path = out_dir / f"{name}.png"
            image_path.write_bytes(image_bytes)
            paths[f"{name}_image"] = image_path.name

    manifest = {
        "run_id": run_id,
        "prompt": prompt,
        "category": category,
        "run_seed": run_seed,
        "created_at": _now_iso(),
        "config": config_snapshot,
        "backend": {**backend_descriptor, **llm_descriptor},
        "paths": paths,
        "initial_score": result.initial_score,
        "final_score": result.final_score,
        "generations": len(result.generations),
        "accepted_generations": len(result.patch.mutations),
        "evaluations_used": result.evaluations_used,
        "termination_reason": result.termination_reason,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return manifest


def _cmd_run(args) -> int:
    out_dir = args.out or "comfygi-out"
    manifest = execute_run(
        workflow_path=args.workflow,
        prompt=args.prompt,
        category=args.category,
        out_dir=out_dir,
        run_seed=args.seed,
        args=args,
    )
    print(
        f"initial score {manifest['initial_score']:.4f} | "
        f"final score {manifest['final_score']:.4f} | "
        f"generations {manifest['generations']} | "
        f"{manifest['termination_reason']}"
    )
    print(f"artifacts in {out_dir}")
    return 0 if manifest["termination_reason"] != "backend_failure" else 1


def _cmd_apply_patch(args) -> int:
    workflow = _load_workflow(args.workflow)
    patch = read_patch(args.patch)
    optimized = apply_patch(workflow, patch, force=args.force)
    Path(args.out).write_text(serialize_workflow(optimized), encoding="utf-8")
    print(f"wrote {args.out} ({len(patch.mutations)} mutation(s) applied)")
    return 0


def _cmd_batch(args) -> int:
    if args.prompts:
        entries = read_prompts_tsv(args.prompts)
        prompts_source = str(args.prompts)
    else:
        with resources.as_file(_bundled_prompts_path()) as p:
            entries = read_prompts_tsv(p)
        prompts_source = "bundled"
    if not entries:
        raise CliError("prompts file contains no entries")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for prompt_index, (category, prompt) in enumerate(entries):
        for replicate in range(args.runs_per_prompt):
            jobs.append(
                {
                    "run_id": f"p{prompt_index:03d}-r{replicate:02d}",
                    "run_seed": derive_child_seed(args.batch_seed, prompt_index, replicate),
                    "prompt": prompt,
                    "category": category,
                }
            )

    def run_one(job):
        try:
            manifest = execute_run(
                workflow_path=args.workflow,
                prompt=job["prompt"],
                category=job["category"],
                out_dir=out_dir / job["run_id"],
                run_seed=job["run_seed"],
                args=args,
                run_id=job["run_id"],
            )
            return {
                "run_id": job["run_id"],
                "prompt": job["prompt"],
                "category": job["category"],
                "status": "completed",
                "final_score": manifest["final_score"],
            }, None
        except Exception as exc:  # noqa: BLE001 - a failed run must not stop the batch
            logger.error("run %s failed: %s", job["run_id"], exc)
            return {
                "run_id": job["run_id"],
                "prompt": job["prompt"],
                "category": job["category"],
                "status": "failed",
            }, {"run_id": job["run_id"], "prompt": job["prompt"], "error": str(exc)}

    # each run owns its output subdirectory, so runs can execute concurrently;
    # results are assembled in job order either way
    if args.parallel_runs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.parallel_runs) as pool:
            outcomes = list(pool.map(run_one, jobs))
    else:
        outcomes = [run_one(job) for job in jobs]
    runs = [run for run, _ in outcomes]
    failures = [failure for _, failure in outcomes if failure is not None]
    summary = {
        "batch_seed": args.batch_seed,
        "prompts_file": prompts_source,
        "runs_per_prompt": args.runs_per_prompt,
        "runs": runs,
        "failures": failures,
    }
    (out_dir / "batch.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    completed = sum(1 for r in runs if r["status"] == "completed")
    print(f"batch complete: {completed}/{len(runs)} runs succeeded; summary in {out_dir}/batch.json")
    return 0 if not failures else 1


def _cmd_report(args) -> int:
    report = compute_report(args.runs, by_category=args.by_category)
    text = format_report(report)
    print(text)
    json_path = Path(args.json) if args.json else Path(args.runs) / "report.json"
    json_path.write_text(
        json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    print(f"json report written to {json_path}")
    return 0


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=("comfyui", "simulated"), default="simulated")
    parser.add_argument("--neighbors", type=int, default=30, metavar="N")
    parser.add_argument(
        "--operators",
        default=",".join(OPERATORS),
        help=f"comma-separated subset of: {', '.join(OPERATORS)}",
    )
    parser.add_argument("--max-generations", type=int, default=50, metavar="G")
    parser.add_argument("--comfyui-url", default=None, metavar="U")
    parser.add_argument("--ollama-url", default=None, metavar="U")
    parser.add_argument("--scorer-url", default=None, metavar="U")
    parser.add_argument("--landscape", default=None, metavar="PATH")
    parser.add_argument("--generation-timeout", type=float, default=300.0, metavar="SECONDS")
    parser.add_argument("--concurrency", type=int, default=1, metavar="K")
    parser.add_argument("--checkpoint-pool", default=None, metavar="PATH")
    parser.add_argument("--positive-pool", default=None, metavar="PATH")
    parser.add_argument("--negative-pool", default=None, metavar="PATH")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comfygi",
        description="Search-based optimizer for ComfyUI text-to-image workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize one workflow for one prompt")
    run.add_argument("--workflow", required=True, metavar="PATH")
    run.add_argument("--prompt", required=True, metavar="TEXT")
    run.add_argument("--category", default=None, metavar="NAME")
    run.add_argument("--seed", type=int, default=0, metavar="S")
    run.add_argument("--out", default=None, metavar="DIR")
    run.add_argument(
        "--randomize-initial",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="randomize the initial checkpoint and sampler seed",
    )
    _add_backend_flags(run)
    run.set_defaults(func=_cmd_run)

    apply_cmd = sub.add_parser("apply-patch", help="replay a patch onto a baseline workflow")
    apply_cmd.add_argument("--workflow", required=True, metavar="PATH")
    apply_cmd.add_argument("--patch", required=True, metavar="PATH")
    apply_cmd.add_argument("--out", required=True, metavar="PATH")
    apply_cmd.add_argument("--force", action="store_true", help="ignore baseline hash mismatch")
    apply_cmd.set_defaults(func=_cmd_apply_patch)

    batch = sub.add_parser("batch", help="one run per (prompt, replicate) over a prompts file")
    batch.add_argument("--workflow", required=True, metavar="PATH")
    batch.add_argument(
        "--prompts", default=None, metavar="PATH", help="TSV category<TAB>prompt; bundled set if omitted"
    )
    batch.add_argument("--runs-per-prompt", type=int, default=10, metavar="K")
    batch.add_argument("--batch-seed", type=int, default=0, metavar="S")
    batch.add_argument("--parallel-runs", type=int, default=1, metavar="N")
    batch.add_argument("--out", required=True, metavar="DIR")
    batch.add_argument(
        "--randomize-initial",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="default: on for the comfyui backend, off for simulated",
    )
    _add_backend_flags(batch)
    batch.set_defaults(func=_cmd_batch)

    report = sub.add_parser("report", help="aggregate statistics over completed runs")
    report.add_argument("--runs", required=True, metavar="DIR")
    report.add_argument("--by-category", action="store_true")
    report.add_argument("--json", default=None, metavar="PATH")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("COMFYGI_LOG_LEVEL", "WARNING"))
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "randomize_initial", None) is None and args.command == "batch":
        args.randomize_initial = args.backend == "comfyui"
    try:
        return args.func(args)
    except (CliError, BackendFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surface clean one-liners, not tracebacks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
