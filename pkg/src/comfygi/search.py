"""Hill climbing over workflow mutations.

Each generation samples a fixed budget of single-mutation neighbors of the
incumbent (baseline plus the patch so far), scores every candidate, and
accepts the best one only if it strictly improves on the incumbent. The run
ends at the first generation without improvement, at the generation cap, or
on a hard backend failure.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import BackendFailure, EvaluationError, EvaluatorBackend, NullLlm, check_finite_score
from .mutations import (
    InfeasibleMutation,
    LlmBackend,
    Mutation,
    MutationConfig,
    MutationError,
    apply_mutation,
    sample_checkpoint_mutation,
    sample_ksampler_mutation,
    sample_prompt_llm_mutation,
    sample_prompt_statement_mutation,
    sample_prompt_word_mutation,
)
from .patch import Patch
from .rng import Rng, derive_child_seed
from .workflow import Workflow, resolve_roles, set_field, validate_workflow, workflow_hash

logger = logging.getLogger(__name__)

__all__ = [
    "OPERATORS",
    "SearchConfig",
    "PlanSlot",
    "CandidateRecord",
    "GenerationRecord",
    "RunResult",
    "neighbor_plan",
    "planned_slots_per_generation",
    "run_hill_climb",
]

# Fixed operator order; slot plans and tie-breaking depend on it.
OPERATORS = ("checkpoint", "ksampler", "prompt_word", "prompt_statement", "prompt_llm")


@dataclass(frozen=True)
class SearchConfig:
    neighbors_per_operator: int = 30
    enabled_operators: tuple = OPERATORS
    max_generations: int = 50
    run_seed: int = 0
    randomize_initial_checkpoint: bool = False
    randomize_initial_seed: bool = False
    max_concurrent_evaluations: int = 1

    def __post_init__(self):
        if self.neighbors_per_operator < 1:
            raise ValueError("neighbors_per_operator must be >= 1")
        unknown = set(self.enabled_operators) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown operators: {sorted(unknown)}")
        if not self.enabled_operators:
            raise ValueError("at least one operator must be enabled")
        # normalize to canonical operator order
        object.__setattr__(
            self,
            "enabled_operators",
            tuple(op for op in OPERATORS if op in set(self.enabled_operators)),
        )
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.max_concurrent_evaluations < 1:
            raise ValueError("max_concurrent_evaluations must be >= 1")


@dataclass(frozen=True)
class PlanSlot:
    operator: str
    slot: int
    child_seed: int


@dataclass(frozen=True)
class CandidateRecord:
    operator: str
    slot: int
    mutation: "Mutation | None"
    score: "float | None"
    skipped: "str | None" = None


@dataclass(frozen=True)
class GenerationRecord:
    index: int
    candidates: tuple
    best_candidate_score: "float | None"
    accepted: "Mutation | None"
    incumbent_score_after: float


@dataclass(frozen=True)
class RunResult:
    initial_score: float
    final_score: float
    patch: Patch
    generations: tuple
    evaluations_used: int
    termination_reason: str  # no_improvement | max_generations | backend_failure
    baseline: Workflow
    optimized: Workflow


def planned_slots_per_generation(cfg: SearchConfig) -> int:
    return len(cfg.enabled_operators) * cfg.neighbors_per_operator


def neighbor_plan(cfg: SearchConfig, generation: int) -> list:
    """The exact slots a generation will fill, with per-slot child seeds.

    A pure function of (run_seed, generation), so the plan can be audited or
    replayed without running the search. Operator indices are positions in
    the full operator list, keeping streams stable across operator subsets.
    """
    plan = []
    for op in cfg.enabled_operators:
        op_index = OPERATORS.index(op)
        for slot in range(cfg.neighbors_per_operator):
            plan.append(
                PlanSlot(op, slot, derive_child_seed(cfg.run_seed, generation, op_index, slot))
            )
    return plan


def _sample_slot(
    op: str,
    slot: int,
    workflow: Workflow,
    roles,
    mcfg: MutationConfig,
    rng: Rng,
    llm: LlmBackend,
) -> Mutation:
    # prompt operators alternate targets: even slots positive, odd negative
    which = "positive" if slot % 2 == 0 else "negative"
    if op == "checkpoint":
        return sample_checkpoint_mutation(workflow, roles, mcfg, rng)
    if op == "ksampler":
        return sample_ksampler_mutation(workflow, roles, mcfg, rng)
    if op == "prompt_word":
        return sample_prompt_word_mutation(workflow, roles, which, rng)
    if op == "prompt_statement":
        return sample_prompt_statement_mutation(workflow, roles, which, mcfg, rng)
    if op == "prompt_llm":
        return sample_prompt_llm_mutation(workflow, roles, which, mcfg, rng, llm)
    raise ValueError(f"unknown operator {op!r}")


class _ScoreCache:
    """Evaluate each canonically-distinct workflow once."""

    def __init__(self, evaluator: EvaluatorBackend, prompt_context: str):
        self._evaluator = evaluator
        self._prompt_context = prompt_context
        self._scores = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def score(self, workflow: Workflow) -> float:
        key = workflow_hash(workflow)
        with self._lock:
            if key in self._scores:
                return self._scores[key]
        value = check_finite_score(self._evaluator.evaluate(workflow, self._prompt_context))
        with self._lock:
            self.evaluations += 1
            self._scores[key] = value
        return value


def _check_operator_preconditions(cfg: SearchConfig, mcfg: MutationConfig):
    ops = cfg.enabled_operators
    if "checkpoint" in ops and len(mcfg.checkpoint_pool) < 2:
        raise ValueError("checkpoint operator needs a pool of at least 2 models")
    if "prompt_statement" in ops and (
        not mcfg.positive_statement_pool or not mcfg.negative_statement_pool
    ):
        raise ValueError("prompt_statement operator needs non-empty statement pools")
    if "prompt_llm" in ops and not mcfg.llm_models:
        raise ValueError("prompt_llm operator needs at least one LLM model")


def _randomized_baseline(baseline: Workflow, cfg: SearchConfig, mcfg: MutationConfig) -> Workflow:
    if not (cfg.randomize_initial_checkpoint or cfg.randomize_initial_seed):
        return baseline
    rng = Rng(derive_child_seed(cfg.run_seed, "init"))
    roles = resolve_roles(baseline)
    out = baseline
    if cfg.randomize_initial_checkpoint:
        out = set_field(out, roles.checkpoint_id, "ckpt_name", rng.choice(mcfg.checkpoint_pool))
    if cfg.randomize_initial_seed:
        out = set_field(out, roles.ksampler_id, "seed", rng.int_between(0, 100000))
    return out


def run_hill_climb(
    baseline: Workflow,
    cfg: SearchConfig,
    mcfg: MutationConfig,
    evaluator: EvaluatorBackend,
    llm: "LlmBackend | None" = None,
    prompt_context: str = "",
) -> RunResult:
    """Run the search and return the patch plus full per-generation telemetry.

    ``prompt_context`` is the original benchmark prompt the evaluator scores
    against; it is untouched by prompt mutations.
    """
    llm = llm if llm is not None else NullLlm()
    violations = validate_workflow(baseline)
    if violations:
        raise ValueError(f"baseline workflow invalid: {violations[0].message}")
    _check_operator_preconditions(cfg, mcfg)

    effective_baseline = _randomized_baseline(baseline, cfg, mcfg)
    cache = _ScoreCache(evaluator, prompt_context)
    try:
        initial_score = cache.score(effective_baseline)
    except EvaluationError as exc:
        raise BackendFailure(f"baseline could not be evaluated: {exc}") from exc

    incumbent = effective_baseline
    incumbent_score = initial_score
    accepted_mutations = []
    generations = []
    termination_reason = "max_generations"

    for generation in range(1, cfg.max_generations + 1):
        roles = resolve_roles(incumbent)
        plan = neighbor_plan(cfg, generation)

        def run_slot(entry: PlanSlot):
            rng = Rng(entry.child_seed)
            try:
                mutation = _sample_slot(
                    entry.operator, entry.slot, incumbent, roles, mcfg, rng, llm
                )
            except InfeasibleMutation as exc:
                return CandidateRecord(entry.operator, entry.slot, None, None, f"infeasible: {exc}"), None
            try:
                candidate = apply_mutation(incumbent, mutation)
            except MutationError as exc:
                return (
                    CandidateRecord(entry.operator, entry.slot, mutation, None, f"apply_failed: {exc}"),
                    None,
                )
            try:
                score = cache.score(candidate)
            except EvaluationError as exc:
                logger.warning("candidate %s/%d skipped: %s", entry.operator, entry.slot, exc)
                return (
                    CandidateRecord(
                        entry.operator, entry.slot, mutation, None, f"evaluation_failed: {exc}"
                    ),
                    None,
                )
            return CandidateRecord(entry.operator, entry.slot, mutation, score), candidate

        candidates = []
        candidate_workflows = []
        hard_failure = None
        if cfg.max_concurrent_evaluations > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_concurrent_evaluations) as pool:
                futures = [pool.submit(run_slot, entry) for entry in plan]
                for future in futures:
                    try:
                        record, wf = future.result()
                    except BackendFailure as exc:
                        hard_failure = exc
                        break
                    candidates.append(record)
                    candidate_workflows.append(wf)
        else:
            for entry in plan:
                try:
                    record, wf = run_slot(entry)
                except BackendFailure as exc:
                    hard_failure = exc
                    break
                candidates.append(record)
                candidate_workflows.append(wf)

        # ranked by (operator index, slot) = plan order; strict > keeps the earliest
        best_index = None
        for i, record in enumerate(candidates):
            if record.score is None:
                continue
            if best_index is None or record.score > candidates[best_index].score:
                best_index = i
        best_score = candidates[best_index].score if best_index is not None else None

        if hard_failure is not None:
            # selection never ran; individual scores stay in the candidate list
            generations.append(
                GenerationRecord(
                    index=generation,
                    candidates=tuple(candidates),
                    best_candidate_score=None,
                    accepted=None,
                    incumbent_score_after=incumbent_score,
                )
            )
            logger.error("generation %d aborted: %s", generation, hard_failure)
            termination_reason = "backend_failure"
            break

        if best_index is not None and best_score > incumbent_score:
            best = candidates[best_index]
            incumbent = candidate_workflows[best_index]
            incumbent_score = best_score
            accepted_mutations.append(best.mutation)
            generations.append(
                GenerationRecord(
                    index=generation,
                    candidates=tuple(candidates),
                    best_candidate_score=best_score,
                    accepted=best.mutation,
                    incumbent_score_after=incumbent_score,
                )
            )
            logger.info(
                "generation %d accepted %s (score %.4f)", generation, best.operator, best_score
            )
        else:
            generations.append(
                GenerationRecord(
                    index=generation,
                    candidates=tuple(candidates),
                    best_candidate_score=best_score,
                    accepted=None,
                    incumbent_score_after=incumbent_score,
                )
            )
            termination_reason = "no_improvement"
            logger.info("generation %d found no improvement; stopping", generation)
            break

    patch = Patch(
        baseline_hash=workflow_hash(effective_baseline),
        mutations=tuple(accepted_mutations),
        metadata={"final_score": incumbent_score},
    )
    return RunResult(
        initial_score=initial_score,
        final_score=incumbent_score,
        patch=patch,
        generations=tuple(generations),
        evaluations_used=cache.evaluations,
        termination_reason=termination_reason,
        baseline=effective_baseline,
        optimized=incumbent,
    )
