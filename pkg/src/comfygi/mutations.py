"""The five mutation operators and their application semantics.

Each sampler returns a fully materialized mutation: applying it later never
draws randomness or contacts a service again. In particular the LLM rewrite
operator stores the rewritten prompt text itself, so patches replay offline.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Union

from .rng import Rng
from .workflow import (
    CFG_MAX,
    CFG_MIN,
    DENOISE_MAX,
    DENOISE_MIN,
    KSAMPLER_MUTABLE_FIELDS,
    KSAMPLER_SAMPLERS,
    KSAMPLER_SCHEDULERS,
    SEED_MAX,
    SEED_MIN,
    STEPS_MAX,
    STEPS_MIN,
    Workflow,
    WorkflowRoles,
    get_field,
    ksampler_field_violation,
    set_field,
)

__all__ = [
    "MutationError",
    "InfeasibleMutation",
    "MutationApplyError",
    "CheckpointMutation",
    "KSamplerMutation",
    "PromptWordMutation",
    "PromptStatementMutation",
    "PromptLlmMutation",
    "Mutation",
    "MutationConfig",
    "LlmBackend",
    "LlmError",
    "DEFAULT_CHECKPOINT_POOL",
    "DEFAULT_LLM_MODELS",
    "POSITIVE_REWRITE_TEMPLATE",
    "NEGATIVE_REWRITE_TEMPLATE",
    "render_llm_request",
    "split_statements",
    "default_mutation_config",
    "load_statement_pool",
    "sample_checkpoint_mutation",
    "sample_ksampler_mutation",
    "sample_prompt_word_mutation",
    "sample_prompt_statement_mutation",
    "sample_prompt_llm_mutation",
    "apply_mutation",
    "mutation_to_dict",
    "mutation_from_dict",
    "draw_ksampler_value",
]


class MutationError(Exception):
    """Base class for mutation failures."""


class InfeasibleMutation(MutationError):
    """The operator cannot produce a mutation for this workflow state.

    The caller treats the neighbor slot as skipped rather than padding with
    a no-op, so image evaluations are never wasted.
    """


class MutationApplyError(MutationError):
    """A materialized mutation no longer fits the workflow it is applied to."""


class LlmError(Exception):
    """The text-completion backend failed or returned nothing usable."""


class LlmBackend(Protocol):
    def complete(self, model: str, seed: int, temperature: float, request: str) -> str:
        ...


@dataclass(frozen=True)
class CheckpointMutation:
    target: str
    ckpt_name: str

    kind = "checkpoint"


@dataclass(frozen=True)
class KSamplerMutation:
    target: str
    field: str
    value: Union[int, float, str]

    kind = "ksampler"


@dataclass(frozen=True)
class PromptWordMutation:
    target: str
    action: str  # remove | switch | copy
    indices: tuple  # remove: (i,); switch: (i, j); copy: (src, insert_at)

    kind = "prompt_word"


@dataclass(frozen=True)
class PromptStatementMutation:
    target: str
    action: str  # remove | switch | copy | add | replace
    indices: tuple
    statement: "str | None" = None  # pool statement for add/replace

    kind = "prompt_statement"


@dataclass(frozen=True)
class PromptLlmMutation:
    target: str
    model: str
    llm_seed: int
    temperature: float
    text: str  # the rewritten prompt, materialized at sampling time

    kind = "prompt_llm"


Mutation = Union[
    CheckpointMutation,
    KSamplerMutation,
    PromptWordMutation,
    PromptStatementMutation,
    PromptLlmMutation,
]

DEFAULT_CHECKPOINT_POOL = (
    "Stable Diffusion 1.5",
    "Stable Diffusion 2",
    "Stable Diffusion 3 Medium",
    "Stable Diffusion XL Turbo 1.0",
    "Stable Diffusion XL Base 1.0",
    "Realistic Vision 6.0",
    "ReV Animated 1.2.2",
    "Dreamlike Photoreal 2.0",
    "DreamShaper 3.3",
)

DEFAULT_LLM_MODELS = ("llama3.1:8b", "mistral-nemo:12b", "gemma2:9b")

POSITIVE_REWRITE_TEMPLATE = (
    "Rewrite the following positive prompt such that it works best for a "
    'diffusion model for text to image generation: "[PROMPT]". Give a short '
    "description followed by a few comma (,) separated short image feature "
    "descriptions. Return only the updated prompt and nothing else."
)

NEGATIVE_REWRITE_TEMPLATE = (
    "Replace the following negative prompt with a new one such that it works "
    'best for a diffusion model for text to image generation: "[PROMPT]". '
    "Return a comma (,) separated list for the new prompt. Return only the "
    "updated prompt and nothing else."
)


def render_llm_request(which: str, prompt: str) -> str:
    template = POSITIVE_REWRITE_TEMPLATE if which == "positive" else NEGATIVE_REWRITE_TEMPLATE
    return template.replace("[PROMPT]", prompt)


@dataclass(frozen=True)
class MutationConfig:
    checkpoint_pool: tuple = DEFAULT_CHECKPOINT_POOL
    positive_statement_pool: tuple = ()
    negative_statement_pool: tuple = ()
    llm_models: tuple = DEFAULT_LLM_MODELS
    llm_temperature_range: tuple = (0.2, 1.2)

    def __post_init__(self):
        lo, hi = self.llm_temperature_range
        if not lo <= hi:
            raise ValueError("llm_temperature_range must satisfy lo <= hi")
        if len(set(self.checkpoint_pool)) != len(self.checkpoint_pool):
            raise ValueError("checkpoint_pool entries must be unique")


def load_statement_pool(path) -> tuple:
    """Load a statement pool file: one statement per line, ``#`` comments ignored."""
    statements = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            statements.append(line)
    return tuple(statements)


def _bundled(name: str):
    return resources.files("comfygi").joinpath("data").joinpath(name)


def default_mutation_config() -> MutationConfig:
    """Config with the bundled checkpoint set and statement pools."""
    with resources.as_file(_bundled("positive_statements.txt")) as p:
        positive = load_statement_pool(p)
    with resources.as_file(_bundled("negative_statements.txt")) as p:
        negative = load_statement_pool(p)
    return MutationConfig(
        positive_statement_pool=positive,
        negative_statement_pool=negative,
    )


# --- sampling ---------------------------------------------------------------


def sample_checkpoint_mutation(
    w: Workflow, roles: WorkflowRoles, cfg: MutationConfig, rng: Rng
) -> CheckpointMutation:
    """Swap the checkpoint model for a different one from the pool, uniformly."""
    if len(cfg.checkpoint_pool) < 2:
        raise InfeasibleMutation("checkpoint pool needs at least 2 entries")
    current = get_field(w, roles.checkpoint_id, "ckpt_name")
    alternatives = [name for name in cfg.checkpoint_pool if name != current]
    if not alternatives:
        raise InfeasibleMutation("checkpoint pool offers no alternative to the current model")
    return CheckpointMutation(target=roles.checkpoint_id, ckpt_name=rng.choice(alternatives))


def draw_ksampler_value(fld: str, rng: Rng):
    """Draw one value from a KSampler field's domain.

    cfg is rounded to 1 decimal and denoise to 2, matching the precision the
    search works at; cfg is clamped below its exclusive upper bound after
    rounding.
    """
    if fld == "seed":
        return rng.int_between(SEED_MIN, SEED_MAX)
    if fld == "steps":
        return rng.int_between(STEPS_MIN, STEPS_MAX - 1)
    if fld == "cfg":
        return min(round(rng.real(CFG_MIN, CFG_MAX), 1), CFG_MAX - 0.1)
    if fld == "sampler_name":
        return rng.choice(KSAMPLER_SAMPLERS)
    if fld == "scheduler":
        return rng.choice(KSAMPLER_SCHEDULERS)
    if fld == "denoise":
        return round(rng.real(DENOISE_MIN, DENOISE_MAX), 2)
    raise ValueError(f"not a mutable KSampler field: {fld!r}")


def sample_ksampler_mutation(
    w: Workflow, roles: WorkflowRoles, cfg: MutationConfig, rng: Rng
) -> KSamplerMutation:
    """Change a single sampler property, drawn uniformly from its domain.

    A value equal to the current one is redrawn once and then kept either
    way; a value-equal mutation is legal.
    """
    fld = rng.choice(KSAMPLER_MUTABLE_FIELDS)
    current = w.node(roles.ksampler_id).inputs.get(fld)
    value = draw_ksampler_value(fld, rng)
    if value == current:
        value = draw_ksampler_value(fld, rng)
    return KSamplerMutation(target=roles.ksampler_id, field=fld, value=value)


def _prompt_target(roles: WorkflowRoles, which: str) -> str:
    if which == "positive":
        return roles.positive_prompt_id
    if which == "negative":
        return roles.negative_prompt_id
    raise ValueError(f"which must be 'positive' or 'negative', got {which!r}")


def _prompt_text(w: Workflow, target: str) -> str:
    text = w.node(target).inputs.get("text")
    if not isinstance(text, str):
        raise InfeasibleMutation(f"node {target!r} has no editable text input")
    return text


def _distinct_pair(rng: Rng, n: int) -> tuple:
    i = rng.int_between(0, n - 1)
    j = rng.int_between(0, n - 2)
    if j >= i:
        j += 1
    return i, j


def sample_prompt_word_mutation(
    w: Workflow, roles: WorkflowRoles, which: str, rng: Rng
) -> PromptWordMutation:
    """Remove, switch, or copy one whitespace-delimited word of a prompt."""
    target = _prompt_target(roles, which)
    words = _prompt_text(w, target).split()
    n = len(words)
    feasible = []
    if n >= 2:
        feasible.extend(["remove", "switch"])
    if n >= 1:
        feasible.append("copy")
    if not feasible:
        raise InfeasibleMutation("prompt has no words to edit")
    action = rng.choice(feasible)
    if action == "remove":
        indices = (rng.int_between(0, n - 1),)
    elif action == "switch":
        indices = _distinct_pair(rng, n)
    else:  # copy
        indices = (rng.int_between(0, n - 1), rng.int_between(0, n))
    return PromptWordMutation(target=target, action=action, indices=indices)


def split_statements(text: str) -> list:
    """Comma-separated segments, trimmed, empty segments dropped."""
    return [seg.strip() for seg in text.split(",") if seg.strip()]


def sample_prompt_statement_mutation(
    w: Workflow, roles: WorkflowRoles, which: str, cfg: MutationConfig, rng: Rng
) -> PromptStatementMutation:
    """Edit a prompt at comma-statement granularity.

    Besides remove/switch/copy this also supports add and replace, which
    splice in phrases from the configured pool; the positive and negative
    prompts each use their own pool.
    """
    target = _prompt_target(roles, which)
    statements = split_statements(_prompt_text(w, target))
    pool = cfg.positive_statement_pool if which == "positive" else cfg.negative_statement_pool
    n = len(statements)
    feasible = []
    if n >= 2:
        feasible.extend(["remove", "switch"])
    if n >= 1:
        feasible.append("copy")
    if pool:
        feasible.append("add")
    if n >= 1 and pool:
        feasible.append("replace")
    if not feasible:
        raise InfeasibleMutation("empty prompt and empty statement pool")
    action = rng.choice(feasible)
    statement = None
    if action == "remove":
        indices = (rng.int_between(0, n - 1),)
    elif action == "switch":
        indices = _distinct_pair(rng, n)
    elif action == "copy":
        indices = (rng.int_between(0, n - 1), rng.int_between(0, n))
    elif action == "add":
        indices = (rng.int_between(0, n),)
        statement = rng.choice(pool)
    else:  # replace
        indices = (rng.int_between(0, n - 1),)
        statement = rng.choice(pool)
    return PromptStatementMutation(target=target, action=action, indices=indices, statement=statement)


def strip_llm_response(response: str) -> str:
    """Normalize an LLM reply: trim whitespace and one layer of wrapping quotes."""
    text = response.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        text = text[1:-1].strip()
    return text


def sample_prompt_llm_mutation(
    w: Workflow,
    roles: WorkflowRoles,
    which: str,
    cfg: MutationConfig,
    rng: Rng,
    llm: LlmBackend,
) -> PromptLlmMutation:
    """Ask an LLM to rewrite the prompt; the reply becomes the mutation payload."""
    if not cfg.llm_models:
        raise InfeasibleMutation("no LLM models configured")
    target = _prompt_target(roles, which)
    current = _prompt_text(w, target)
    model = rng.choice(cfg.llm_models)
    llm_seed = rng.int_between(0, 100000)
    lo, hi = cfg.llm_temperature_range
    temperature = round(rng.real(lo, hi), 2) if lo < hi else round(lo, 2)
    request = render_llm_request(which, current)
    try:
        response = llm.complete(model, llm_seed, temperature, request)
    except LlmError as exc:
        raise InfeasibleMutation(f"llm backend failed: {exc}") from exc
    text = strip_llm_response(response)
    if not text:
        raise InfeasibleMutation("llm returned an empty rewrite")
    return PromptLlmMutation(
        target=target, model=model, llm_seed=llm_seed, temperature=temperature, text=text
    )


# --- application ------------------------------------------------------------


def _check_index(i: int, n: int, what: str):
    if not 0 <= i < n:
        raise MutationApplyError(f"{what} index {i} out of range for {n} element(s)")


def _apply_word(m: PromptWordMutation, text: str) -> str:
    words = text.split()
    n = len(words)
    if m.action == "remove":
        (i,) = m.indices
        _check_index(i, n, "word")
        del words[i]
    elif m.action == "switch":
        i, j = m.indices
        _check_index(i, n, "word")
        _check_index(j, n, "word")
        if i == j:
            raise MutationApplyError("switch indices must be distinct")
        words[i], words[j] = words[j], words[i]
    elif m.action == "copy":
        src, at = m.indices
        _check_index(src, n, "word")
        if not 0 <= at <= n:
            raise MutationApplyError(f"insert position {at} out of range for {n} word(s)")
        words.insert(at, words[src])
    else:
        raise MutationApplyError(f"unknown prompt_word action {m.action!r}")
    return " ".join(words)


def _apply_statement(m: PromptStatementMutation, text: str) -> str:
    statements = split_statements(text)
    n = len(statements)
    if m.action == "remove":
        (i,) = m.indices
        _check_index(i, n, "statement")
        del statements[i]
    elif m.action == "switch":
        i, j = m.indices
        _check_index(i, n, "statement")
        _check_index(j, n, "statement")
        if i == j:
            raise MutationApplyError("switch indices must be distinct")
        statements[i], statements[j] = statements[j], statements[i]
    elif m.action == "copy":
        src, at = m.indices
        _check_index(src, n, "statement")
        if not 0 <= at <= n:
            raise MutationApplyError(f"insert position {at} out of range for {n} statement(s)")
        statements.insert(at, statements[src])
    elif m.action == "add":
        if m.statement is None:
            raise MutationApplyError("add requires a statement")
        (at,) = m.indices
        if not 0 <= at <= n:
            raise MutationApplyError(f"insert position {at} out of range for {n} statement(s)")
        statements.insert(at, m.statement)
    elif m.action == "replace":
        if m.statement is None:
            raise MutationApplyError("replace requires a statement")
        (i,) = m.indices
        _check_index(i, n, "statement")
        statements[i] = m.statement
    else:
        raise MutationApplyError(f"unknown prompt_statement action {m.action!r}")
    return ", ".join(statements)


def apply_mutation(w: Workflow, m: Mutation) -> Workflow:
    """Apply one mutation, returning an edited copy of the workflow.

    Exactly the targeted node changes. Prompt edits re-apply their stored
    indices to the node's current text and fail loudly when those indices no
    longer fit.
    """
    if m.target not in w.nodes:
        raise MutationApplyError(f"mutation target {m.target!r} not in workflow")
    if isinstance(m, CheckpointMutation):
        return set_field(w, m.target, "ckpt_name", m.ckpt_name)
    if isinstance(m, KSamplerMutation):
        if m.field not in KSAMPLER_MUTABLE_FIELDS:
            raise MutationApplyError(f"not a mutable KSampler field: {m.field!r}")
        message = ksampler_field_violation(m.field, m.value)
        if message is not None:
            raise MutationApplyError(message)
        return set_field(w, m.target, m.field, m.value)
    if isinstance(m, (PromptWordMutation, PromptStatementMutation, PromptLlmMutation)):
        current = w.node(m.target).inputs.get("text")
        if not isinstance(current, str):
            raise MutationApplyError(f"node {m.target!r} has no text input to edit")
        if isinstance(m, PromptWordMutation):
            new_text = _apply_word(m, current)
        elif isinstance(m, PromptStatementMutation):
            new_text = _apply_statement(m, current)
        else:
            new_text = m.text
        return set_field(w, m.target, "text", new_text)
    raise MutationApplyError(f"unknown mutation type {type(m).__name__}")


# --- serialization ----------------------------------------------------------


def mutation_to_dict(m: Mutation) -> dict:
    if isinstance(m, CheckpointMutation):
        return {"kind": m.kind, "target": m.target, "ckpt_name": m.ckpt_name}
    if isinstance(m, KSamplerMutation):
        return {"kind": m.kind, "target": m.target, "field": m.field, "value": m.value}
    if isinstance(m, PromptWordMutation):
        return {"kind": m.kind, "target": m.target, "action": m.action, "indices": list(m.indices)}
    if isinstance(m, PromptStatementMutation):
        return {
            "kind": m.kind,
            "target": m.target,
            "action": m.action,
            "indices": list(m.indices),
            "statement": m.statement,
        }
    if isinstance(m, PromptLlmMutation):
        return {
            "kind": m.kind,
            "target": m.target,
            "model": m.model,
            "llm_seed": m.llm_seed,
            "temperature": m.temperature,
            "text": m.text,
        }
    raise ValueError(f"unknown mutation type {type(m).__name__}")


def mutation_from_dict(data: dict) -> Mutation:
    kind = data.get("kind")
    try:
        if kind == "checkpoint":
            return CheckpointMutation(target=data["target"], ckpt_name=data["ckpt_name"])
        if kind == "ksampler":
            return KSamplerMutation(target=data["target"], field=data["field"], value=data["value"])
        if kind == "prompt_word":
            return PromptWordMutation(
                target=data["target"], action=data["action"], indices=tuple(data["indices"])
            )
        if kind == "prompt_statement":
            return PromptStatementMutation(
                target=data["target"],
                action=data["action"],
                indices=tuple(data["indices"]),
                statement=data.get("statement"),
            )
        if kind == "prompt_llm":
            return PromptLlmMutation(
                target=data["target"],
                model=data["model"],
                llm_seed=data["llm_seed"],
                temperature=data["temperature"],
                text=data["text"],
            )
    except KeyError as exc:
        raise ValueError(f"mutation of kind {kind!r} is missing field {exc}") from exc
    raise ValueError(f"unknown mutation kind {kind!r}")
