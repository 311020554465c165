"""ComfyGI: search-based improvement of ComfyUI text-to-image workflows.

Hill climbs over workflow mutations (checkpoint swaps, sampler settings,
prompt edits, LLM prompt rewrites), scores candidates with an external reward
backend, and emits a replayable patch plus full run telemetry.
"""

from .backends import (
    BackendFailure,
    ComfyUIEvaluator,
    EvaluationError,
    EvaluatorBackend,
    NullLlm,
    OllamaLlm,
    SimulatedEvaluator,
    SimulatedLandscape,
    load_landscape,
    simulated_evaluate,
)
from .mutations import (
    CheckpointMutation,
    InfeasibleMutation,
    KSamplerMutation,
    LlmBackend,
    LlmError,
    Mutation,
    MutationApplyError,
    MutationConfig,
    MutationError,
    PromptLlmMutation,
    PromptStatementMutation,
    PromptWordMutation,
    apply_mutation,
    default_mutation_config,
    sample_checkpoint_mutation,
    sample_ksampler_mutation,
    sample_prompt_llm_mutation,
    sample_prompt_statement_mutation,
    sample_prompt_word_mutation,
)
from .patch import BaselineMismatch, Patch, PatchApplyError, apply_patch, read_patch, write_patch
from .rng import Rng, derive_child_seed
from .search import (
    GenerationRecord,
    RunResult,
    SearchConfig,
    neighbor_plan,
    run_hill_climb,
)
from .workflow import (
    Link,
    Node,
    RoleError,
    UnknownNodeError,
    Violation,
    Workflow,
    WorkflowParseError,
    WorkflowRoles,
    get_field,
    parse_workflow,
    resolve_roles,
    serialize_workflow,
    set_field,
    validate_workflow,
    workflow_hash,
)

__version__ = "0.1.0"
