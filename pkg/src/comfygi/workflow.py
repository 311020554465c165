"""ComfyUI API-format workflow graphs: parse, validate, query, edit, serialize.

A workflow is the JSON document ComfyUI accepts on POST /prompt: a top-level
object mapping node ids to ``{"class_type": ..., "inputs": {...}}``. Input
values are scalars or links ``[source_node_id, output_index]``. Workflows are
treated as immutable values; every edit returns a copy.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

__all__ = [
    "Link",
    "Node",
    "Workflow",
    "WorkflowRoles",
    "Violation",
    "WorkflowError",
    "WorkflowParseError",
    "RoleError",
    "UnknownNodeError",
    "parse_workflow",
    "serialize_workflow",
    "workflow_hash",
    "validate_workflow",
    "resolve_roles",
    "get_field",
    "set_field",
    "KSAMPLER_SAMPLERS",
    "KSAMPLER_SCHEDULERS",
    "SEED_MIN",
    "SEED_MAX",
    "STEPS_MIN",
    "STEPS_MAX",
    "CFG_MIN",
    "CFG_MAX",
    "DENOISE_MIN",
    "DENOISE_MAX",
    "KSAMPLER_MUTABLE_FIELDS",
    "ksampler_field_violation",
]


class WorkflowError(Exception):
    """Base class for workflow-level failures."""


class WorkflowParseError(WorkflowError):
    """The document is not a well-formed API-format workflow."""


class RoleError(WorkflowError):
    """The graph does not expose the expected text-to-image roles."""


class UnknownNodeError(WorkflowError):
    """A node id does not exist in the workflow."""


@dataclass(frozen=True)
class Link:
    """Reference to another node's output: ``[source, output_index]`` in JSON."""

    source: str
    output_index: int


@dataclass(frozen=True)
class Node:
    class_type: str
    inputs: dict  # field name -> scalar (str | int | float | bool) or Link
    # Extra top-level keys (e.g. "_meta") are carried verbatim so that
    # documents produced by ComfyUI's own exporter survive a round trip.
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Workflow:
    nodes: dict

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"no node with id {node_id!r}") from None


@dataclass(frozen=True)
class WorkflowRoles:
    """Node ids of the six modules the mutation operators act on."""

    ksampler_id: str
    checkpoint_id: str
    positive_prompt_id: str
    negative_prompt_id: str
    latent_id: str
    save_id: str


@dataclass(frozen=True)
class Violation:
    code: str
    node_id: str | None
    message: str


# KSampler value domains: seed/steps/cfg/denoise ranges plus the sampler and
# scheduler name lists. steps and cfg upper bounds are exclusive; the rest
# are inclusive.
SEED_MIN, SEED_MAX = 0, 100000
STEPS_MIN, STEPS_MAX = 1, 200
CFG_MIN, CFG_MAX = 0.0, 25.0
DENOISE_MIN, DENOISE_MAX = 0.0, 1.0

KSAMPLER_SAMPLERS = (
    "euler",
    "euler_ancestral",
    "heun",
    "heunpp2",
    "dpm_2",
    "dpm_2_ancestral",
    "lms",
    "dpm_fast",
    "dpm_adaptive",
    "dpmpp_2s_ancestral",
    "dpmpp_sde",
    "dpmpp_sde_gpu",
    "dpmpp_2m",
    "dpmpp_2m_sde",
    "dpmpp_2m_sde_gpu",
    "dpmpp_3m_sde",
    "dpmpp_3m_sde_gpu",
    "ddpm",
    "lcm",
    "ddim",
    "uni_pc",
    "uni_pc_bh2",
)

KSAMPLER_SCHEDULERS = (
    "normal",
    "karras",
    "exponential",
    "sgm_uniform",
    "simple",
    "ddim_uniform",
)

KSAMPLER_MUTABLE_FIELDS = ("seed", "steps", "cfg", "sampler_name", "scheduler", "denoise")

# Fields a recognized class_type must carry for the workflow to make sense.
_REQUIRED_FIELDS = {
    "KSampler": (
        "seed",
        "steps",
        "cfg",
        "sampler_name",
        "scheduler",
        "denoise",
        "model",
        "positive",
        "negative",
        "latent_image",
    ),
    "CheckpointLoaderSimple": ("ckpt_name",),
    "CLIPTextEncode": ("text", "clip"),
    "EmptyLatentImage": ("width", "height"),
    "VAEDecode": ("samples", "vae"),
    "SaveImage": ("images",),
}


def ksampler_field_violation(fld: str, value) -> str | None:
    """Return a violation message if a KSampler scalar lies outside its domain."""
    if fld == "seed":
        if not isinstance(value, int) or isinstance(value, bool) or not SEED_MIN <= value <= SEED_MAX:
            return f"seed must be an integer in [{SEED_MIN}, {SEED_MAX}], got {value!r}"
    elif fld == "steps":
        if not isinstance(value, int) or isinstance(value, bool) or not STEPS_MIN <= value < STEPS_MAX:
            return f"steps must be an integer in [{STEPS_MIN}, {STEPS_MAX}), got {value!r}"
    elif fld == "cfg":
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not CFG_MIN <= value < CFG_MAX:
            return f"cfg must be a real in [{CFG_MIN}, {CFG_MAX}), got {value!r}"
    elif fld == "sampler_name":
        if value not in KSAMPLER_SAMPLERS:
            return f"unknown sampler_name {value!r}"
    elif fld == "scheduler":
        if value not in KSAMPLER_SCHEDULERS:
            return f"unknown scheduler {value!r}"
    elif fld == "denoise":
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not DENOISE_MIN <= value <= DENOISE_MAX:
            return f"denoise must be a real in [{DENOISE_MIN}, {DENOISE_MAX}], got {value!r}"
    return None


def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise WorkflowParseError(f"duplicate JSON key {key!r}")
        seen.add(key)
        out[key] = value
    return out


def _parse_input_value(node_id: str, fld: str, raw):
    if isinstance(raw, list):
        if len(raw) != 2:
            raise WorkflowParseError(
                f"node {node_id!r} input {fld!r}: link array must have length 2, got {len(raw)}"
            )
        source, index = raw
        if not isinstance(source, str):
            raise WorkflowParseError(
                f"node {node_id!r} input {fld!r}: link source must be a node-id string"
            )
        if not isinstance(index, int) or isinstance(index, bool) or index < 0:
            raise WorkflowParseError(
                f"node {node_id!r} input {fld!r}: output index must be a non-negative integer"
            )
        return Link(source, index)
    if isinstance(raw, (str, int, float, bool)):
        return raw
    raise WorkflowParseError(
        f"node {node_id!r} input {fld!r}: unsupported value {raw!r}"
    )


def parse_workflow(document: str) -> Workflow:
    """Parse an API-format JSON document into a :class:`Workflow`.

    Unknown node class_types pass through untouched. Structural problems
    (dangling links, out-of-range KSampler values) are reported by
    :func:`validate_workflow`, not here.
    """
    try:
        raw = json.loads(document, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise WorkflowParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise WorkflowParseError("top level must be an object of node objects")

    nodes = {}
    for node_id, body in raw.items():
        if not isinstance(body, dict):
            raise WorkflowParseError(f"node {node_id!r} must be an object")
        if "class_type" not in body:
            raise WorkflowParseError(f"node {node_id!r} is missing class_type")
        class_type = body["class_type"]
        if not isinstance(class_type, str):
            raise WorkflowParseError(f"node {node_id!r}: class_type must be a string")
        raw_inputs = body.get("inputs", {})
        if not isinstance(raw_inputs, dict):
            raise WorkflowParseError(f"node {node_id!r}: inputs must be an object")
        inputs = {
            fld: _parse_input_value(node_id, fld, value)
            for fld, value in raw_inputs.items()
        }
        extras = {k: v for k, v in body.items() if k not in ("class_type", "inputs")}
        nodes[node_id] = Node(class_type=class_type, inputs=inputs, extras=extras)
    return Workflow(nodes=nodes)


def _input_to_json(value):
    if isinstance(value, Link):
        return [value.source, value.output_index]
    return value


def workflow_document(w: Workflow) -> dict:
    """The plain-JSON form of a workflow (what ComfyUI's /prompt accepts)."""
    doc = {}
    for node_id, node in w.nodes.items():
        body = {
            "class_type": node.class_type,
            "inputs": {fld: _input_to_json(v) for fld, v in node.inputs.items()},
        }
        body.update(copy.deepcopy(node.extras))
        doc[node_id] = body
    return doc


def serialize_workflow(w: Workflow) -> str:
    """Canonical serialization: node ids and object keys sorted, 2-space indent.

    Deterministic byte-for-byte, so the text doubles as a hashing and
    equality surface. Reals render with Python's shortest round-trip repr.
    """
    return json.dumps(workflow_document(w), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def workflow_hash(w: Workflow) -> str:
    """sha256 hex digest of the canonical serialization."""
    return hashlib.sha256(serialize_workflow(w).encode("utf-8")).hexdigest()


def validate_workflow(w: Workflow) -> list[Violation]:
    """Collect invariant violations; an empty list means the workflow is sound.

    Checks node ids, link integrity, required fields of recognized
    class_types, and KSampler scalar domains.
    """
    violations = []
    for node_id, node in w.nodes.items():
        if node_id == "":
            violations.append(Violation("empty_node_id", node_id, "node id must be non-empty"))
        if node.class_type == "":
            violations.append(
                Violation("empty_class_type", node_id, f"node {node_id!r} has an empty class_type")
            )
        for fld, value in node.inputs.items():
            if isinstance(value, Link) and value.source not in w.nodes:
                violations.append(
                    Violation(
                        "dangling_link",
                        node_id,
                        f"node {node_id!r} input {fld!r} links to missing node {value.source!r}",
                    )
                )
        required = _REQUIRED_FIELDS.get(node.class_type, ())
        for fld in required:
            if fld not in node.inputs:
                violations.append(
                    Violation(
                        "missing_field",
                        node_id,
                        f"{node.class_type} node {node_id!r} is missing input {fld!r}",
                    )
                )
        if node.class_type == "KSampler":
            for fld in KSAMPLER_MUTABLE_FIELDS:
                if fld not in node.inputs:
                    continue
                value = node.inputs[fld]
                if isinstance(value, Link):
                    continue
                message = ksampler_field_violation(fld, value)
                if message is not None:
                    violations.append(Violation("ksampler_range", node_id, message))
    return violations


def _single(w: Workflow, class_type: str) -> str:
    ids = [nid for nid, node in w.nodes.items() if node.class_type == class_type]
    if not ids:
        raise RoleError(f"workflow has no {class_type} node")
    if len(ids) > 1:
        raise RoleError(f"workflow has {len(ids)} {class_type} nodes, expected exactly one")
    return ids[0]


def _prompt_source(w: Workflow, ksampler_id: str, fld: str) -> str:
    value = w.node(ksampler_id).inputs.get(fld)
    if not isinstance(value, Link):
        raise RoleError(f"KSampler input {fld!r} must be a link")
    if value.source not in w.nodes:
        raise RoleError(f"KSampler input {fld!r} links to missing node {value.source!r}")
    if w.node(value.source).class_type != "CLIPTextEncode":
        raise RoleError(
            f"KSampler input {fld!r} must terminate at a CLIPTextEncode, "
            f"found {w.node(value.source).class_type!r}"
        )
    return value.source


def resolve_roles(w: Workflow) -> WorkflowRoles:
    """Locate the sampler, checkpoint, prompt, latent and save nodes.

    Positive vs negative prompt encoders are told apart structurally, by
    following the KSampler's ``positive``/``negative`` links; node titles are
    cosmetic and never consulted.
    """
    ksampler_id = _single(w, "KSampler")
    checkpoint_id = _single(w, "CheckpointLoaderSimple")
    latent_id = _single(w, "EmptyLatentImage")
    save_id = _single(w, "SaveImage")
    positive_id = _prompt_source(w, ksampler_id, "positive")
    negative_id = _prompt_source(w, ksampler_id, "negative")
    if positive_id == negative_id:
        raise RoleError("positive and negative prompts resolve to the same node")
    return WorkflowRoles(
        ksampler_id=ksampler_id,
        checkpoint_id=checkpoint_id,
        positive_prompt_id=positive_id,
        negative_prompt_id=negative_id,
        latent_id=latent_id,
        save_id=save_id,
    )


def get_field(w: Workflow, node_id: str, fld: str):
    node = w.node(node_id)
    if fld not in node.inputs:
        raise UnknownNodeError(f"node {node_id!r} has no input {fld!r}")
    return node.inputs[fld]


def set_field(w: Workflow, node_id: str, fld: str, value) -> Workflow:
    """Return a copy of ``w`` with one input changed; ``w`` itself is untouched."""
    node = w.node(node_id)
    new_inputs = dict(node.inputs)
    new_inputs[fld] = value
    new_node = Node(class_type=node.class_type, inputs=new_inputs, extras=copy.deepcopy(node.extras))
    new_nodes = dict(w.nodes)
    new_nodes[node_id] = new_node
    return Workflow(nodes=new_nodes)
