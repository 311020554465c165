"""Patches: ordered mutation lists applied to a baseline workflow.

A patch records the hash of the baseline it was built against, so replaying
it on the wrong workflow fails fast unless explicitly forced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .mutations import Mutation, MutationError, apply_mutation, mutation_from_dict, mutation_to_dict
from .workflow import Workflow, workflow_hash

__all__ = [
    "Patch",
    "PatchError",
    "BaselineMismatch",
    "PatchApplyError",
    "PatchFormatError",
    "apply_patch",
    "read_patch",
    "write_patch",
    "patch_to_dict",
    "patch_from_dict",
]


class PatchError(Exception):
    pass


class BaselineMismatch(PatchError):
    """The workflow being patched is not the recorded baseline."""


class PatchApplyError(PatchError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"mutation {index} failed to apply: {cause}")
        self.index = index
        self.cause = cause


class PatchFormatError(PatchError):
    """The patch file does not follow the documented schema."""


@dataclass(frozen=True)
class Patch:
    baseline_hash: str
    mutations: tuple = ()
    metadata: dict = field(default_factory=dict)  # run_id, created_at, final_score


def apply_patch(w: Workflow, p: Patch, force: bool = False) -> Workflow:
    """Left-fold ``apply_mutation`` over the patch, in list order."""
    if not force and p.baseline_hash != workflow_hash(w):
        raise BaselineMismatch(
            f"patch was built against baseline {p.baseline_hash[:12]}…, "
            f"this workflow hashes to {workflow_hash(w)[:12]}… (use force to override)"
        )
    current = w
    for index, mutation in enumerate(p.mutations):
        try:
            current = apply_mutation(current, mutation)
        except MutationError as exc:
            raise PatchApplyError(index, exc) from exc
    return current


def patch_to_dict(p: Patch) -> dict:
    return {
        "baseline_hash": p.baseline_hash,
        "mutations": [mutation_to_dict(m) for m in p.mutations],
        "metadata": dict(p.metadata),
    }


def patch_from_dict(data: dict) -> Patch:
    if not isinstance(data, dict) or "baseline_hash" not in data or "mutations" not in data:
        raise PatchFormatError("patch must be an object with baseline_hash and mutations")
    try:
        mutations = tuple(mutation_from_dict(m) for m in data["mutations"])
    except ValueError as exc:
        raise PatchFormatError(str(exc)) from exc
    return Patch(
        baseline_hash=data["baseline_hash"],
        mutations=mutations,
        metadata=dict(data.get("metadata", {})),
    )


def write_patch(p: Patch, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(patch_to_dict(p), fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")


def read_patch(path) -> Patch:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PatchFormatError(f"malformed patch file: {exc}") from exc
    return patch_from_dict(data)
