from __future__ import annotations

from importlib import resources

import pytest

from comfygi.backends import SimulatedEvaluator, load_landscape
from comfygi.mutations import MutationConfig
from comfygi.workflow import parse_workflow, resolve_roles, set_field


def bundled_data(name: str):
    return resources.files("comfygi").joinpath("data").joinpath(name)


@pytest.fixture(scope="session")
def default_workflow_text() -> str:
    return bundled_data("default_workflow.json").read_text(encoding="utf-8")


@pytest.fixture()
def default_workflow(default_workflow_text):
    return parse_workflow(default_workflow_text)


@pytest.fixture()
def roles(default_workflow):
    return resolve_roles(default_workflow)


@pytest.fixture(scope="session")
def landscape_l1():
    with resources.as_file(bundled_data("landscape_l1.json")) as path:
        return load_landscape(path)


@pytest.fixture()
def l1_evaluator(landscape_l1):
    return SimulatedEvaluator(landscape_l1)


@pytest.fixture()
def small_mcfg():
    """Small pools so statement-add can find the L1 keywords quickly."""
    return MutationConfig(
        positive_statement_pool=("masterpiece", "ultra realistic", "digital painting"),
        negative_statement_pool=("blurry", "low quality"),
    )


class EchoLlm:
    """Deterministic LLM stand-in: returns the prompt embedded in the request."""

    def complete(self, model, seed, temperature, request):
        start = request.index('"') + 1
        end = request.rindex('"')
        return request[start:end]


class SuffixLlm:
    """Returns the embedded prompt plus a fixed suffix."""

    def __init__(self, suffix: str):
        self.suffix = suffix

    def complete(self, model, seed, temperature, request):
        start = request.index('"') + 1
        end = request.rindex('"')
        return request[start:end] + self.suffix


@pytest.fixture()
def echo_llm():
    return EchoLlm()


@pytest.fixture()
def targeted_baseline(default_workflow, roles, landscape_l1):
    """Default workflow with steps/cfg held at the L1 targets.

    The convergence criterion's oracle enumerates checkpoints and keyword
    subsets with steps/cfg at targets, so the search starts there too.
    """
    w = set_field(default_workflow, roles.ksampler_id, "steps", landscape_l1.target_steps)
    return set_field(w, roles.ksampler_id, "cfg", landscape_l1.target_cfg)
