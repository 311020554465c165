"""Evaluation and text-completion backends.

Three evaluator flavors share one contract (workflow in, finite score out):
the live ComfyUI pipeline scored by an external reward service, a
deterministic simulated landscape for desk-scale testing, and anything else a
caller supplies that implements :class:`EvaluatorBackend`. Failures are typed
exceptions, never sentinel scores.
"""

from __future__ import annotations

import base64
import json
import math
import time
import uuid
from dataclasses import dataclass, field
from typing import Protocol

import requests

from .mutations import LlmError
from .workflow import Workflow, get_field, resolve_roles, workflow_document, RoleError

__all__ = [
    "EvaluatorBackend",
    "EvaluationError",
    "BackendFailure",
    "SubmissionError",
    "GenerationTimeout",
    "ScorerError",
    "SimulatedLandscape",
    "SimulatedEvaluator",
    "simulated_evaluate",
    "load_landscape",
    "ComfyUIEvaluator",
    "OllamaLlm",
    "NullLlm",
    "scorer_score",
    "check_finite_score",
]


class EvaluationError(Exception):
    """One candidate could not be scored; the neighbor slot is skipped."""


class BackendFailure(Exception):
    """The backend is gone (connection-level); the whole run aborts."""


class SubmissionError(EvaluationError):
    """ComfyUI rejected the workflow on POST /prompt."""


class GenerationTimeout(EvaluationError):
    """No finished image appeared in the history before the deadline."""


class ScorerError(EvaluationError):
    """The reward service failed or returned a non-finite score."""


class EvaluatorBackend(Protocol):
    deterministic: bool
    supports_batch: bool

    def evaluate(self, workflow: Workflow, prompt_context: str) -> float:
        ...


def check_finite_score(value) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise ScorerError(f"score must be a finite real, got {value!r}")
    return float(value)


# --- simulated landscape ------------------------------------------------------


@dataclass(frozen=True)
class SimulatedLandscape:
    """A deterministic reward surface over workflows.

    One dominant checkpoint term, smooth distance terms for steps and cfg,
    additive bonuses for reward keywords present in the positive prompt, and
    penalties for penalty keywords missing from the negative prompt.
    """

    target_checkpoint: str
    checkpoint_bonus: dict
    target_steps: int
    target_cfg: float
    reward_keywords: dict = field(default_factory=dict)
    penalty_keywords: dict = field(default_factory=dict)
    noise: float = 0.0

    def __post_init__(self):
        if self.noise != 0.0:
            raise ValueError("simulated landscapes are noise-free")


def simulated_evaluate(w: Workflow, landscape: SimulatedLandscape) -> float:
    """Pure score of a workflow under a simulated landscape."""
    try:
        roles = resolve_roles(w)
    except RoleError as exc:
        raise EvaluationError(f"workflow roles unresolvable: {exc}") from exc
    ckpt = get_field(w, roles.checkpoint_id, "ckpt_name")
    steps = get_field(w, roles.ksampler_id, "steps")
    cfg = get_field(w, roles.ksampler_id, "cfg")
    if not isinstance(steps, (int, float)) or not isinstance(cfg, (int, float)):
        raise EvaluationError("KSampler steps/cfg must be scalars for simulated scoring")
    positive = str(get_field(w, roles.positive_prompt_id, "text")).lower()
    negative = str(get_field(w, roles.negative_prompt_id, "text")).lower()

    score = float(landscape.checkpoint_bonus.get(ckpt, 0.0))
    score += 1.0 - abs(steps - landscape.target_steps) / 199.0
    score += 1.0 - abs(cfg - landscape.target_cfg) / 25.0
    for keyword, weight in landscape.reward_keywords.items():
        if keyword.lower() in positive:
            score += weight
    for keyword, weight in landscape.penalty_keywords.items():
        if keyword.lower() not in negative:
            score -= weight
    return score


class SimulatedEvaluator:
    deterministic = True
    supports_batch = False

    def __init__(self, landscape: SimulatedLandscape):
        self.landscape = landscape

    def evaluate(self, workflow: Workflow, prompt_context: str) -> float:
        return simulated_evaluate(workflow, self.landscape)


def load_landscape(path) -> SimulatedLandscape:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return SimulatedLandscape(
        target_checkpoint=data["target_checkpoint"],
        checkpoint_bonus=dict(data.get("checkpoint_bonus", {})),
        target_steps=int(data["target_steps"]),
        target_cfg=float(data["target_cfg"]),
        reward_keywords=dict(data.get("reward_keywords", {})),
        penalty_keywords=dict(data.get("penalty_keywords", {})),
        noise=float(data.get("noise", 0.0)),
    )


# --- HTTP plumbing ------------------------------------------------------------


def _request_with_retry(session, method: str, url: str, *, retries: int = 1, **kwargs):
    """One retry on transport errors and 5xx; connection failures after the
    retry budget become BackendFailure."""
    attempt = 0
    while True:
        try:
            response = session.request(method, url, **kwargs)
        except requests.exceptions.RequestException as exc:
            if attempt < retries:
                attempt += 1
                continue
            raise BackendFailure(f"{method} {url} unreachable: {exc}") from exc
        if response.status_code >= 500 and attempt < retries:
            attempt += 1
            continue
        return response


def scorer_score(session, scorer_url: str, image_bytes: bytes, prompt: str, timeout: float = 60.0) -> float:
    """POST an image + the prompt to the reward service and return its score."""
    payload = {
        "prompt": prompt,
        "image_b64": base64.b64encode(image_bytes).decode("ascii"),
    }
    response = _request_with_retry(
        session, "POST", f"{scorer_url}/score", json=payload, timeout=timeout
    )
    if response.status_code != 200:
        raise ScorerError(f"scorer returned HTTP {response.status_code}: {response.text[:200]}")
    try:
        value = response.json()["score"]
    except (ValueError, KeyError) as exc:
        raise ScorerError(f"scorer response malformed: {exc}") from exc
    return check_finite_score(value)


class ComfyUIEvaluator:
    """Generate an image for a workflow on a live ComfyUI server and score it.

    The score is always computed against the original benchmark prompt, never
    against the workflow's (possibly mutated) prompt text: the reward measures
    alignment with what the user asked for.
    """

    deterministic = False
    supports_batch = False

    def __init__(
        self,
        comfyui_url: str,
        scorer_url: str,
        timeout: float = 300.0,
        poll_interval: float = 0.5,
        retries: int = 1,
    ):
        self.comfyui_url = comfyui_url.rstrip("/")
        self.scorer_url = scorer_url.rstrip("/")
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.retries = retries
        self.client_id = str(uuid.uuid4())
        self._session = requests.Session()

    def evaluate(self, workflow: Workflow, prompt_context: str) -> float:
        score, _ = self.evaluate_with_image(workflow, prompt_context)
        return score

    def evaluate_with_image(self, workflow: Workflow, prompt_context: str):
        prompt_id = self._submit(workflow)
        outputs = self._poll_history(prompt_id)
        image_bytes = self._fetch_image(outputs)
        score = scorer_score(self._session, self.scorer_url, image_bytes, prompt_context)
        return score, image_bytes

    def _submit(self, workflow: Workflow) -> str:
        body = {"prompt": workflow_document(workflow), "client_id": self.client_id}
        response = _request_with_retry(
            self._session,
            "POST",
            f"{self.comfyui_url}/prompt",
            retries=self.retries,
            json=body,
            timeout=30.0,
        )
        if response.status_code != 200:
            raise SubmissionError(
                f"/prompt returned HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()["prompt_id"]
        except (ValueError, KeyError) as exc:
            raise SubmissionError(f"/prompt response malformed: {exc}") from exc

    def _poll_history(self, prompt_id: str) -> dict:
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            response = _request_with_retry(
                self._session,
                "GET",
                f"{self.comfyui_url}/history/{prompt_id}",
                retries=self.retries,
                timeout=30.0,
            )
            if response.status_code == 200:
                entry = response.json().get(prompt_id)
                if entry and entry.get("outputs"):
                    return entry["outputs"]
            time.sleep(self.poll_interval)
        raise GenerationTimeout(f"no output for prompt {prompt_id} within {self.timeout}s")

    def _fetch_image(self, outputs: dict) -> bytes:
        for node_output in outputs.values():
            for image in node_output.get("images", []):
                params = {
                    "filename": image["filename"],
                    "subfolder": image.get("subfolder", ""),
                    "type": image.get("type", "output"),
                }
                response = _request_with_retry(
                    self._session,
                    "GET",
                    f"{self.comfyui_url}/view",
                    retries=self.retries,
                    params=params,
                    timeout=60.0,
                )
                if response.status_code != 200:
                    raise EvaluationError(f"/view returned HTTP {response.status_code}")
                return response.content
        raise EvaluationError("history entry contains no images")


# --- LLM backends ---------------------------------------------------------------


class OllamaLlm:
    """Text completion via Ollama's /api/generate, non-streaming."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def complete(self, model: str, seed: int, temperature: float, request: str) -> str:
        payload = {
            "model": model,
            "prompt": request,
            "stream": False,
            "options": {"seed": seed, "temperature": temperature},
        }
        try:
            response = self._session.post(
                f"{self.base_url}/api/generate", json=payload, timeout=self.timeout
            )
        except requests.exceptions.RequestException as exc:
            raise LlmError(f"ollama unreachable: {exc}") from exc
        if response.status_code != 200:
            raise LlmError(f"/api/generate returned HTTP {response.status_code}")
        try:
            text = response.json()["response"]
        except (ValueError, KeyError) as exc:
            raise LlmError(f"/api/generate response malformed: {exc}") from exc
        if not text:
            raise LlmError("ollama returned an empty response")
        return text


class NullLlm:
    """Stand-in when no LLM is configured: every rewrite slot is infeasible."""

    def complete(self, model: str, seed: int, temperature: float, request: str) -> str:
        raise LlmError("no LLM backend configured")
