"""Image scoring service.

Two modes share one wire protocol:

* ``imagereward`` — loads the ImageReward model and returns its reward for
  (prompt, image).
* ``stub`` — no model, no downloads: the score is a pure function of the
  request bytes, so CI can exercise the full protocol deterministically.

Stub formula: ``score = ((H mod 40001) / 10000) - 2`` where ``H`` is the
sha256 of ``prompt_utf8 + b"\\x00" + image_bytes`` read as a big-endian
integer. The result always lies in [-2, 2].

Endpoints: ``POST /score`` with ``{"prompt": str, "image_b64": str}`` returns
``{"score": float}``; ``GET /health`` returns 200 once ready.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import logging
import threading
from dataclasses import dataclass

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "ImageReward-v1.0"


@dataclass(frozen=True)
class SidecarConfig:
    mode: str = "stub"  # stub | imagereward
    model: str = DEFAULT_MODEL
    device: str | None = None

    def __post_init__(self):
        if self.mode not in ("stub", "imagereward"):
            raise ValueError(f"unknown mode {self.mode!r}")


class ScoreRequest(BaseModel):
    prompt: str
    image_b64: str


def stub_score(prompt: str, image_bytes: bytes) -> float:
    """Deterministic score in [-2, 2] derived from the request bytes."""
    digest = hashlib.sha256(prompt.encode("utf-8") + b"\x00" + image_bytes).digest()
    value = int.from_bytes(digest, "big")
    return (value % 40001) / 10000 - 2


def _decode_image(image_b64: str) -> bytes:
    try:
        image_bytes = base64.b64decode(image_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"image_b64 is not valid base64: {exc}") from exc
    try:
        with Image.open(io.BytesIO(image_bytes)) as image:
            image.verify()
    except Exception as exc:
        raise ValueError(f"payload does not decode to an image: {exc}") from exc
    return image_bytes


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: SidecarConfig | None = None) -> FastAPI:
    config = config or SidecarConfig()
    app = FastAPI(title="comfygi scorer sidecar")
    state = {"model": None, "loading": config.mode == "imagereward", "error": None}
    lock = threading.Lock()

    def load_model():
        try:
            import ImageReward as reward_module

            model = reward_module.load(config.model, device=config.device or "cpu")
            with lock:
                state["model"] = model
                state["loading"] = False
            logger.info("loaded %s", config.model)
        except Exception as exc:
            with lock:
                state["error"] = str(exc)
                state["loading"] = False
            logger.error("model load failed: %s", exc)

    if config.mode == "imagereward":
        threading.Thread(target=load_model, daemon=True).start()

    @app.get("/health")
    def health():
        if config.mode == "stub":
            return {"status": "ok", "mode": "stub"}
        with lock:
            if state["loading"]:
                return _error(503, "model loading")
            if state["model"] is None:
                return _error(503, f"model unavailable: {state['error']}")
        return {"status": "ok", "mode": "imagereward", "model": config.model}

    @app.post("/score")
    def score(request: ScoreRequest):
        if not request.prompt:
            return _error(400, "prompt must be non-empty")
        try:
            image_bytes = _decode_image(request.image_b64)
        except ValueError as exc:
            return _error(400, str(exc))
        if config.mode == "stub":
            return {"score": stub_score(request.prompt, image_bytes)}
        with lock:
            model = state["model"]
            loading = state["loading"]
        if model is None:
            return _error(503, "model loading" if loading else "model unavailable")
        with Image.open(io.BytesIO(image_bytes)) as image:
            value = model.score(request.prompt, image.convert("RGB"))
        return {"score": float(value)}

    return app
