"""HTTP scoring sidecar: ImageReward or a deterministic stub."""

from .app import DEFAULT_MODEL, SidecarConfig, create_app, stub_score

__version__ = "0.1.0"
