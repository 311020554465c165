"""Serve the scorer: ``scorer-sidecar [--mode stub|imagereward] [--port N]``.

Environment overrides: SCORER_MODE, SCORER_PORT.
"""

from __future__ import annotations

import argparse
import os

import uvicorn

from .app import DEFAULT_MODEL, SidecarConfig, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scorer-sidecar")
    parser.add_argument(
        "--mode",
        choices=("stub", "imagereward"),
        default=os.environ.get("SCORER_MODE", "stub"),
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument(
        "--port", type=int, default=int(os.environ.get("SCORER_PORT", "8200"))
    )
    parser.add_argument("--model", default=DEFAULT_MODEL)
    parser.add_argument("--device", default=None)
    args = parser.parse_args(argv)

    app = create_app(SidecarConfig(mode=args.mode, model=args.model, device=args.device))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
