"""Launch the shim service: toxfilter-shim --mode mock|real --port N."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import uvicorn

from .app import ShimConfig, create_app


def build_config(argv: list[str] | None = None) -> ShimConfig:
    parser = argparse.ArgumentParser(prog="toxfilter-shim", description=__doc__)
    parser.add_argument("--mode", choices=["mock", "real"], default="mock")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8800)
    parser.add_argument("--image-model", help="image safety model identifier (real mode)")
    parser.add_argument("--text-model", help="text toxicity model identifier (real mode)")
    parser.add_argument("--judge-model", help="judge model identifier (real mode)")
    parser.add_argument(
        "--markers", help='JSON file {"token": "O1".."O9"} overriding the mock marker table'
    )
    parser.add_argument(
        "--max-concurrency", type=int, default=64, help="uvicorn concurrent request limit"
    )
    args = parser.parse_args(argv)

    markers = None
    if args.markers:
        markers = json.loads(Path(args.markers).read_text(encoding="utf-8"))

    kwargs = dict(
        mode=args.mode,
        host=args.host,
        port=args.port,
        image_model=args.image_model,
        text_model=args.text_model,
        judge_model=args.judge_model,
        max_concurrency=args.max_concurrency,
    )
    if markers is not None:
        kwargs["markers"] = markers
    return ShimConfig(**kwargs)


def serve(config: ShimConfig) -> None:
    uvicorn.run(
        create_app(config),
        host=config.host,
        port=config.port,
        limit_concurrency=config.max_concurrency,
        log_level="info",
    )


def main() -> None:
    try:
        config = build_config(sys.argv[1:])
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    serve(config)


if __name__ == "__main__":
    main()
