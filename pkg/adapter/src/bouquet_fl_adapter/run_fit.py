"""Child-side entrypoint: read the parameter artifact, train under the
orchestrator's cooperative limits, write the updated artifact.

Exit codes: 0 success, 2 usage/path error, 4 corrupt input artifact
(checksum/format, reported on stderr), 5 parameters do not fit the demo
model, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .artifact import ArtifactError, ChecksumMismatch, read_artifact, write_artifact
from .env import read_env
from .limits import apply_cooperative_limits
from .task import ModelMismatch, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_fit", description="Run one restricted local-training round."
    )
    parser.add_argument("--params-in", required=True, type=Path)
    parser.add_argument("--params-out", required=True, type=Path)
    parser.add_argument("--epochs", required=True, type=int)
    parser.add_argument("--seed", required=True, type=int)
    parser.add_argument("--batch-size", type=int, default=32)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="run_fit: %(message)s")
    args = build_parser().parse_args(argv)
    if args.epochs < 0:
        print("run_fit: --epochs must be nonnegative", file=sys.stderr)
        return 2
    if not args.params_in.is_file():
        print(f"run_fit: params_in not found: {args.params_in}", file=sys.stderr)
        return 2

    torch.set_num_threads(1)  # keeps CPU training bit-reproducible per machine
    env = read_env()
    apply_cooperative_limits(env)

    try:
        params = read_artifact(args.params_in)
    except ChecksumMismatch as exc:
        print(f"run_fit: checksum error: {exc}", file=sys.stderr)
        return 4
    except ArtifactError as exc:
        print(f"run_fit: bad artifact: {exc}", file=sys.stderr)
        return 4

    try:
        updated = train(
            params, epochs=args.epochs, seed=args.seed, env=env,
            batch_size=args.batch_size,
        )
    except ModelMismatch as exc:
        print(f"run_fit: {exc}", file=sys.stderr)
        return 5

    args.params_out.parent.mkdir(parents=True, exist_ok=True)
    write_artifact(updated, args.params_out)
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
