"""Cooperative in-process limits: the knobs only the training process itself
can turn (accelerator memory fraction, device choice, loader sizing)."""

from __future__ import annotations

import logging

import torch

from .env import AdapterEnv

log = logging.getLogger(__name__)


def apply_cooperative_limits(env: AdapterEnv) -> None:
    """Apply the environment's limits to this process, best effort.

    Must run before any accelerator allocation: the per-process memory
    fraction only affects allocations made after it is set.
    """
    if env.gpu_disabled:
        log.info("accelerator disabled by orchestrator; training on CPU")
        return
    if not torch.cuda.is_available():
        return
    if env.vram_fraction < 1.0:
        try:
            torch.cuda.set_per_process_memory_fraction(env.vram_fraction)
            log.info("accelerator memory fraction capped at %.3f", env.vram_fraction)
        except (RuntimeError, AttributeError) as exc:
            log.warning("could not cap accelerator memory fraction: %s", exc)


def select_device(env: AdapterEnv) -> torch.device:
    if env.gpu_disabled or not torch.cuda.is_available():
        return torch.device("cpu")
    return torch.device("cuda")


def dataloader_workers(env: AdapterEnv) -> int:
    """Loader worker count sized from the advertised core count; a single
    core means in-process loading (no extra worker processes)."""
    return env.cpu_cores if env.cpu_cores > 1 else 0
