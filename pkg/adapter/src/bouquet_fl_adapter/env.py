"""Parsed view of the orchestrator's child-environment contract."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

ENV_CPU_CORES = "BOUQUET_CPU_CORES"
ENV_VRAM_FRACTION = "BOUQUET_VRAM_FRACTION"
ENV_GPU_DISABLED = "BOUQUET_GPU_DISABLED"
ENV_MPS_PCT = "CUDA_MPS_ACTIVE_THREAD_PERCENTAGE"
ENV_PROFILE_ID = "BOUQUET_PROFILE_ID"


@dataclass
class AdapterEnv:
    """Missing or malformed variables fall back to the unrestricted defaults,
    with the reason kept in `warnings` (and logged)."""

    cpu_cores: int
    vram_fraction: float
    gpu_disabled: bool
    mps_active_thread_pct: int
    profile_id: str | None
    warnings: list[str] = field(default_factory=list)


def _default_cores() -> int:
    return os.cpu_count() or 1


def read_env(environ: dict[str, str] | None = None) -> AdapterEnv:
    environ = os.environ if environ is None else environ
    warnings: list[str] = []

    def warn(message: str):
        warnings.append(message)
        log.warning(message)

    cores = _default_cores()
    raw = environ.get(ENV_CPU_CORES)
    if raw is None:
        warn(f"{ENV_CPU_CORES} not set; running with all {cores} cores")
    else:
        try:
            value = int(raw)
            if value >= 1:
                cores = value
            else:
                warn(f"{ENV_CPU_CORES}={raw!r} below 1; using {cores}")
        except ValueError:
            warn(f"{ENV_CPU_CORES}={raw!r} not an integer; using {cores}")

    fraction = 1.0
    raw = environ.get(ENV_VRAM_FRACTION)
    if raw is None:
        warn(f"{ENV_VRAM_FRACTION} not set; accelerator memory unrestricted")
    else:
        try:
            value = float(raw)
            if 0.0 < value <= 1.0:
                fraction = value
            else:
                warn(f"{ENV_VRAM_FRACTION}={raw!r} outside (0, 1]; using 1.0")
        except ValueError:
            warn(f"{ENV_VRAM_FRACTION}={raw!r} not a number; using 1.0")

    disabled = False
    raw = environ.get(ENV_GPU_DISABLED)
    if raw is None:
        warn(f"{ENV_GPU_DISABLED} not set; accelerator left enabled")
    elif raw in ("0", "1"):
        disabled = raw == "1"
    else:
        warn(f"{ENV_GPU_DISABLED}={raw!r} not 0/1; GPU left enabled")

    pct = 100
    raw = environ.get(ENV_MPS_PCT)
    if raw is None:
        warn(f"{ENV_MPS_PCT} not set; full compute share assumed")
    else:
        try:
            value = int(raw)
            if 1 <= value <= 100:
                pct = value
            else:
                warn(f"{ENV_MPS_PCT}={raw!r} outside [1, 100]; using 100")
        except ValueError:
            warn(f"{ENV_MPS_PCT}={raw!r} not an integer; using 100")

    return AdapterEnv(
        cpu_cores=cores,
        vram_fraction=fraction,
        gpu_disabled=disabled,
        mps_active_thread_pct=pct,
        profile_id=environ.get(ENV_PROFILE_ID),
        warnings=warnings,
    )
