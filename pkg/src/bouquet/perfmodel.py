"""Analytic timing/failure model backing simulated mode.

Wall time is a two-term separable model matching the load-then-train shape of
a local training round: a GPU-compute term scaled by the profile's CUDA-core
and boost-clock ratios to the reference host, plus a CPU data-loading term
scaled by core count (saturating at the reference count) and CPU boost ratio.
It is a test vehicle for the pipeline, not a fidelity claim: memory bandwidth,
caches, and transfer overheads are deliberately not modeled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import MissingGpu, ParseError, UnknownReferenceHost
from .profiles import MIB, HardwareProfile, _as_int, _as_str, _check_fields

FAILURE_NONE = "none"
FAILURE_OOM_RAM = "oom_ram"
FAILURE_OOM_VRAM = "oom_vram"


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    t_compute_ref_s: float
    t_load_ref_s: float
    peak_ram_bytes: int
    peak_vram_bytes: int
    reference_host_id: str

    def __post_init__(self):
        if not (self.t_compute_ref_s > 0 and self.t_compute_ref_s == self.t_compute_ref_s):
            raise ParseError("t_compute_ref_s must be positive and finite")
        if not (self.t_load_ref_s >= 0 and self.t_load_ref_s == self.t_load_ref_s):
            raise ParseError("t_load_ref_s must be nonnegative and finite")
        if self.peak_ram_bytes <= 0:
            raise ParseError("peak_ram_bytes must be positive")
        if self.peak_vram_bytes < 0:
            raise ParseError("peak_vram_bytes must be nonnegative")


_WORKLOAD_FIELDS = {
    "name",
    "t_compute_ref_s",
    "t_load_ref_s",
    "peak_ram_bytes",
    "peak_vram_bytes",
    "reference_host_id",
}


def load_workload(path: Path | str) -> WorkloadSpec:
    """Load a workload JSON object with exactly the WorkloadSpec fields."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", locus=f"line {exc.lineno}") from exc
    _check_fields(obj, _WORKLOAD_FIELDS, _WORKLOAD_FIELDS, locus="workload")
    for key in ("t_compute_ref_s", "t_load_ref_s"):
        if isinstance(obj[key], bool) or not isinstance(obj[key], (int, float)):
            raise ParseError(f"expected number, got {obj[key]!r}", locus=f"workload.{key}")
    return WorkloadSpec(
        name=_as_str(obj["name"], "workload.name"),
        t_compute_ref_s=float(obj["t_compute_ref_s"]),
        t_load_ref_s=float(obj["t_load_ref_s"]),
        peak_ram_bytes=_as_int(obj["peak_ram_bytes"], "workload.peak_ram_bytes"),
        peak_vram_bytes=_as_int(obj["peak_vram_bytes"], "workload.peak_vram_bytes"),
        reference_host_id=_as_str(obj["reference_host_id"], "workload.reference_host_id"),
    )


def _reference(workload: WorkloadSpec, catalog: dict[str, HardwareProfile]) -> HardwareProfile:
    ref = catalog.get(workload.reference_host_id)
    if ref is None:
        raise UnknownReferenceHost(workload.reference_host_id)
    return ref


def predict_time(
    profile: HardwareProfile,
    workload: WorkloadSpec,
    catalog: dict[str, HardwareProfile],
) -> float:
    """Predicted wall seconds for one local training run.

    t = t_compute / (s * c_g) + t_load / (k * c_c) with s the CUDA-core ratio,
    c_g the GPU boost ratio, k the core-count ratio saturated at 1, and c_c the
    CPU boost ratio, all relative to the workload's reference host.
    """
    ref = _reference(workload, catalog)
    if profile.gpu is None:
        raise MissingGpu(f"profile {profile.id!r} has no GPU for workload {workload.name!r}")
    if ref.gpu is None:
        raise MissingGpu(f"reference host {ref.id!r} has no GPU")
    s = profile.gpu.cuda_cores / ref.gpu.cuda_cores
    c_g = profile.gpu.boost_clock_mhz / ref.gpu.boost_clock_mhz
    k = min(profile.cpu.cores, ref.cpu.cores) / ref.cpu.cores
    c_c = profile.cpu.boost_clock_mhz / ref.cpu.boost_clock_mhz
    return workload.t_compute_ref_s / (s * c_g) + workload.t_load_ref_s / (k * c_c)


def predict_failure(profile: HardwareProfile, workload: WorkloadSpec) -> str:
    """Capacity-only OOM check. RAM is checked before VRAM; a workload whose
    peaks fit exactly (equality) does not fail."""
    if workload.peak_ram_bytes > profile.ram_mib * MIB:
        return FAILURE_OOM_RAM
    if profile.gpu is not None and workload.peak_vram_bytes > profile.gpu.vram_mib * MIB:
        return FAILURE_OOM_VRAM
    return FAILURE_NONE
