"""Hardware profiles, host capabilities, and enforcement planning.

A profile describes the device to emulate; a plan is the host-relative set of
limits that realizes it. Emulation works by restriction only, so a profile is
emulable iff every capacity is at most the host's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import DuplicateId, InvariantViolation, NotEmulable, ParseError

# Environment contract for every spawned client (see also enforcer/scheduler).
ENV_MPS_PCT = "CUDA_MPS_ACTIVE_THREAD_PERCENTAGE"
ENV_VRAM_FRACTION = "BOUQUET_VRAM_FRACTION"
ENV_CPU_CORES = "BOUQUET_CPU_CORES"
ENV_PROFILE_ID = "BOUQUET_PROFILE_ID"
ENV_GPU_DISABLED = "BOUQUET_GPU_DISABLED"

MIB = 1 << 20


def _require(condition: bool, field_name: str, rule: str) -> None:
    if not condition:
        raise InvariantViolation(field_name, rule)


@dataclass(frozen=True)
class CpuSpec:
    model_name: str
    cores: int
    threads: int
    base_clock_mhz: int
    boost_clock_mhz: int

    def __post_init__(self):
        _require(self.cores >= 1, "cpu.cores", "cores >= 1")
        _require(self.threads >= self.cores, "cpu.threads", "threads >= cores")
        _require(self.base_clock_mhz > 0, "cpu.base_clock_mhz", "base clock > 0")
        _require(
            self.boost_clock_mhz >= self.base_clock_mhz,
            "cpu.boost_clock_mhz",
            "boost clock >= base clock",
        )


@dataclass(frozen=True)
class GpuSpec:
    model_name: str
    cuda_cores: int
    base_clock_mhz: int
    boost_clock_mhz: int
    vram_mib: int
    generation: str

    def __post_init__(self):
        _require(self.cuda_cores >= 1, "gpu.cuda_cores", "cuda_cores >= 1")
        _require(self.base_clock_mhz > 0, "gpu.base_clock_mhz", "base clock > 0")
        _require(
            self.boost_clock_mhz >= self.base_clock_mhz,
            "gpu.boost_clock_mhz",
            "boost clock >= base clock",
        )
        _require(self.vram_mib >= 1, "gpu.vram_mib", "vram_mib >= 1")


@dataclass(frozen=True)
class HardwareProfile:
    id: str
    cpu: CpuSpec
    ram_mib: int
    gpu: GpuSpec | None = None

    def __post_init__(self):
        _require(bool(self.id), "id", "id nonempty")
        _require(self.ram_mib >= 1, "ram_mib", "ram_mib >= 1")


@dataclass(frozen=True)
class HostCapabilities:
    """Profile-shaped description of the actual host plus probed capability flags.

    The booleans reflect probe results, never assumptions: a capability is
    true only after the underlying mechanism was found (and, where possible,
    exercised) on this host.
    """

    id: str
    cpu: CpuSpec
    ram_mib: int
    gpu: GpuSpec | None = None
    has_gpu_management_tool: bool = False
    has_mps: bool = False
    has_cgroup_v2: bool = False
    has_cpu_freq_control: bool = False
    is_privileged: bool = False

    def as_profile(self) -> HardwareProfile:
        return HardwareProfile(id=self.id, cpu=self.cpu, ram_mib=self.ram_mib, gpu=self.gpu)


@dataclass(frozen=True)
class EnforcementPlan:
    """Host-relative limits realizing one profile. gpu_* fields are present
    iff both the profile and the host have a GPU."""

    cpu_core_count: int
    memory_max_bytes: int
    cpu_freq_cap_khz: int | None = None
    gpu_active_thread_pct: int | None = None
    gpu_core_clock_cap_mhz: int | None = None
    gpu_mem_clock_cap_mhz: int | None = None
    vram_fraction: float | None = None
    child_env: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _require(self.cpu_core_count >= 1, "plan.cpu_core_count", "core count >= 1")
        _require(self.memory_max_bytes >= 1, "plan.memory_max_bytes", "memory cap >= 1")
        if self.gpu_active_thread_pct is not None:
            _require(
                1 <= self.gpu_active_thread_pct <= 100,
                "plan.gpu_active_thread_pct",
                "percentage in [1, 100]",
            )
        if self.vram_fraction is not None:
            _require(
                0.0 < self.vram_fraction <= 1.0,
                "plan.vram_fraction",
                "fraction in (0, 1]",
            )


# ---------------------------------------------------------------------------
# Catalog (de)serialization. File format: UTF-8 JSON, top-level array of
# profile objects with exactly the HardwareProfile fields; the gpu object is
# optional; unknown fields are rejected.
# ---------------------------------------------------------------------------

_CPU_FIELDS = {"model_name", "cores", "threads", "base_clock_mhz", "boost_clock_mhz"}
_GPU_FIELDS = {"model_name", "cuda_cores", "base_clock_mhz", "boost_clock_mhz", "vram_mib", "generation"}
_PROFILE_FIELDS = {"id", "cpu", "gpu", "ram_mib"}


def _check_fields(obj: dict, allowed: set[str], required: set[str], locus: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError("expected an object", locus=locus)
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"unknown field(s) {sorted(unknown)}", locus=locus)
    missing = required - set(obj)
    if missing:
        raise ParseError(f"missing field(s) {sorted(missing)}", locus=locus)


def _as_int(value, locus: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"expected integer, got {value!r}", locus=locus)
    return value


def _as_str(value, locus: str) -> str:
    if not isinstance(value, str):
        raise ParseError(f"expected string, got {value!r}", locus=locus)
    return value


def _cpu_from_dict(obj: dict, locus: str) -> CpuSpec:
    _check_fields(obj, _CPU_FIELDS, _CPU_FIELDS, locus)
    return CpuSpec(
        model_name=_as_str(obj["model_name"], f"{locus}.model_name"),
        cores=_as_int(obj["cores"], f"{locus}.cores"),
        threads=_as_int(obj["threads"], f"{locus}.threads"),
        base_clock_mhz=_as_int(obj["base_clock_mhz"], f"{locus}.base_clock_mhz"),
        boost_clock_mhz=_as_int(obj["boost_clock_mhz"], f"{locus}.boost_clock_mhz"),
    )


def _gpu_from_dict(obj: dict, locus: str) -> GpuSpec:
    _check_fields(obj, _GPU_FIELDS, _GPU_FIELDS, locus)
    return GpuSpec(
        model_name=_as_str(obj["model_name"], f"{locus}.model_name"),
        cuda_cores=_as_int(obj["cuda_cores"], f"{locus}.cuda_cores"),
        base_clock_mhz=_as_int(obj["base_clock_mhz"], f"{locus}.base_clock_mhz"),
        boost_clock_mhz=_as_int(obj["boost_clock_mhz"], f"{locus}.boost_clock_mhz"),
        vram_mib=_as_int(obj["vram_mib"], f"{locus}.vram_mib"),
        generation=_as_str(obj["generation"], f"{locus}.generation"),
    )


def profile_from_dict(obj: dict, locus: str = "profile") -> HardwareProfile:
    _check_fields(obj, _PROFILE_FIELDS, {"id", "cpu", "ram_mib"}, locus)
    gpu = None
    if obj.get("gpu") is not None:
        gpu = _gpu_from_dict(obj["gpu"], f"{locus}.gpu")
    return HardwareProfile(
        id=_as_str(obj["id"], f"{locus}.id"),
        cpu=_cpu_from_dict(obj["cpu"], f"{locus}.cpu"),
        ram_mib=_as_int(obj["ram_mib"], f"{locus}.ram_mib"),
        gpu=gpu,
    )


def profile_to_dict(profile: HardwareProfile) -> dict:
    out: dict = {
        "id": profile.id,
        "cpu": {
            "model_name": profile.cpu.model_name,
            "cores": profile.cpu.cores,
            "threads": profile.cpu.threads,
            "base_clock_mhz": profile.cpu.base_clock_mhz,
            "boost_clock_mhz": profile.cpu.boost_clock_mhz,
        },
        "ram_mib": profile.ram_mib,
    }
    if profile.gpu is not None:
        out["gpu"] = {
            "model_name": profile.gpu.model_name,
            "cuda_cores": profile.gpu.cuda_cores,
            "base_clock_mhz": profile.gpu.base_clock_mhz,
            "boost_clock_mhz": profile.gpu.boost_clock_mhz,
            "vram_mib": profile.gpu.vram_mib,
            "generation": profile.gpu.generation,
        }
    return out


def load_profile_catalog(path: Path | str) -> dict[str, HardwareProfile]:
    """Load a catalog file into an id -> profile map.

    Raises ParseError (with a line/field locus), DuplicateId, or
    InvariantViolation from the profile constructors.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", locus=f"line {exc.lineno}") from exc
    if not isinstance(raw, list):
        raise ParseError("catalog must be a top-level array", locus=str(path))
    catalog: dict[str, HardwareProfile] = {}
    for i, obj in enumerate(raw):
        profile = profile_from_dict(obj, locus=f"profiles[{i}]")
        if profile.id in catalog:
            raise DuplicateId(profile.id)
        catalog[profile.id] = profile
    return catalog


def save_profile_catalog(catalog: dict[str, HardwareProfile], path: Path | str) -> None:
    payload = [profile_to_dict(p) for p in catalog.values()]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def fixture_path(name: str) -> Path:
    """Path to a bundled fixture file (catalogs, tables, workloads)."""
    return Path(str(resources.files("bouquet").joinpath("fixtures", name)))


def host_to_dict(host: HostCapabilities) -> dict:
    out = profile_to_dict(host.as_profile())
    out.update(
        {
            "has_gpu_management_tool": host.has_gpu_management_tool,
            "has_mps": host.has_mps,
            "has_cgroup_v2": host.has_cgroup_v2,
            "has_cpu_freq_control": host.has_cpu_freq_control,
            "is_privileged": host.is_privileged,
        }
    )
    return out


def pseudo_host(profile: HardwareProfile) -> HostCapabilities:
    """Host description for simulated mode: the reference device's shape with
    every capability flag down (nothing was probed; nothing will be enforced).
    Keeps simulated reports independent of the machine they ran on."""
    return HostCapabilities(id=profile.id, cpu=profile.cpu, ram_mib=profile.ram_mib, gpu=profile.gpu)


# ---------------------------------------------------------------------------
# Host validation and planning
# ---------------------------------------------------------------------------


def validate_against_host(profile: HardwareProfile, host: HostCapabilities) -> list[str]:
    """Report every way `profile` exceeds the host. Empty report = emulable.

    Violations are data, not errors; each line names the offending field.
    """
    violations: list[str] = []
    if profile.cpu.cores > host.cpu.cores:
        violations.append(
            f"cpu.cores: profile needs {profile.cpu.cores}, host has {host.cpu.cores}"
        )
    if profile.cpu.boost_clock_mhz > host.cpu.boost_clock_mhz:
        violations.append(
            f"cpu.boost_clock_mhz: profile needs {profile.cpu.boost_clock_mhz}, "
            f"host peaks at {host.cpu.boost_clock_mhz}"
        )
    if profile.ram_mib > host.ram_mib:
        violations.append(
            f"ram_mib: profile needs {profile.ram_mib}, host has {host.ram_mib}"
        )
    if profile.gpu is not None:
        if host.gpu is None:
            violations.append("gpu: profile has a GPU but the host has none")
        else:
            if profile.gpu.cuda_cores > host.gpu.cuda_cores:
                violations.append(
                    f"gpu.cuda_cores: profile needs {profile.gpu.cuda_cores}, "
                    f"host has {host.gpu.cuda_cores}"
                )
            if profile.gpu.boost_clock_mhz > host.gpu.boost_clock_mhz:
                violations.append(
                    f"gpu.boost_clock_mhz: profile needs {profile.gpu.boost_clock_mhz}, "
                    f"host peaks at {host.gpu.boost_clock_mhz}"
                )
            if profile.gpu.vram_mib > host.gpu.vram_mib:
                violations.append(
                    f"gpu.vram_mib: profile needs {profile.gpu.vram_mib}, "
                    f"host has {host.gpu.vram_mib}"
                )
    return violations


def plan_enforcement(profile: HardwareProfile, host: HostCapabilities) -> EnforcementPlan:
    """Translate an emulable profile into host-relative limits.

    GPU compute share is the CUDA-core ratio to the host, ceiling-rounded and
    clamped to [1, 100]; clock caps target the profile's boost clocks (consumer
    devices run near boost under sustained training); RAM is capped by capacity
    only. Raises NotEmulable when validate_against_host reports violations.
    """
    violations = validate_against_host(profile, host)
    if violations:
        raise NotEmulable(violations)

    gpu_pct: int | None = None
    vram_fraction: float | None = None
    gpu_clock_cap: int | None = None
    gpu_enabled = profile.gpu is not None and host.gpu is not None
    if gpu_enabled:
        assert profile.gpu is not None and host.gpu is not None
        # integer ceiling; exact, no float rounding surprises
        gpu_pct = -(-100 * profile.gpu.cuda_cores // host.gpu.cuda_cores)
        gpu_pct = max(1, min(100, gpu_pct))
        vram_fraction = profile.gpu.vram_mib / host.gpu.vram_mib
        gpu_clock_cap = profile.gpu.boost_clock_mhz

    child_env = {
        ENV_MPS_PCT: str(gpu_pct if gpu_pct is not None else 100),
        ENV_VRAM_FRACTION: repr(vram_fraction if vram_fraction is not None else 1.0),
        ENV_CPU_CORES: str(profile.cpu.cores),
        ENV_PROFILE_ID: profile.id,
        ENV_GPU_DISABLED: "0" if gpu_enabled else "1",
    }

    return EnforcementPlan(
        cpu_core_count=profile.cpu.cores,
        memory_max_bytes=profile.ram_mib * MIB,
        cpu_freq_cap_khz=profile.cpu.boost_clock_mhz * 1000,
        gpu_active_thread_pct=gpu_pct,
        gpu_core_clock_cap_mhz=gpu_clock_cap,
        gpu_mem_clock_cap_mhz=None,  # profiles carry no memory clock spec
        vram_fraction=vram_fraction,
        child_env=child_env,
    )
