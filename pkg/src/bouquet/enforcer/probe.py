"""Read-only host probing: topology, clocks, memory, GPU inventory, and
per-mechanism capability checks. Nothing here modifies host state; the one
write (a scratch cgroup with a limit written and read back) is cleaned up and
only attempted to verify the mechanism actually works.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

from ..profiles import CpuSpec, GpuSpec, HardwareProfile, HostCapabilities
from .commands import SystemCommandRunner

ACTION_CPU_FREQ = "cpu_freq"
ACTION_CPU_AFFINITY = "cpu_affinity"
ACTION_MEMORY_CGROUP = "memory_cgroup"
ACTION_GPU_CLOCK = "gpu_clock"
ACTION_GPU_MPS = "gpu_mps"
ACTION_VRAM_HINT = "vram_hint"

ALL_ACTIONS = (
    ACTION_CPU_FREQ,
    ACTION_CPU_AFFINITY,
    ACTION_MEMORY_CGROUP,
    ACTION_GPU_CLOCK,
    ACTION_GPU_MPS,
    ACTION_VRAM_HINT,
)

REASON_PRIVILEGE = "requires elevated privileges"

ENV_CGROUP_ROOT = "BOUQUET_CGROUP_ROOT"
ENV_SYSFS_ROOT = "BOUQUET_SYSFS_ROOT"


@dataclass
class BackendCapabilityReport:
    """Per-action support flags; every unsupported action carries a reason."""

    supported: dict[str, bool] = dataclass_field(default_factory=dict)
    reasons: dict[str, str] = dataclass_field(default_factory=dict)
    notes: list[str] = dataclass_field(default_factory=list)

    def mark(self, action: str, ok: bool, reason: str = "") -> None:
        self.supported[action] = ok
        if not ok:
            self.reasons[action] = reason or "unavailable"

    def supports(self, action: str) -> bool:
        return self.supported.get(action, False)

    def reason(self, action: str) -> str:
        return self.reasons.get(action, "")

    def to_dict(self) -> dict:
        return {
            "supported": dict(sorted(self.supported.items())),
            "reasons": dict(sorted(self.reasons.items())),
            "notes": list(self.notes),
        }


def sysfs_root() -> Path:
    return Path(os.environ.get(ENV_SYSFS_ROOT, "/"))


def cgroup_root(root: Path | None = None) -> Path:
    env = os.environ.get(ENV_CGROUP_ROOT)
    if env:
        return Path(env)
    return (root or sysfs_root()) / "sys/fs/cgroup"


def _read_text(path: Path) -> str | None:
    try:
        return path.read_text(encoding="utf-8")
    except OSError:
        return None


def read_cpu_spec(root: Path) -> CpuSpec:
    """CPU model/topology from /proc/cpuinfo; clocks from sysfs cpufreq when
    present, else the highest reported "cpu MHz" (containers often hide
    cpufreq, and a conservative boost is all emulability checks need)."""
    cpuinfo = _read_text(root / "proc/cpuinfo") or ""
    model = "unknown"
    threads = 0
    cores_seen: set[tuple[str, str]] = set()
    physical_id = core_id = ""
    max_mhz = 0.0
    for line in cpuinfo.splitlines():
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if key == "processor":
            threads += 1
            physical_id = core_id = ""
        elif key == "model name" and model == "unknown":
            model = value
        elif key == "physical id":
            physical_id = value
        elif key == "core id":
            core_id = value
            cores_seen.add((physical_id, core_id))
        elif key == "cpu MHz":
            try:
                max_mhz = max(max_mhz, float(value))
            except ValueError:
                pass
    threads = threads or os.cpu_count() or 1
    cores = len(cores_seen) or threads

    cpufreq = root / "sys/devices/system/cpu/cpu0/cpufreq"
    boost_khz = _read_int(cpufreq / "cpuinfo_max_freq")
    base_khz = _read_int(cpufreq / "cpuinfo_min_freq")
    if boost_khz:
        boost_mhz = boost_khz // 1000
        base_mhz = (base_khz // 1000) if base_khz else boost_mhz
    else:
        boost_mhz = max(int(max_mhz), 1)
        base_mhz = boost_mhz
    return CpuSpec(
        model_name=model,
        cores=cores,
        threads=max(threads, cores),
        base_clock_mhz=max(base_mhz, 1),
        boost_clock_mhz=max(boost_mhz, base_mhz, 1),
    )


def _read_int(path: Path) -> int | None:
    text = _read_text(path)
    if text is None:
        return None
    try:
        return int(text.strip())
    except ValueError:
        return None


def read_ram_mib(root: Path) -> int:
    meminfo = _read_text(root / "proc/meminfo") or ""
    match = re.search(r"^MemTotal:\s+(\d+)\s*kB", meminfo, re.MULTILINE)
    if not match:
        return 1
    return max(int(match.group(1)) // 1024, 1)


def _normalize_gpu_name(name: str) -> str:
    name = name.lower()
    for noise in ("nvidia", "geforce", "(r)", "(tm)"):
        name = name.replace(noise, "")
    return " ".join(name.split())


def read_gpu_spec(
    runner, catalog: dict[str, HardwareProfile] | None, report: BackendCapabilityReport
) -> GpuSpec | None:
    """GPU inventory via the vendor management command. Core counts are not
    reported by the tool, so they resolve through a catalog name match; with
    no match the GPU is noted but left out of the host description."""
    out = runner.run(
        [
            "nvidia-smi",
            "--query-gpu=name,clocks.max.sm,clocks.max.mem,memory.total",
            "--format=csv,noheader,nounits",
        ]
    )
    if out.returncode != 0 or not out.stdout.strip():
        return None
    first = out.stdout.strip().splitlines()[0]
    parts = [p.strip() for p in first.split(",")]
    if len(parts) != 4:
        report.notes.append(f"unparseable GPU inventory line: {first!r}")
        return None
    name, max_sm, _max_mem, mem_total = parts
    try:
        boost_mhz = int(max_sm)
        vram_mib = int(mem_total)
    except ValueError:
        report.notes.append(f"unparseable GPU clocks/memory: {first!r}")
        return None

    matched: GpuSpec | None = None
    wanted = _normalize_gpu_name(name)
    for profile in (catalog or {}).values():
        if profile.gpu is None:
            continue
        candidate = _normalize_gpu_name(profile.gpu.model_name)
        if candidate == wanted or candidate in wanted or wanted in candidate:
            matched = profile.gpu
            break
    if matched is None:
        report.notes.append(
            f"GPU {name!r} present but its core count is not in the catalog; "
            "pass a host profile to enable compute-share planning"
        )
        return None
    return GpuSpec(
        model_name=name,
        cuda_cores=matched.cuda_cores,
        base_clock_mhz=min(matched.base_clock_mhz, boost_mhz),
        boost_clock_mhz=boost_mhz,
        vram_mib=vram_mib,
        generation=matched.generation,
    )


def probe_cgroup_memory(croot: Path, privileged: bool) -> tuple[bool, bool, str]:
    """(v2 hierarchy present, memory limit verified, reason-if-not).

    Verification creates a scratch subgroup, writes memory.max, reads it
    back, and removes the subgroup again.
    """
    controllers = _read_text(croot / "cgroup.controllers")
    if controllers is None:
        return False, False, f"no cgroup v2 hierarchy at {croot}"
    is_real_cgroupfs = True
    if "memory" not in controllers.split():
        # A scratch root (plain directory) has an empty/absent controller
        # list; treat a writable scratch root as a fake cgroupfs for tests.
        if controllers.strip() == "" and os.access(croot, os.W_OK):
            is_real_cgroupfs = False
        else:
            return True, False, "memory controller not available in the v2 hierarchy"
    scratch = croot / f"bouquet-probe-{os.getpid()}"
    limit = str(256 * 1024 * 1024)
    try:
        scratch.mkdir(exist_ok=True)
        if is_real_cgroupfs and not (scratch / "memory.max").exists():
            # controller must be enabled in the parent before the file appears
            try:
                (croot / "cgroup.subtree_control").write_text("+memory", encoding="utf-8")
            except OSError:
                pass
        (scratch / "memory.max").write_text(limit, encoding="utf-8")
        echoed = (scratch / "memory.max").read_text(encoding="utf-8").strip()
        ok = echoed == limit
        return True, ok, "" if ok else f"memory.max readback mismatch: {echoed!r}"
    except PermissionError:
        return True, False, REASON_PRIVILEGE if not privileged else "cgroup hierarchy not writable"
    except OSError as exc:
        return True, False, f"cgroup probe failed: {exc}"
    finally:
        try:
            for leftover in scratch.iterdir():
                try:
                    leftover.unlink()  # plain scratch files; cgroupfs refuses, fine
                except OSError:
                    pass
            scratch.rmdir()
        except OSError:
            pass


def probe_host(
    runner=None,
    root: Path | None = None,
    catalog: dict[str, HardwareProfile] | None = None,
    host_profile: HardwareProfile | None = None,
) -> tuple[HostCapabilities, BackendCapabilityReport]:
    """Inspect the host and report what each enforcement mechanism can do.

    Absence of a mechanism is a report entry, not an error. `host_profile`
    overrides the probed CPU/GPU/RAM description (capability flags are always
    probed, never taken from the override).
    """
    runner = runner or SystemCommandRunner()
    root = root or sysfs_root()
    report = BackendCapabilityReport()
    privileged = hasattr(os, "geteuid") and os.geteuid() == 0

    cpu = read_cpu_spec(root)
    ram_mib = read_ram_mib(root)

    has_nvidia_smi = runner.which("nvidia-smi") is not None
    has_mps = runner.which("nvidia-cuda-mps-control") is not None
    gpu = read_gpu_spec(runner, catalog, report) if has_nvidia_smi else None

    cpufreq_dir = root / "sys/devices/system/cpu/cpu0/cpufreq"
    has_cpupower = runner.which("cpupower") is not None
    has_cpufreq_sysfs = (cpufreq_dir / "scaling_max_freq").exists()
    if not has_cpufreq_sysfs:
        report.mark(ACTION_CPU_FREQ, False, "no cpufreq interface exposed by the kernel")
    elif not has_cpupower:
        report.mark(ACTION_CPU_FREQ, False, "cpupower not installed")
    elif not privileged:
        report.mark(ACTION_CPU_FREQ, False, REASON_PRIVILEGE)
    else:
        report.mark(ACTION_CPU_FREQ, True)

    report.mark(
        ACTION_CPU_AFFINITY,
        hasattr(os, "sched_setaffinity"),
        "platform lacks sched_setaffinity",
    )

    croot = cgroup_root(root)
    has_v2, mem_ok, mem_reason = probe_cgroup_memory(croot, privileged)
    report.mark(ACTION_MEMORY_CGROUP, mem_ok, mem_reason)

    if not has_nvidia_smi:
        report.mark(ACTION_GPU_CLOCK, False, "nvidia-smi not installed")
    elif not privileged:
        report.mark(ACTION_GPU_CLOCK, False, REASON_PRIVILEGE)
    else:
        report.mark(ACTION_GPU_CLOCK, True)

    report.mark(ACTION_GPU_MPS, has_mps, "nvidia-cuda-mps-control not installed")
    report.mark(ACTION_VRAM_HINT, True)  # cooperative env hint, always deliverable

    if host_profile is not None:
        cpu, gpu, ram_mib = host_profile.cpu, host_profile.gpu, host_profile.ram_mib

    host = HostCapabilities(
        id=host_profile.id if host_profile is not None else "host",
        cpu=cpu,
        ram_mib=ram_mib,
        gpu=gpu,
        has_gpu_management_tool=has_nvidia_smi,
        has_mps=has_mps,
        has_cgroup_v2=has_v2,
        has_cpu_freq_control=has_cpufreq_sysfs and has_cpupower,
        is_privileged=privileged,
    )
    return host, report
