"""Leases over global host limits, with a real and a mock backend.

Most of the controls here (CPU frequency, GPU clocks, MPS share) act on the
whole host, not a single process. The lease makes that explicit: at most one
unreleased lease exists at any time, apply records every prior value, and
release restores them in reverse order. Clients therefore run strictly one
at a time.

The real backend touches the host through two seams only: a command runner
(cpupower / nvidia-smi / MPS control) and filesystem roots for sysfs and the
cgroup v2 hierarchy. Tests and the CLI's --fake-commands mode point both at
scratch locations; the logic stays identical.
"""

from __future__ import annotations

import errno
import os
import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import (
    ExternalCommandFailed,
    LeaseHeld,
    PrivilegeError,
    ReleaseFailed,
    UnsupportedAction,
)
from ..profiles import EnforcementPlan
from .commands import SystemCommandRunner
from .probe import (
    ACTION_CPU_AFFINITY,
    ACTION_CPU_FREQ,
    ACTION_GPU_CLOCK,
    ACTION_GPU_MPS,
    ACTION_MEMORY_CGROUP,
    ACTION_VRAM_HINT,
    REASON_PRIVILEGE,
    BackendCapabilityReport,
    cgroup_root,
    probe_host,
    sysfs_root,
)

ORCHESTRATOR_SUBTREE = "bouquet"


@dataclass(frozen=True)
class Action:
    """One reversible host mutation. prior_value None means "was unset"
    (restore = remove / reset-to-default)."""

    kind: str
    target: str
    prior_value: str | None
    new_value: str | None


@dataclass
class EnforcementLease:
    plan: EnforcementPlan
    backend_id: str
    applied_at: float
    actions_taken: list[Action] = field(default_factory=list)
    released: bool = False
    skipped: list[str] = field(default_factory=list)
    cgroup_path: Path | None = None


@dataclass
class ReleaseReport:
    warnings: list[str] = field(default_factory=list)
    restored: int = 0


def required_actions(plan: EnforcementPlan) -> list[str]:
    actions = [ACTION_CPU_AFFINITY]
    if plan.cpu_freq_cap_khz is not None:
        actions.append(ACTION_CPU_FREQ)
    if plan.memory_max_bytes:
        actions.append(ACTION_MEMORY_CGROUP)
    if plan.gpu_core_clock_cap_mhz is not None or plan.gpu_mem_clock_cap_mhz is not None:
        actions.append(ACTION_GPU_CLOCK)
    if plan.gpu_active_thread_pct is not None:
        actions.append(ACTION_GPU_MPS)
    if plan.vram_fraction is not None:
        actions.append(ACTION_VRAM_HINT)
    return actions


class MockBackend:
    """Records intended actions against an in-memory host model; executes
    nothing. The state dict lets tests assert restore-to-snapshot."""

    backend_id = "mock"

    DEFAULT_STATE = {
        "cpu_freq_khz": 5_000_000,
        "gpu_core_clock_mhz": None,
        "gpu_mem_clock_mhz": None,
    }

    def __init__(self):
        self.state: dict = dict(self.DEFAULT_STATE)
        self.cgroups: dict[str, int] = {}
        self.mps_started = False

    def capabilities(self) -> BackendCapabilityReport:
        report = BackendCapabilityReport()
        for action in (
            ACTION_CPU_FREQ,
            ACTION_CPU_AFFINITY,
            ACTION_MEMORY_CGROUP,
            ACTION_GPU_CLOCK,
            ACTION_GPU_MPS,
            ACTION_VRAM_HINT,
        ):
            report.mark(action, True)
        return report

    def snapshot(self) -> dict:
        return {"state": dict(self.state), "cgroups": dict(self.cgroups)}

    def perform(self, plan: EnforcementPlan, scope: str, allowed: set[str]) -> list[Action]:
        actions: list[Action] = []
        if ACTION_CPU_FREQ in allowed and plan.cpu_freq_cap_khz is not None:
            prior = self.state["cpu_freq_khz"]
            self.state["cpu_freq_khz"] = plan.cpu_freq_cap_khz
            actions.append(Action("cpu_freq", "cpu", str(prior), str(plan.cpu_freq_cap_khz)))
        if ACTION_MEMORY_CGROUP in allowed and plan.memory_max_bytes:
            self.cgroups[scope] = plan.memory_max_bytes
            actions.append(Action("memory_cgroup", scope, None, str(plan.memory_max_bytes)))
        if ACTION_GPU_CLOCK in allowed:
            if plan.gpu_core_clock_cap_mhz is not None:
                prior = self.state["gpu_core_clock_mhz"]
                self.state["gpu_core_clock_mhz"] = plan.gpu_core_clock_cap_mhz
                actions.append(
                    Action(
                        "gpu_core_clock",
                        "gpu",
                        None if prior is None else str(prior),
                        str(plan.gpu_core_clock_cap_mhz),
                    )
                )
            if plan.gpu_mem_clock_cap_mhz is not None:
                prior = self.state["gpu_mem_clock_mhz"]
                self.state["gpu_mem_clock_mhz"] = plan.gpu_mem_clock_cap_mhz
                actions.append(
                    Action(
                        "gpu_mem_clock",
                        "gpu",
                        None if prior is None else str(prior),
                        str(plan.gpu_mem_clock_cap_mhz),
                    )
                )
        if ACTION_GPU_MPS in allowed and plan.gpu_active_thread_pct is not None:
            self.mps_started = True  # daemon ownership is per-experiment, not per-lease
        return actions

    def undo(self, action: Action) -> None:
        if action.kind == "cpu_freq":
            self.state["cpu_freq_khz"] = int(action.prior_value)
        elif action.kind == "memory_cgroup":
            self.cgroups.pop(action.target, None)
        elif action.kind == "gpu_core_clock":
            self.state["gpu_core_clock_mhz"] = (
                None if action.prior_value is None else int(action.prior_value)
            )
        elif action.kind == "gpu_mem_clock":
            self.state["gpu_mem_clock_mhz"] = (
                None if action.prior_value is None else int(action.prior_value)
            )

    def cgroup_path_for(self, scope: str) -> Path | None:
        return None

    def stale_state(self) -> list[str]:
        return [f"mock cgroup left behind: {scope}" for scope in self.cgroups]

    def reset(self) -> list[str]:
        lines: list[str] = []
        if self.state["cpu_freq_khz"] != self.DEFAULT_STATE["cpu_freq_khz"]:
            self.state["cpu_freq_khz"] = self.DEFAULT_STATE["cpu_freq_khz"]
            lines.append("cpu frequency cap removed")
        for key, label in (
            ("gpu_core_clock_mhz", "gpu core clocks reset"),
            ("gpu_mem_clock_mhz", "gpu memory clocks reset"),
        ):
            if self.state[key] is not None:
                self.state[key] = None
                lines.append(label)
        for scope in sorted(self.cgroups):
            lines.append(f"removed cgroup {scope}")
        self.cgroups.clear()
        if self.mps_started:
            self.mps_started = False
            lines.append("MPS control daemon stopped")
        return lines


class RealBackend:
    """Applies limits through cpupower, cgroup v2 files, nvidia-smi, and the
    MPS control environment. Roots and the command runner are injectable."""

    backend_id = "real"

    def __init__(
        self,
        runner=None,
        root: Path | None = None,
        cgroups: Path | None = None,
        run_id: str = "run",
        capabilities: BackendCapabilityReport | None = None,
    ):
        self.runner = runner or SystemCommandRunner()
        self.root = root or sysfs_root()
        self.cgroup_base = cgroups or cgroup_root(self.root)
        self.run_id = run_id
        self._capabilities = capabilities
        self.owns_mps = False
        self._gpu_dirty = False  # clock locks issued and not yet reset

    # -- capability probing -------------------------------------------------

    def capabilities(self) -> BackendCapabilityReport:
        if self._capabilities is None:
            _, self._capabilities = probe_host(runner=self.runner, root=self.root)
        return self._capabilities

    # -- helpers ------------------------------------------------------------

    def _cpufreq(self, name: str) -> Path:
        return self.root / "sys/devices/system/cpu/cpu0/cpufreq" / name

    def cgroup_path_for(self, scope: str) -> Path:
        return self.cgroup_base / ORCHESTRATOR_SUBTREE / self.run_id / scope

    def _write_file(self, path: Path, value: str) -> None:
        try:
            path.write_text(value, encoding="utf-8")
        except OSError as exc:
            raise ExternalCommandFailed(["write", str(path), value], 1, str(exc)) from exc

    def _make_cgroup(self, leaf: Path) -> None:
        chain = [leaf]
        top = self.cgroup_base / ORCHESTRATOR_SUBTREE
        while chain[0] != top and top in chain[0].parents:
            chain.insert(0, chain[0].parent)
        for level in chain:
            try:
                level.mkdir(exist_ok=True)
            except OSError as exc:
                raise ExternalCommandFailed(["mkdir", str(level)], 1, str(exc)) from exc
        # the memory controller must be delegated down to the leaf's parent
        for level in (self.cgroup_base, *chain[:-1]):
            control = level / "cgroup.subtree_control"
            if control.exists():
                try:
                    control.write_text("+memory", encoding="utf-8")
                except OSError:
                    pass  # may already be enabled, or the root is not ours to change

    def _remove_cgroup(self, path: Path) -> None:
        """Remove one cgroup (or scratch directory), killing stragglers on
        EBUSY. EBUSY only ever comes from a live cgroupfs, so pids read from
        cgroup.procs there are live kernel state, not stale file content."""
        if not path.exists():
            return
        for attempt in range(5):
            try:
                path.rmdir()
                return
            except OSError as exc:
                if exc.errno == errno.ENOTEMPTY:
                    for child in sorted(path.iterdir()):
                        if child.is_dir():
                            self._remove_cgroup(child)
                        else:
                            child.unlink(missing_ok=True)
                elif exc.errno == errno.EBUSY:
                    procs = path / "cgroup.procs"
                    try:
                        pids = [int(line) for line in procs.read_text().split() if line.strip()]
                    except (OSError, ValueError):
                        pids = []
                    for pid in pids:
                        try:
                            os.kill(pid, signal.SIGKILL)
                        except OSError:
                            pass
                    for child in sorted(p for p in path.iterdir() if p.is_dir()):
                        self._remove_cgroup(child)
                    time.sleep(0.05 * (attempt + 1))
                else:
                    raise ExternalCommandFailed(["rmdir", str(path)], 1, str(exc)) from exc
        raise ExternalCommandFailed(["rmdir", str(path)], 1, "still busy after retries")

    def _prune_empty_ancestors(self, leaf: Path) -> None:
        """Remove now-empty run/orchestrator directories above a released
        client cgroup, so no orchestrator-owned cgroup outlives its lease."""
        top = self.cgroup_base / ORCHESTRATOR_SUBTREE
        current = leaf.parent
        while current == top or top in current.parents:
            try:
                current.rmdir()
            except OSError:
                return  # not empty (another run id) or already gone
            current = current.parent

    # -- lease actions ------------------------------------------------------

    def perform(self, plan: EnforcementPlan, scope: str, allowed: set[str]) -> list[Action]:
        actions: list[Action] = []
        try:
            if ACTION_CPU_FREQ in allowed and plan.cpu_freq_cap_khz is not None:
                prior = self._cpufreq("scaling_max_freq").read_text().strip()
                self.runner.run(
                    ["cpupower", "frequency-set", "-u", f"{plan.cpu_freq_cap_khz}kHz"]
                ).check()
                actions.append(
                    Action("cpu_freq", str(self._cpufreq("scaling_max_freq")), prior,
                           str(plan.cpu_freq_cap_khz))
                )
            if ACTION_MEMORY_CGROUP in allowed and plan.memory_max_bytes:
                leaf = self.cgroup_path_for(scope)
                self._make_cgroup(leaf)
                self._write_file(leaf / "memory.max", str(plan.memory_max_bytes))
                if (leaf / "memory.swap.max").exists():
                    # a hard cap must OOM-kill, not spill to swap
                    try:
                        (leaf / "memory.swap.max").write_text("0", encoding="utf-8")
                    except OSError:
                        pass
                actions.append(
                    Action("memory_cgroup", str(leaf), None, str(plan.memory_max_bytes))
                )
            if ACTION_GPU_CLOCK in allowed:
                if plan.gpu_core_clock_cap_mhz is not None:
                    self.runner.run(
                        ["nvidia-smi", "-lgc", str(plan.gpu_core_clock_cap_mhz)]
                    ).check()
                    self._gpu_dirty = True
                    actions.append(
                        Action("gpu_core_clock", "gpu0", None, str(plan.gpu_core_clock_cap_mhz))
                    )
                if plan.gpu_mem_clock_cap_mhz is not None:
                    self.runner.run(
                        ["nvidia-smi", "-lmc", str(plan.gpu_mem_clock_cap_mhz)]
                    ).check()
                    self._gpu_dirty = True
                    actions.append(
                        Action("gpu_mem_clock", "gpu0", None, str(plan.gpu_mem_clock_cap_mhz))
                    )
            if ACTION_GPU_MPS in allowed and plan.gpu_active_thread_pct is not None:
                self._ensure_mps()
        except Exception:
            for action in reversed(actions):  # never leave a half-applied plan
                try:
                    self.undo(action)
                except Exception:
                    pass
            raise
        return actions

    def _ensure_mps(self) -> None:
        # per-experiment ownership: started once, stopped by emergency_reset
        if self.owns_mps:
            return
        result = self.runner.run(["nvidia-cuda-mps-control", "-d"])
        if result.returncode == 0:
            self.owns_mps = True

    def undo(self, action: Action) -> None:
        if action.kind == "cpu_freq":
            self.runner.run(
                ["cpupower", "frequency-set", "-u", f"{action.prior_value}kHz"]
            ).check()
        elif action.kind == "memory_cgroup":
            leaf = Path(action.target)
            self._remove_cgroup(leaf)
            self._prune_empty_ancestors(leaf)
        elif action.kind == "gpu_core_clock":
            self.runner.run(["nvidia-smi", "-rgc"]).check()
            self._gpu_dirty = False
        elif action.kind == "gpu_mem_clock":
            self.runner.run(["nvidia-smi", "-rmc"]).check()

    # -- crash recovery -----------------------------------------------------

    def stale_state(self) -> list[str]:
        subtree = self.cgroup_base / ORCHESTRATOR_SUBTREE
        if not subtree.is_dir():
            return []
        found = [str(p) for p in sorted(subtree.rglob("*")) if p.is_dir()]
        return [f"stale orchestrator cgroup: {p}" for p in found] or [
            f"stale orchestrator cgroup: {subtree}"
        ]

    def reset(self) -> list[str]:
        """Best-effort restore of hardware defaults; reports, never raises.

        A clean host produces an empty report: each step runs only on
        evidence of leftover state. The orchestrator cgroup subtree doubles
        as the cross-process dirt marker for GPU state, since clock locks are
        only ever issued while a client cgroup exists.
        """
        lines: list[str] = []
        privileged = hasattr(os, "geteuid") and os.geteuid() == 0
        subtree = self.cgroup_base / ORCHESTRATOR_SUBTREE
        crash_evidence = subtree.exists()

        scaling = self._cpufreq("scaling_max_freq")
        hw_max = self._cpufreq("cpuinfo_max_freq")
        try:
            current = scaling.read_text().strip()
            default = hw_max.read_text().strip()
        except OSError:
            current = default = ""
        if current and default and current != default:
            if self.runner.which("cpupower") is None:
                lines.append("cpu frequency restore skipped (cpupower not installed)")
            elif not privileged:
                lines.append(f"cpu frequency restore skipped ({REASON_PRIVILEGE})")
            else:
                result = self.runner.run(["cpupower", "frequency-set", "-u", f"{default}kHz"])
                if result.returncode == 0:
                    lines.append(f"cpu frequency cap removed (restored {default} kHz)")
                else:
                    lines.append(f"cpu frequency restore failed: {result.stderr.strip()}")

        if crash_evidence:
            if not os.access(subtree.parent, os.W_OK):
                lines.append(f"cgroup cleanup skipped ({REASON_PRIVILEGE})")
            else:
                try:
                    self._remove_cgroup(subtree)
                    lines.append(f"removed orchestrator cgroup subtree {subtree}")
                except Exception as exc:
                    lines.append(f"cgroup cleanup failed: {exc}")

        if (self._gpu_dirty or crash_evidence) and self.runner.which("nvidia-smi") is not None:
            if not privileged:
                lines.append(f"gpu clock reset skipped ({REASON_PRIVILEGE})")
            else:
                for flag, label in (("-rgc", "gpu core clocks reset"), ("-rmc", "gpu memory clocks reset")):
                    result = self.runner.run(["nvidia-smi", flag])
                    lines.append(label if result.returncode == 0 else f"{label} failed")
                self._gpu_dirty = False

        if (self.owns_mps or crash_evidence) and self.runner.which(
            "nvidia-cuda-mps-control"
        ) is not None:
            result = self.runner.run(["nvidia-cuda-mps-control"], input_text="quit\n")
            if result.returncode == 0:
                lines.append("MPS control daemon stopped")
            self.owns_mps = False
        return lines


class Enforcer:
    """Serializes apply/release and guards the single-lease invariant.

    One instance per orchestrator process; the host-global nature of the
    controls means one orchestrator per host is the deployment contract.
    """

    def __init__(self, backend):
        self.backend = backend
        self._lock = threading.Lock()
        self._active: EnforcementLease | None = None
        self._counter = 0

    @property
    def active_lease(self) -> EnforcementLease | None:
        return self._active

    def apply(
        self,
        plan: EnforcementPlan,
        scope: str | None = None,
        allow_degrade: bool = False,
    ) -> EnforcementLease:
        with self._lock:
            if self._active is not None and not self._active.released:
                raise LeaseHeld("an unreleased lease already exists")
            caps = self.backend.capabilities()
            needed = required_actions(plan)
            blocked = [(a, caps.reason(a)) for a in needed if not caps.supports(a)]
            if blocked and not allow_degrade:
                if all(REASON_PRIVILEGE in reason for _, reason in blocked):
                    raise PrivilegeError(
                        "; ".join(f"{a}: {r}" for a, r in blocked)
                    )
                raise UnsupportedAction(blocked[0][0], blocked[0][1])
            allowed = {a for a in needed if caps.supports(a)}
            self._counter += 1
            scope = scope or f"lease{self._counter:04d}"
            actions = self.backend.perform(plan, scope, allowed)
            lease = EnforcementLease(
                plan=plan,
                backend_id=self.backend.backend_id,
                applied_at=time.monotonic(),
                actions_taken=actions,
                skipped=[f"{a}: {r}" for a, r in blocked],
                cgroup_path=self.backend.cgroup_path_for(scope)
                if ACTION_MEMORY_CGROUP in allowed
                else None,
            )
            self._active = lease
            return lease

    def release(self, lease: EnforcementLease) -> ReleaseReport:
        """Restore prior values in reverse order. Restores continue past
        failures; failures are aggregated into one ReleaseFailed. A second
        release is a warning, not an error."""
        with self._lock:
            if lease.released:
                return ReleaseReport(warnings=["AlreadyReleased"])
            failures: list[str] = []
            restored = 0
            for action in reversed(lease.actions_taken):
                try:
                    self.backend.undo(action)
                    restored += 1
                except Exception as exc:
                    failures.append(f"{action.kind} on {action.target}: {exc}")
            lease.released = True
            if self._active is lease:
                self._active = None
            if failures:
                raise ReleaseFailed(failures)
            return ReleaseReport(restored=restored)

    def emergency_reset(self) -> list[str]:
        """Force the host back to defaults. Partial failures are report
        lines; this never raises."""
        with self._lock:
            self._active = None
            try:
                return self.backend.reset()
            except Exception as exc:  # reset must never propagate
                return [f"reset failed: {exc}"]

    def stale_state(self) -> list[str]:
        return self.backend.stale_state()
