"""Sequential execution of federation rounds.

For each sampled client in order: apply the enforcement plan, spawn the
training command inside the restricted environment, classify the outcome,
and release the plan before the next client. Exactly one client is in flight
at any time; the enforcer's single-lease rule makes that structural.

Simulated mode replaces the spawn with the analytic performance model and a
virtual clock, so whole experiments are reproducible byte-for-byte on any
machine, with no privileges and no GPU.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import string
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import perfmodel
from .enforcer.core import Enforcer
from .errors import BouquetError, ConfigError, ReleaseFailed, UnknownProfileId
from .perfmodel import WorkloadSpec
from .prng import splitmix64_stream
from .profiles import (
    MIB,
    HardwareProfile,
    HostCapabilities,
    host_to_dict,
    plan_enforcement,
    profile_to_dict,
)
from .sampler import NO_FILTER, PopularityTable, SamplerFilter, sample_federation

MODE_REAL = "real"
MODE_SIMULATED = "simulated"

STATUS_OK = "ok"
STATUS_NONZERO = "nonzero_exit"
STATUS_OOM = "oom_killed"
STATUS_TIMEOUT = "timeout"
STATUS_SPAWN_FAILED = "spawn_failed"

KILL_GRACE_S = 2.0


@dataclass(frozen=True)
class RunStatus:
    kind: str
    exit_code: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "exit_code": self.exit_code}

    @staticmethod
    def from_dict(obj: dict) -> "RunStatus":
        return RunStatus(kind=obj["kind"], exit_code=obj.get("exit_code"))


@dataclass(frozen=True)
class TaskCommand:
    argv: tuple[str, ...]
    working_dir: Path | None = None
    params_in: Path | None = None
    params_out: Path | None = None
    timeout_s: float = 300.0
    extra_env: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.argv:
            raise ConfigError("task argv must be nonempty")
        exe = self.argv[0]
        if shutil.which(exe) is None and not Path(exe).exists():
            raise ConfigError(f"task executable not resolvable: {exe!r}")
        if self.params_in is not None and not self.params_in.is_file():
            raise ConfigError(f"params_in not readable: {self.params_in}")
        if self.params_out is not None:
            parent = self.params_out.parent
            parent.mkdir(parents=True, exist_ok=True)
            if not os.access(parent, os.W_OK):
                raise ConfigError(f"params_out directory not writable: {parent}")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be positive")


@dataclass(frozen=True)
class TaskTemplate:
    """Per-experiment task description; per-client commands are produced by
    substituting $params_in, $params_out, $client_idx, $profile_id, and
    $round_idx ($-style, so shell/JSON braces in argv stay untouched)."""

    argv: tuple[str, ...]
    params_in: str | None = None
    params_out_template: str | None = None
    timeout_s: float = 300.0
    working_dir: str | None = None
    extra_env: dict[str, str] = field(default_factory=dict)

    def instantiate(
        self, round_idx: int, client_idx: int, profile_id: str, artifacts_dir: Path
    ) -> TaskCommand:
        if self.params_out_template:
            params_out = Path(
                string.Template(self.params_out_template).safe_substitute(
                    round_idx=round_idx, client_idx=client_idx, profile_id=profile_id
                )
            )
        else:
            params_out = (
                artifacts_dir
                / f"round_{round_idx:04d}"
                / f"client_{client_idx:04d}"
                / "params_out.bin"
            )
        subs = {
            "params_in": self.params_in or "",
            "params_out": str(params_out),
            "client_idx": str(client_idx),
            "profile_id": profile_id,
            "round_idx": str(round_idx),
        }
        argv = tuple(string.Template(a).safe_substitute(**subs) for a in self.argv)
        return TaskCommand(
            argv=argv,
            working_dir=Path(self.working_dir) if self.working_dir else None,
            params_in=Path(self.params_in) if self.params_in else None,
            params_out=params_out,
            timeout_s=self.timeout_s,
            extra_env=dict(self.extra_env),
        )

    def to_dict(self) -> dict:
        return {
            "argv": list(self.argv),
            "params_in": self.params_in,
            "params_out_template": self.params_out_template,
            "timeout_s": self.timeout_s,
            "working_dir": self.working_dir,
            "extra_env": dict(self.extra_env),
        }


@dataclass
class ClientRunResult:
    client_idx: int
    profile_id: str
    status: RunStatus
    wall_time_s: float
    peak_memory_bytes: int
    started_at: float
    ended_at: float
    params_out: Path | None = None
    enforcement_skips: list[str] = field(default_factory=list)
    detail: str | None = None

    def to_dict(self) -> dict:
        return {
            "client_idx": self.client_idx,
            "profile_id": self.profile_id,
            "status": self.status.to_dict(),
            "wall_time_s": self.wall_time_s,
            "peak_memory_bytes": self.peak_memory_bytes,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "params_out": str(self.params_out) if self.params_out else None,
            "enforcement_skips": list(self.enforcement_skips),
            "detail": self.detail,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ClientRunResult":
        return ClientRunResult(
            client_idx=obj["client_idx"],
            profile_id=obj["profile_id"],
            status=RunStatus.from_dict(obj["status"]),
            wall_time_s=obj["wall_time_s"],
            peak_memory_bytes=obj["peak_memory_bytes"],
            started_at=obj["started_at"],
            ended_at=obj["ended_at"],
            params_out=Path(obj["params_out"]) if obj.get("params_out") else None,
            enforcement_skips=list(obj.get("enforcement_skips", [])),
            detail=obj.get("detail"),
        )


@dataclass
class RoundReport:
    round_idx: int
    host: HostCapabilities | None
    runs: list[ClientRunResult]
    mode: str

    def check_sequential(self) -> None:
        for earlier, later in zip(self.runs, self.runs[1:]):
            if later.started_at < earlier.ended_at:
                raise AssertionError(
                    f"overlapping client runs in round {self.round_idx}: "
                    f"{earlier.client_idx} and {later.client_idx}"
                )

    def write_jsonl(self, path: Path) -> None:
        with path.open("w", encoding="utf-8") as fh:
            for run in self.runs:
                fh.write(json.dumps(run.to_dict(), sort_keys=True) + "\n")


def load_round_reports(directory: Path | str) -> list[RoundReport]:
    """Rebuild reports from a results directory (round_*.jsonl + manifest)."""
    directory = Path(directory)
    mode = "unknown"
    manifest_path = directory / "manifest.json"
    if manifest_path.is_file():
        mode = json.loads(manifest_path.read_text(encoding="utf-8")).get("mode", "unknown")
    reports = []
    for idx, path in enumerate(sorted(directory.glob("round_*.jsonl"))):
        runs = [
            ClientRunResult.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        reports.append(RoundReport(round_idx=idx, host=None, runs=runs, mode=mode))
    return reports


# ---------------------------------------------------------------------------
# Single client execution
# ---------------------------------------------------------------------------


def _simulate_client(
    profile: HardwareProfile,
    workload: WorkloadSpec,
    catalog: dict[str, HardwareProfile],
    client_idx: int,
    clock: float,
) -> ClientRunResult:
    ram_bytes = profile.ram_mib * MIB
    failure = perfmodel.predict_failure(profile, workload)
    detail = None
    if failure == perfmodel.FAILURE_NONE:
        try:
            wall = perfmodel.predict_time(profile, workload, catalog)
            status = RunStatus(STATUS_OK)
            peak = min(workload.peak_ram_bytes, ram_bytes)
        except BouquetError as exc:
            wall, status, peak = 0.0, RunStatus(STATUS_SPAWN_FAILED), 0
            detail = str(exc)
    elif failure == perfmodel.FAILURE_OOM_RAM:
        # capacity exceeded at allocation time, before the training loop
        wall, status, peak = 0.0, RunStatus(STATUS_OOM), ram_bytes
    else:
        wall, status, peak = 0.0, RunStatus(STATUS_NONZERO, exit_code=1), 0
        detail = "simulated accelerator out-of-memory"
    return ClientRunResult(
        client_idx=client_idx,
        profile_id=profile.id,
        status=status,
        wall_time_s=wall,
        peak_memory_bytes=peak,
        started_at=clock,
        ended_at=clock + wall,
        detail=detail,
    )


def _read_cgroup_int(path: Path | None, name: str) -> int | None:
    if path is None:
        return None
    try:
        return int((path / name).read_text().strip())
    except (OSError, ValueError):
        return None


def _read_oom_kills(cgroup_path: Path | None) -> int:
    if cgroup_path is None:
        return 0
    try:
        text = (cgroup_path / "memory.events").read_text(encoding="utf-8")
    except OSError:
        return 0
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] == "oom_kill":
            try:
                return int(parts[1])
            except ValueError:
                return 0
    return 0


def _spawn_and_reap(
    task: TaskCommand, env: dict[str, str], cgroup_path: Path | None, cpuset: set[int] | None
) -> tuple[int, float, float, int, bool]:
    """Spawn the child, reap it with resource accounting, enforce the deadline.

    Returns (exit_code, started_at, ended_at, rusage_peak_bytes, timed_out).
    The child enters the lease's cgroup and affinity set between fork and
    exec, so no training instruction runs outside the limits.
    """

    def _bind_child():
        if cgroup_path is not None:
            fd = os.open(str(cgroup_path / "cgroup.procs"), os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, str(os.getpid()).encode("ascii"))
            finally:
                os.close(fd)
        if cpuset and hasattr(os, "sched_setaffinity"):
            os.sched_setaffinity(0, cpuset)

    log_dir = task.params_out.parent if task.params_out is not None else None
    stdout_target = stderr_target = subprocess.DEVNULL
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        stdout_target = (log_dir / "stdout.log").open("wb")
        stderr_target = (log_dir / "stderr.log").open("wb")

    started_at = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(task.argv),
            cwd=str(task.working_dir) if task.working_dir else None,
            env=env,
            stdout=stdout_target,
            stderr=stderr_target,
            stdin=subprocess.DEVNULL,
            preexec_fn=_bind_child,
        )
    finally:
        for handle in (stdout_target, stderr_target):
            if handle not in (subprocess.DEVNULL,):
                handle.close()

    timed_out = threading.Event()

    def _deadline_kill():
        timed_out.set()
        try:
            proc.kill()
        except OSError:
            pass

    watchdog = threading.Timer(task.timeout_s, _deadline_kill)
    watchdog.daemon = True
    watchdog.start()
    try:
        _, wait_status, rusage = os.wait4(proc.pid, 0)
    finally:
        watchdog.cancel()
    ended_at = time.monotonic()
    exit_code = os.waitstatus_to_exitcode(wait_status)
    proc.returncode = exit_code  # already reaped; keep Popen from waiting again
    return exit_code, started_at, ended_at, rusage.ru_maxrss * 1024, timed_out.is_set()


def run_client(
    profile: HardwareProfile,
    task: TaskCommand | None,
    *,
    host: HostCapabilities,
    enforcer: Enforcer,
    mode: str,
    client_idx: int = 0,
    scope: str | None = None,
    workload: WorkloadSpec | None = None,
    catalog: dict[str, HardwareProfile] | None = None,
    clock: float = 0.0,
    degrade_allowed: bool = False,
) -> ClientRunResult:
    """Run one client under its profile's limits and classify the outcome."""
    if mode == MODE_SIMULATED:
        if workload is None or catalog is None:
            raise ConfigError("simulated mode needs a workload and a catalog")
        return _simulate_client(profile, workload, catalog, client_idx, clock)
    if mode != MODE_REAL:
        raise ConfigError(f"unknown mode {mode!r}")
    if task is None:
        raise ConfigError("real mode needs a task command")

    task.validate()
    plan = plan_enforcement(profile, host)  # raises NotEmulable with the report
    lease = enforcer.apply(plan, scope=scope, allow_degrade=degrade_allowed)
    result: ClientRunResult | None = None
    try:
        env = dict(os.environ)
        env.update(plan.child_env)
        env.update(task.extra_env)
        cpuset = set(range(min(plan.cpu_core_count, os.cpu_count() or 1)))
        try:
            exit_code, started_at, ended_at, rusage_peak, timed_out = _spawn_and_reap(
                task, env, lease.cgroup_path, cpuset
            )
        except (OSError, subprocess.SubprocessError) as exc:
            now = time.monotonic()
            result = ClientRunResult(
                client_idx=client_idx,
                profile_id=profile.id,
                status=RunStatus(STATUS_SPAWN_FAILED),
                wall_time_s=0.0,
                peak_memory_bytes=0,
                started_at=now,
                ended_at=now,
                enforcement_skips=list(lease.skipped),
                detail=f"spawn failed: {exc}",
            )
            return result

        oom_kills = _read_oom_kills(lease.cgroup_path)
        cgroup_peak = _read_cgroup_int(lease.cgroup_path, "memory.peak")
        peak = cgroup_peak if cgroup_peak is not None else rusage_peak

        detail: str | None = None
        if oom_kills > 0:
            status = RunStatus(STATUS_OOM, exit_code=exit_code)
        elif timed_out and exit_code != 0:
            status = RunStatus(STATUS_TIMEOUT, exit_code=exit_code)
        elif exit_code == 0:
            if task.params_out is not None and not (
                task.params_out.is_file() and task.params_out.stat().st_size > 0
            ):
                status = RunStatus(STATUS_NONZERO, exit_code=0)
                detail = "exited 0 without writing params_out"
            else:
                status = RunStatus(STATUS_OK, exit_code=0)
        else:
            status = RunStatus(STATUS_NONZERO, exit_code=exit_code)
            detail = _tail_of(task, "stderr.log")

        result = ClientRunResult(
            client_idx=client_idx,
            profile_id=profile.id,
            status=status,
            wall_time_s=ended_at - started_at,
            peak_memory_bytes=peak,
            started_at=started_at,
            ended_at=ended_at,
            params_out=task.params_out if status.kind == STATUS_OK else None,
            enforcement_skips=list(lease.skipped),
            detail=detail,
        )
        return result
    finally:
        try:
            enforcer.release(lease)
        except ReleaseFailed as exc:
            # the round continues; leftover state is the reset command's job
            note = f"release failures: {'; '.join(exc.failures)}"
            if result is not None:
                result.detail = f"{result.detail}; {note}" if result.detail else note


def _tail_of(task: TaskCommand, name: str, limit: int = 512) -> str | None:
    if task.params_out is None:
        return None
    path = task.params_out.parent / name
    try:
        text = path.read_text(encoding="utf-8", errors="replace").strip()
    except OSError:
        return None
    return text[-limit:] if text else None


# ---------------------------------------------------------------------------
# Rounds and experiments
# ---------------------------------------------------------------------------


def run_round(
    federation: list[str],
    catalog: dict[str, HardwareProfile],
    task_template: TaskTemplate | None,
    *,
    host: HostCapabilities,
    enforcer: Enforcer,
    mode: str,
    workload: WorkloadSpec | None = None,
    round_idx: int = 0,
    artifacts_dir: Path | None = None,
    degrade_allowed: bool = False,
) -> RoundReport:
    """Execute one round strictly in federation order. A client's failure is
    recorded and the round continues; only unknown profile ids abort."""
    for profile_id in federation:
        if profile_id not in catalog:
            raise UnknownProfileId(profile_id)

    artifacts_dir = artifacts_dir or Path.cwd() / "bouquet_artifacts"
    runs: list[ClientRunResult] = []
    clock = 0.0
    for client_idx, profile_id in enumerate(federation):
        profile = catalog[profile_id]
        task = None
        if mode == MODE_REAL and task_template is not None:
            task = task_template.instantiate(round_idx, client_idx, profile_id, artifacts_dir)
        try:
            result = run_client(
                profile,
                task,
                host=host,
                enforcer=enforcer,
                mode=mode,
                client_idx=client_idx,
                scope=f"r{round_idx:04d}c{client_idx:04d}",
                workload=workload,
                catalog=catalog,
                clock=clock,
                degrade_allowed=degrade_allowed,
            )
        except BouquetError as exc:
            now = clock if mode == MODE_SIMULATED else time.monotonic()
            result = ClientRunResult(
                client_idx=client_idx,
                profile_id=profile_id,
                status=RunStatus(STATUS_SPAWN_FAILED),
                wall_time_s=0.0,
                peak_memory_bytes=0,
                started_at=now,
                ended_at=now,
                detail=str(exc),
            )
        runs.append(result)
        clock = max(clock, result.ended_at)

    report = RoundReport(round_idx=round_idx, host=host, runs=runs, mode=mode)
    report.check_sequential()
    return report


def _sha256_of_json(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def catalog_digest(catalog: dict[str, HardwareProfile]) -> str:
    return _sha256_of_json(sorted((pid, profile_to_dict(p)) for pid, p in catalog.items()))


def table_digest(table: PopularityTable) -> str:
    return _sha256_of_json({"entries": list(table.entries), "source_label": table.source_label})


def run_experiment(
    *,
    catalog: dict[str, HardwareProfile],
    table: PopularityTable,
    host: HostCapabilities,
    enforcer: Enforcer,
    mode: str,
    rounds: int,
    clients_per_round: int,
    seed: int,
    out_dir: Path,
    task_template: TaskTemplate | None = None,
    workload: WorkloadSpec | None = None,
    sample_filter: SamplerFilter = NO_FILTER,
    degrade_allowed: bool = False,
) -> list[RoundReport]:
    """Run `rounds` federation rounds and persist reports plus a manifest.

    Round r draws its federation with the r-th sub-seed of the experiment
    seed, so a rerun reproduces every round and distinct rounds sample
    distinct federations. Abnormal termination triggers an emergency reset
    in real mode.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if clients_per_round < 0:
        raise ConfigError("clients_per_round must be >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    round_seeds = splitmix64_stream(seed, rounds)
    reports: list[RoundReport] = []
    federations: list[list[str]] = []
    round_files: list[str] = []
    try:
        for round_idx in range(rounds):
            federation = sample_federation(
                table, clients_per_round, round_seeds[round_idx], catalog, sample_filter
            )
            federations.append(federation)
            report = run_round(
                federation,
                catalog,
                task_template,
                host=host,
                enforcer=enforcer,
                mode=mode,
                workload=workload,
                round_idx=round_idx,
                artifacts_dir=out_dir / "artifacts",
                degrade_allowed=degrade_allowed,
            )
            file_name = f"round_{round_idx:04d}.jsonl"
            report.write_jsonl(out_dir / file_name)
            round_files.append(file_name)
            reports.append(report)
    except BaseException:
        if mode == MODE_REAL:
            enforcer.emergency_reset()
        raise

    manifest = {
        "format_version": 1,
        "mode": mode,
        "seed": seed,
        "rounds": rounds,
        "clients_per_round": clients_per_round,
        "catalog_sha256": catalog_digest(catalog),
        "table_sha256": table_digest(table),
        "workload_sha256": _sha256_of_json(workload.__dict__) if workload else None,
        "host": host_to_dict(host),
        "federations": federations,
        "round_files": round_files,
        "task": task_template.to_dict() if task_template else None,
        "degrade_allowed": degrade_allowed,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return reports
