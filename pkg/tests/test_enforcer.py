from __future__ import annotations

import os
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bouquet.enforcer.commands import CommandResult, RecordingCommandRunner
from bouquet.enforcer.core import Enforcer, MockBackend, RealBackend
from bouquet.enforcer.probe import (
    ACTION_CPU_FREQ,
    ACTION_GPU_CLOCK,
    ACTION_GPU_MPS,
    ACTION_MEMORY_CGROUP,
    ALL_ACTIONS,
    REASON_PRIVILEGE,
    BackendCapabilityReport,
    probe_host,
)
from bouquet.errors import (
    ExternalCommandFailed,
    LeaseHeld,
    PrivilegeError,
    ReleaseFailed,
    UnsupportedAction,
)
from bouquet.profiles import EnforcementPlan

def full_caps() -> BackendCapabilityReport:
    report = BackendCapabilityReport()
    for action in ALL_ACTIONS:
        report.mark(action, True)
    return report


def simple_plan(**overrides) -> EnforcementPlan:
    defaults = dict(
        cpu_core_count=2,
        memory_max_bytes=256 * 1024 * 1024,
        cpu_freq_cap_khz=1_500_000,
        gpu_active_thread_pct=None,
        gpu_core_clock_cap_mhz=None,
        gpu_mem_clock_cap_mhz=None,
        vram_fraction=None,
        child_env={},
    )
    defaults.update(overrides)
    return EnforcementPlan(**defaults)


class TestProbe:
    def test_unprivileged_cpu_freq_reason(self, scratch_sysfs, monkeypatch):
        monkeypatch.setattr(os, "geteuid", lambda: 1000)
        runner = RecordingCommandRunner()  # cpupower "installed"
        host, report = probe_host(runner=runner, root=scratch_sysfs)
        assert host.is_privileged is False
        assert report.supports(ACTION_CPU_FREQ) is False
        assert report.reason(ACTION_CPU_FREQ) == REASON_PRIVILEGE

    def test_gpu_less_host(self, scratch_sysfs):
        runner = RecordingCommandRunner(available=())
        host, report = probe_host(runner=runner, root=scratch_sysfs)
        assert host.has_gpu_management_tool is False
        assert host.gpu is None
        assert report.supports(ACTION_GPU_CLOCK) is False
        assert report.supports(ACTION_GPU_MPS) is False

    def test_scratch_cgroup_memory_verified(self, scratch_sysfs):
        runner = RecordingCommandRunner(available=())
        host, report = probe_host(runner=runner, root=scratch_sysfs)
        assert report.supports(ACTION_MEMORY_CGROUP) is True
        assert host.has_cgroup_v2 is True
        # the scratch probe group must be cleaned up again
        leftovers = list((scratch_sysfs / "sys/fs/cgroup").glob("bouquet-probe-*"))
        assert leftovers == []

    def test_v2_without_memory_controller(self, scratch_sysfs):
        (scratch_sysfs / "sys/fs/cgroup/cgroup.controllers").write_text("hugetlb")
        runner = RecordingCommandRunner(available=())
        _, report = probe_host(runner=runner, root=scratch_sysfs)
        assert report.supports(ACTION_MEMORY_CGROUP) is False
        assert "memory controller" in report.reason(ACTION_MEMORY_CGROUP)

    def test_cpu_topology_from_scratch_tree(self, scratch_sysfs):
        runner = RecordingCommandRunner(available=())
        host, _ = probe_host(runner=runner, root=scratch_sysfs)
        assert host.cpu.cores == 2
        assert host.cpu.threads == 2
        assert host.cpu.boost_clock_mhz == 4000
        assert host.ram_mib == 32768

    def test_gpu_resolved_through_catalog(self, scratch_sysfs, catalog):
        runner = RecordingCommandRunner(
            responses={
                ("nvidia-smi",): CommandResult(
                    (), 0, "NVIDIA GeForce RTX 4070 SUPER, 3105, 10501, 12282\n", ""
                )
            }
        )
        host, _ = probe_host(runner=runner, root=scratch_sysfs, catalog=catalog)
        assert host.gpu is not None
        assert host.gpu.cuda_cores == 7168
        assert host.gpu.boost_clock_mhz == 3105
        assert host.gpu.vram_mib == 12282

    def test_unknown_gpu_noted(self, scratch_sysfs, catalog):
        runner = RecordingCommandRunner(
            responses={
                ("nvidia-smi",): CommandResult((), 0, "Imaginary GPU 9000, 1000, 1000, 4096\n", "")
            }
        )
        host, report = probe_host(runner=runner, root=scratch_sysfs, catalog=catalog)
        assert host.gpu is None
        assert any("core count" in note for note in report.notes)

    def test_probe_never_claims_unprobed(self, scratch_sysfs):
        runner = RecordingCommandRunner(available=())
        host, report = probe_host(runner=runner, root=scratch_sysfs)
        for action, ok in report.supported.items():
            if not ok:
                assert report.reason(action)


class TestMockLease:
    def test_memory_only_plan_records_one_action(self):
        enforcer = Enforcer(MockBackend())
        plan = simple_plan(cpu_freq_cap_khz=None)
        lease = enforcer.apply(plan)
        assert len(lease.actions_taken) == 1
        assert lease.actions_taken[0].kind == "memory_cgroup"
        enforcer.release(lease)

    def test_apply_while_held(self):
        enforcer = Enforcer(MockBackend())
        lease = enforcer.apply(simple_plan())
        with pytest.raises(LeaseHeld):
            enforcer.apply(simple_plan())
        enforcer.release(lease)
        enforcer.apply(simple_plan())  # released -> allowed again

    def test_release_marks_restored(self):
        backend = MockBackend()
        enforcer = Enforcer(backend)
        before = backend.snapshot()
        lease = enforcer.apply(simple_plan())
        assert backend.snapshot() != before
        report = enforcer.release(lease)
        assert lease.released is True
        assert report.restored == len(lease.actions_taken)
        assert backend.snapshot() == before

    def test_double_release_is_warning(self):
        enforcer = Enforcer(MockBackend())
        lease = enforcer.apply(simple_plan())
        enforcer.release(lease)
        report = enforcer.release(lease)
        assert report.warnings == ["AlreadyReleased"]

    def test_concurrent_single_lease(self):
        enforcer = Enforcer(MockBackend())
        outcomes: list[str] = []
        lock = threading.Lock()
        barrier = threading.Barrier(8)

        def worker():
            barrier.wait()
            try:
                lease = enforcer.apply(simple_plan())
                with lock:
                    outcomes.append("won")
                enforcer.release(lease)
            except LeaseHeld:
                with lock:
                    outcomes.append("held")

        for _ in range(25):
            outcomes.clear()
            threads = [threading.Thread(target=worker) for _ in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert outcomes.count("won") >= 1
            assert enforcer.active_lease is None  # every winner released

    def test_mock_reset_idempotent(self):
        backend = MockBackend()
        enforcer = Enforcer(backend)
        enforcer.apply(simple_plan(gpu_core_clock_cap_mhz=1500))
        first = enforcer.emergency_reset()
        assert first
        assert enforcer.emergency_reset() == []
        assert backend.snapshot() == MockBackend().snapshot()


plan_strategy = st.builds(
    simple_plan,
    cpu_core_count=st.integers(1, 64),
    memory_max_bytes=st.integers(1, 1 << 40),
    cpu_freq_cap_khz=st.one_of(st.none(), st.integers(1, 6_000_000)),
    gpu_core_clock_cap_mhz=st.one_of(st.none(), st.integers(1, 4000)),
    gpu_mem_clock_cap_mhz=st.one_of(st.none(), st.integers(1, 12000)),
    gpu_active_thread_pct=st.one_of(st.none(), st.integers(1, 100)),
    vram_fraction=st.one_of(st.none(), st.floats(0.01, 1.0)),
)


@given(plan_strategy)
@settings(max_examples=200, deadline=None)
def test_mock_release_restores_any_plan(plan):
    backend = MockBackend()
    enforcer = Enforcer(backend)
    before = backend.snapshot()
    lease = enforcer.apply(plan)
    enforcer.release(lease)
    assert backend.snapshot() == before


class TestRealBackendOnScratchTree:
    def make_backend(self, scratch_sysfs, runner=None):
        runner = runner or RecordingCommandRunner()
        backend = RealBackend(
            runner=runner,
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
            run_id="testrun",
            capabilities=full_caps(),
        )
        return backend, runner

    def test_apply_writes_cgroup_and_caps_freq(self, scratch_sysfs):
        backend, runner = self.make_backend(scratch_sysfs)
        enforcer = Enforcer(backend)
        lease = enforcer.apply(simple_plan(), scope="c0")
        cg = scratch_sysfs / "sys/fs/cgroup/bouquet/testrun/c0"
        assert lease.cgroup_path == cg
        assert (cg / "memory.max").read_text() == str(256 * 1024 * 1024)
        assert ("cpupower", "frequency-set", "-u", "1500000kHz") in runner.calls
        freq_action = next(a for a in lease.actions_taken if a.kind == "cpu_freq")
        assert freq_action.prior_value == "4000000"

    def test_release_restores_in_reverse(self, scratch_sysfs):
        backend, runner = self.make_backend(scratch_sysfs)
        enforcer = Enforcer(backend)
        lease = enforcer.apply(simple_plan(), scope="c0")
        cg = lease.cgroup_path
        enforcer.release(lease)
        assert not cg.exists()
        assert ("cpupower", "frequency-set", "-u", "4000000kHz") in runner.calls

    def test_gpu_plan_issues_clock_lock_and_mps(self, scratch_sysfs):
        backend, runner = self.make_backend(scratch_sysfs)
        enforcer = Enforcer(backend)
        plan = simple_plan(gpu_core_clock_cap_mhz=1708, gpu_active_thread_pct=18,
                           vram_fraction=0.5)
        lease = enforcer.apply(plan, scope="c0")
        assert ("nvidia-smi", "-lgc", "1708") in runner.calls
        assert ("nvidia-cuda-mps-control", "-d") in runner.calls
        assert backend.owns_mps is True
        enforcer.release(lease)
        assert ("nvidia-smi", "-rgc") in runner.calls

    def test_midway_failure_rolls_back(self, scratch_sysfs):
        runner = RecordingCommandRunner(
            responses={("nvidia-smi", "-lgc"): CommandResult((), 4, "", "not supported")}
        )
        backend, _ = self.make_backend(scratch_sysfs, runner)
        enforcer = Enforcer(backend)
        plan = simple_plan(gpu_core_clock_cap_mhz=1708)
        with pytest.raises(ExternalCommandFailed):
            enforcer.apply(plan, scope="c0")
        # rollback removed the cgroup and restored the frequency cap
        assert not (scratch_sysfs / "sys/fs/cgroup/bouquet/testrun/c0").exists()
        assert ("cpupower", "frequency-set", "-u", "4000000kHz") in runner.calls
        # the failed apply holds no lease
        lease = enforcer.apply(simple_plan(), scope="c1")
        enforcer.release(lease)

    def test_release_failure_aggregates(self, scratch_sysfs):
        runner = RecordingCommandRunner()
        backend, _ = self.make_backend(scratch_sysfs, runner)
        enforcer = Enforcer(backend)
        lease = enforcer.apply(simple_plan(), scope="c0")
        runner.responses[("cpupower", "frequency-set", "-u", "4000000kHz")] = CommandResult(
            (), 1, "", "boom"
        )
        with pytest.raises(ReleaseFailed) as err:
            enforcer.release(lease)
        assert lease.released is True
        assert any("cpu_freq" in f for f in err.value.failures)
        # the cgroup restore still ran
        assert not (scratch_sysfs / "sys/fs/cgroup/bouquet/testrun/c0").exists()

    def test_unsupported_action_refused(self, scratch_sysfs):
        report = full_caps()
        report.mark(ACTION_GPU_CLOCK, False, "nvidia-smi not installed")
        backend = RealBackend(
            runner=RecordingCommandRunner(),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
            capabilities=report,
        )
        enforcer = Enforcer(backend)
        plan = simple_plan(gpu_core_clock_cap_mhz=1500)
        with pytest.raises(UnsupportedAction):
            enforcer.apply(plan)

    def test_privilege_blockers_raise_privilege_error(self, scratch_sysfs):
        report = full_caps()
        report.mark(ACTION_CPU_FREQ, False, REASON_PRIVILEGE)
        backend = RealBackend(
            runner=RecordingCommandRunner(),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
            capabilities=report,
        )
        enforcer = Enforcer(backend)
        with pytest.raises(PrivilegeError):
            enforcer.apply(simple_plan())

    def test_degrade_records_skips(self, scratch_sysfs):
        report = full_caps()
        report.mark(ACTION_CPU_FREQ, False, REASON_PRIVILEGE)
        backend = RealBackend(
            runner=RecordingCommandRunner(),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
            capabilities=report,
        )
        enforcer = Enforcer(backend)
        lease = enforcer.apply(simple_plan(), allow_degrade=True)
        assert lease.skipped == [f"cpu_freq: {REASON_PRIVILEGE}"]
        assert all(a.kind != "cpu_freq" for a in lease.actions_taken)
        enforcer.release(lease)


class CpufreqApplyingRunner(RecordingCommandRunner):
    """Fake runner that mirrors what cpupower does to the sysfs limit file,
    so restore fidelity can be asserted by reading the file back."""

    def __init__(self, scaling_file):
        super().__init__()
        self.scaling_file = scaling_file

    def run(self, argv, **kwargs):
        result = super().run(argv, **kwargs)
        if argv[:2] == ["cpupower", "frequency-set"] and "-u" in argv:
            khz = argv[argv.index("-u") + 1].removesuffix("kHz")
            self.scaling_file.write_text(khz)
        return result


def test_release_restores_sysfs_frequency_state(scratch_sysfs):
    scaling = scratch_sysfs / "sys/devices/system/cpu/cpu0/cpufreq/scaling_max_freq"
    runner = CpufreqApplyingRunner(scaling)
    backend = RealBackend(
        runner=runner,
        root=scratch_sysfs,
        cgroups=scratch_sysfs / "sys/fs/cgroup",
        capabilities=full_caps(),
    )
    enforcer = Enforcer(backend)
    snapshot = scaling.read_text()
    lease = enforcer.apply(simple_plan(cpu_freq_cap_khz=1_500_000), scope="c0")
    assert scaling.read_text() == "1500000"
    enforcer.release(lease)
    assert scaling.read_text() == snapshot


class TestEmergencyReset:
    def test_clean_host_empty_report(self, scratch_sysfs):
        backend = RealBackend(
            runner=RecordingCommandRunner(available=()),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
        )
        assert Enforcer(backend).emergency_reset() == []

    def test_stale_cgroup_removed(self, scratch_sysfs):
        stale = scratch_sysfs / "sys/fs/cgroup/bouquet/oldrun/c3"
        stale.mkdir(parents=True)
        (stale / "memory.max").write_text("123")
        backend = RealBackend(
            runner=RecordingCommandRunner(available=()),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
        )
        enforcer = Enforcer(backend)
        assert enforcer.stale_state() != []
        lines = enforcer.emergency_reset()
        assert len(lines) == 1
        assert "removed orchestrator cgroup subtree" in lines[0]
        assert not (scratch_sysfs / "sys/fs/cgroup/bouquet").exists()
        # idempotent: the second pass has nothing left to do
        assert enforcer.emergency_reset() == []
        assert enforcer.stale_state() == []

    def test_capped_frequency_restored(self, scratch_sysfs):
        (scratch_sysfs / "sys/devices/system/cpu/cpu0/cpufreq/scaling_max_freq").write_text(
            "1500000"
        )
        runner = RecordingCommandRunner()
        backend = RealBackend(
            runner=runner, root=scratch_sysfs, cgroups=scratch_sysfs / "sys/fs/cgroup"
        )
        lines = Enforcer(backend).emergency_reset()
        assert any("cpu frequency cap removed" in line for line in lines)
        assert ("cpupower", "frequency-set", "-u", "4000000kHz") in runner.calls

    def test_unprivileged_actions_reported_skipped(self, scratch_sysfs, monkeypatch):
        stale = scratch_sysfs / "sys/fs/cgroup/bouquet/oldrun"
        stale.mkdir(parents=True)
        (scratch_sysfs / "sys/devices/system/cpu/cpu0/cpufreq/scaling_max_freq").write_text(
            "1500000"
        )
        import bouquet.enforcer.core as core_mod

        monkeypatch.setattr(core_mod.os, "geteuid", lambda: 1000)
        monkeypatch.setattr(core_mod.os, "access", lambda *a, **k: False)
        # no MPS tool: quitting an orchestrator-owned daemon needs no privileges,
        # so it would legitimately not be a skip line
        backend = RealBackend(
            runner=RecordingCommandRunner(available=("cpupower", "nvidia-smi")),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
        )
        lines = Enforcer(backend).emergency_reset()
        assert lines
        assert all("skipped" in line and REASON_PRIVILEGE in line for line in lines)

    def test_reset_never_raises(self, scratch_sysfs, monkeypatch):
        backend = RealBackend(
            runner=RecordingCommandRunner(),
            root=scratch_sysfs,
            cgroups=scratch_sysfs / "sys/fs/cgroup",
        )

        def explode():
            raise RuntimeError("boom")

        monkeypatch.setattr(backend, "reset", explode)
        lines = Enforcer(backend).emergency_reset()
        assert lines == ["reset failed: boom"]
