from __future__ import annotations

import pytest

from bouquet.profiles import (
    HostCapabilities,
    fixture_path,
    load_profile_catalog,
)

_ACCEPTANCE_MODULE = "test_acceptance"


@pytest.fixture(scope="session")
def catalog():
    return load_profile_catalog(fixture_path("gpus_default.json"))


@pytest.fixture(scope="session")
def host_caps(catalog) -> HostCapabilities:
    """The 4070-Super-like development host, with capability flags set the way
    a fully equipped Linux host would probe."""
    host = catalog["host-4070-super"]
    return HostCapabilities(
        id=host.id,
        cpu=host.cpu,
        ram_mib=host.ram_mib,
        gpu=host.gpu,
        has_gpu_management_tool=True,
        has_mps=True,
        has_cgroup_v2=True,
        has_cpu_freq_control=True,
        is_privileged=True,
    )


@pytest.fixture
def scratch_sysfs(tmp_path):
    """Minimal /proc + /sys tree the probe and real backend can work against."""
    root = tmp_path / "root"
    cpufreq = root / "sys/devices/system/cpu/cpu0/cpufreq"
    cpufreq.mkdir(parents=True)
    (cpufreq / "scaling_max_freq").write_text("4000000")
    (cpufreq / "cpuinfo_max_freq").write_text("4000000")
    (cpufreq / "cpuinfo_min_freq").write_text("2200000")
    proc = root / "proc"
    proc.mkdir()
    (proc / "cpuinfo").write_text(
        "processor\t: 0\n"
        "model name\t: Test CPU 8-Core\n"
        "cpu MHz\t\t: 3600.000\n"
        "physical id\t: 0\n"
        "core id\t\t: 0\n"
        "\n"
        "processor\t: 1\n"
        "model name\t: Test CPU 8-Core\n"
        "cpu MHz\t\t: 3600.000\n"
        "physical id\t: 0\n"
        "core id\t\t: 1\n"
        "\n"
    )
    (proc / "meminfo").write_text("MemTotal:       33554432 kB\nMemFree:  1 kB\n")
    cgroup = root / "sys/fs/cgroup"
    cgroup.mkdir(parents=True)
    (cgroup / "cgroup.controllers").write_text("")
    return root


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if _ACCEPTANCE_MODULE not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        print(f"\nACCEPTANCE {name}: {report.outcome.upper()}")
    elif report.when == "setup" and report.skipped:
        reason = ""
        if isinstance(report.longrepr, tuple):
            reason = f" ({report.longrepr[2]})"
        print(f"\nACCEPTANCE {name}: SKIPPED{reason}")
