from __future__ import annotations

import json

import pytest

_ACCEPTANCE_MODULE = "test_acceptance"


@pytest.fixture
def scratch_roots(tmp_path, monkeypatch):
    """Scratch sysfs + cgroup roots so real-mode orchestration never touches
    the host; returns the cgroup root."""
    root = tmp_path / "root"
    cgroup = root / "sys/fs/cgroup"
    cgroup.mkdir(parents=True)
    (cgroup / "cgroup.controllers").write_text("")
    monkeypatch.setenv("BOUQUET_CGROUP_ROOT", str(cgroup))
    return cgroup


@pytest.fixture
def tiny_catalog(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps([{
        "id": "laptop",
        "cpu": {"model_name": "small", "cores": 1, "threads": 1,
                "base_clock_mhz": 800, "boost_clock_mhz": 1200},
        "ram_mib": 2048,
    }]))
    return path


def pytest_runtest_logreport(report):
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
