from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bouquet.errors import DuplicateId, InvariantViolation, NotEmulable, ParseError
from bouquet.profiles import (
    CpuSpec,
    GpuSpec,
    HardwareProfile,
    HostCapabilities,
    MIB,
    fixture_path,
    load_profile_catalog,
    plan_enforcement,
    save_profile_catalog,
    validate_against_host,
)

GENERATIONS = {"GTX 10", "GTX 16", "RTX 20", "RTX 30"}


def make_profile(pid="p", cores=4, threads=8, cpu_base=2000, cpu_boost=3000,
                 ram_mib=8192, gpu_cores=1024, gpu_base=1200, gpu_boost=1500,
                 vram_mib=4096, generation="GTX 10", with_gpu=True):
    gpu = None
    if with_gpu:
        gpu = GpuSpec(model_name=f"gpu-{pid}", cuda_cores=gpu_cores, base_clock_mhz=gpu_base,
                      boost_clock_mhz=gpu_boost, vram_mib=vram_mib, generation=generation)
    return HardwareProfile(
        id=pid,
        cpu=CpuSpec(model_name=f"cpu-{pid}", cores=cores, threads=threads,
                    base_clock_mhz=cpu_base, boost_clock_mhz=cpu_boost),
        ram_mib=ram_mib,
        gpu=gpu,
    )


def as_host(profile: HardwareProfile, **flags) -> HostCapabilities:
    return HostCapabilities(id=profile.id, cpu=profile.cpu, ram_mib=profile.ram_mib,
                            gpu=profile.gpu, **flags)


class TestTypeInvariants:
    def test_threads_below_cores_rejected(self):
        with pytest.raises(InvariantViolation):
            CpuSpec(model_name="x", cores=4, threads=2, base_clock_mhz=1000, boost_clock_mhz=1000)

    def test_boost_below_base_rejected(self):
        with pytest.raises(InvariantViolation):
            GpuSpec(model_name="x", cuda_cores=1, base_clock_mhz=1500, boost_clock_mhz=1400,
                    vram_mib=1, generation="g")

    def test_empty_id_rejected(self):
        with pytest.raises(InvariantViolation):
            make_profile(pid="")


class TestCatalogLoading:
    def test_single_valid_profile(self, tmp_path):
        path = tmp_path / "cat.json"
        path.write_text(json.dumps([{
            "id": "only",
            "cpu": {"model_name": "c", "cores": 2, "threads": 4,
                    "base_clock_mhz": 1000, "boost_clock_mhz": 2000},
            "ram_mib": 1024,
        }]))
        catalog = load_profile_catalog(path)
        assert len(catalog) == 1
        assert catalog["only"].gpu is None

    def test_boost_below_base_in_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{
            "id": "bad",
            "cpu": {"model_name": "c", "cores": 2, "threads": 4,
                    "base_clock_mhz": 3000, "boost_clock_mhz": 2000},
            "ram_mib": 1024,
        }]))
        with pytest.raises(InvariantViolation):
            load_profile_catalog(path)

    def test_duplicate_id(self, tmp_path):
        entry = {
            "id": "dup",
            "cpu": {"model_name": "c", "cores": 1, "threads": 1,
                    "base_clock_mhz": 1000, "boost_clock_mhz": 1000},
            "ram_mib": 64,
        }
        path = tmp_path / "dup.json"
        path.write_text(json.dumps([entry, entry]))
        with pytest.raises(DuplicateId):
            load_profile_catalog(path)

    def test_unknown_field_rejected_with_locus(self, tmp_path):
        path = tmp_path / "unknown.json"
        path.write_text(json.dumps([{
            "id": "x", "nonsense": 1,
            "cpu": {"model_name": "c", "cores": 1, "threads": 1,
                    "base_clock_mhz": 1, "boost_clock_mhz": 1},
            "ram_mib": 64,
        }]))
        with pytest.raises(ParseError) as err:
            load_profile_catalog(path)
        assert "profiles[0]" in str(err.value)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('[\n{"id": }\n]')
        with pytest.raises(ParseError) as err:
            load_profile_catalog(path)
        assert "line" in str(err.value)

    def test_bundled_fixture_roster(self, catalog):
        # 11 emulation targets plus the host entry
        assert len(catalog) == 12
        targets = {pid: p for pid, p in catalog.items() if pid != "host-4070-super"}
        assert len(targets) == 11
        assert {p.gpu.generation for p in targets.values()} == GENERATIONS
        assert catalog["host-4070-super"].gpu.cuda_cores == 7168

    def test_round_trip(self, catalog, tmp_path):
        out = tmp_path / "roundtrip.json"
        save_profile_catalog(catalog, out)
        assert load_profile_catalog(out) == catalog


class TestValidateAgainstHost:
    def test_identity_is_emulable(self):
        profile = make_profile()
        assert validate_against_host(profile, as_host(profile)) == []

    def test_ram_boundary(self):
        host = as_host(make_profile(pid="h"))
        over = make_profile(pid="p", ram_mib=host.ram_mib + 1)
        report = validate_against_host(over, host)
        assert len(report) == 1
        assert "ram" in report[0].lower()

    def test_rtx_3080_not_emulable_on_fixture_host(self, catalog, host_caps):
        report = validate_against_host(catalog["rtx-3080"], host_caps)
        assert any("cuda_cores" in line for line in report)

    def test_gpu_profile_on_cpu_only_host(self):
        host = as_host(make_profile(pid="h", with_gpu=False))
        report = validate_against_host(make_profile(pid="p"), host)
        assert any("gpu" in line.lower() for line in report)


class TestPlanEnforcement:
    def test_identity_plan(self, catalog, host_caps):
        plan = plan_enforcement(catalog["host-4070-super"], host_caps)
        assert plan.gpu_active_thread_pct == 100
        assert plan.vram_fraction == 1.0
        assert plan.cpu_freq_cap_khz == host_caps.cpu.boost_clock_mhz * 1000
        assert plan.gpu_core_clock_cap_mhz == host_caps.gpu.boost_clock_mhz
        assert plan.cpu_core_count == host_caps.cpu.cores
        assert plan.memory_max_bytes == host_caps.ram_mib * MIB

    def test_gtx_1060_on_fixture_host(self, catalog, host_caps):
        plan = plan_enforcement(catalog["gtx-1060"], host_caps)
        assert plan.gpu_active_thread_pct == 18
        assert plan.vram_fraction == 0.5

    def test_memory_unit_conversion(self):
        profile = make_profile(ram_mib=8192)
        plan = plan_enforcement(profile, as_host(profile))
        assert plan.memory_max_bytes == 8589934592

    def test_not_emulable_carries_report(self, catalog, host_caps):
        with pytest.raises(NotEmulable) as err:
            plan_enforcement(catalog["rtx-3080"], host_caps)
        assert any("cuda_cores" in line for line in err.value.violations)

    def test_cpu_only_profile_plan(self):
        profile = make_profile(with_gpu=False)
        host = as_host(make_profile(pid="h"))
        plan = plan_enforcement(profile, host)
        assert plan.gpu_active_thread_pct is None
        assert plan.vram_fraction is None
        assert plan.gpu_core_clock_cap_mhz is None
        assert plan.child_env["BOUQUET_GPU_DISABLED"] == "1"

    def test_child_env_always_complete(self, catalog, host_caps):
        plan = plan_enforcement(catalog["rtx-2060"], host_caps)
        assert set(plan.child_env) == {
            "CUDA_MPS_ACTIVE_THREAD_PERCENTAGE",
            "BOUQUET_VRAM_FRACTION",
            "BOUQUET_CPU_CORES",
            "BOUQUET_PROFILE_ID",
            "BOUQUET_GPU_DISABLED",
        }
        assert plan.child_env["BOUQUET_PROFILE_ID"] == "rtx-2060"

    def test_determinism(self, catalog, host_caps):
        a = plan_enforcement(catalog["gtx-1080"], host_caps)
        b = plan_enforcement(catalog["gtx-1080"], host_caps)
        assert a == b


# -- randomized properties ---------------------------------------------------

host_strategy = st.builds(
    lambda cores, extra_threads, base, boost_add, ram, gcores, gbase, gboost_add, vram: as_host(
        HardwareProfile(
            id="host",
            cpu=CpuSpec(model_name="hc", cores=cores, threads=cores + extra_threads,
                        base_clock_mhz=base, boost_clock_mhz=base + boost_add),
            ram_mib=ram,
            gpu=GpuSpec(model_name="hg", cuda_cores=gcores, base_clock_mhz=gbase,
                        boost_clock_mhz=gbase + gboost_add, vram_mib=vram, generation="G"),
        )
    ),
    cores=st.integers(1, 64),
    extra_threads=st.integers(0, 64),
    base=st.integers(400, 4000),
    boost_add=st.integers(0, 3000),
    ram=st.integers(1, 1 << 20),
    gcores=st.integers(1, 20000),
    gbase=st.integers(200, 3000),
    gboost_add=st.integers(0, 1500),
    vram=st.integers(1, 1 << 16),
)


@st.composite
def emulable_pair(draw):
    host = draw(host_strategy)
    cores = draw(st.integers(1, host.cpu.cores))
    cpu_boost = draw(st.integers(1, host.cpu.boost_clock_mhz))
    profile = HardwareProfile(
        id="p",
        cpu=CpuSpec(model_name="pc", cores=cores, threads=cores,
                    base_clock_mhz=min(cpu_boost, draw(st.integers(1, cpu_boost))),
                    boost_clock_mhz=cpu_boost),
        ram_mib=draw(st.integers(1, host.ram_mib)),
        gpu=GpuSpec(
            model_name="pg",
            cuda_cores=draw(st.integers(1, host.gpu.cuda_cores)),
            base_clock_mhz=1,
            boost_clock_mhz=draw(st.integers(1, host.gpu.boost_clock_mhz)),
            vram_mib=draw(st.integers(1, host.gpu.vram_mib)),
            generation="G",
        ),
    )
    return profile, host


@given(emulable_pair())
@settings(max_examples=300, deadline=None)
def test_plan_never_exceeds_host(pair):
    profile, host = pair
    plan = plan_enforcement(profile, host)
    assert 1 <= plan.gpu_active_thread_pct <= 100
    assert plan.gpu_core_clock_cap_mhz <= host.gpu.boost_clock_mhz
    assert 0 < plan.vram_fraction <= 1.0
    assert plan.cpu_freq_cap_khz <= host.cpu.boost_clock_mhz * 1000
    assert plan.cpu_core_count <= host.cpu.cores
    assert plan.memory_max_bytes <= host.ram_mib * MIB


@st.composite
def dominated_pair(draw):
    profile, host = draw(emulable_pair())
    smaller = HardwareProfile(
        id="q",
        cpu=CpuSpec(
            model_name="qc",
            cores=draw(st.integers(1, profile.cpu.cores)),
            threads=profile.cpu.threads,
            base_clock_mhz=1,
            boost_clock_mhz=draw(st.integers(1, profile.cpu.boost_clock_mhz)),
        ),
        ram_mib=draw(st.integers(1, profile.ram_mib)),
        gpu=GpuSpec(
            model_name="qg",
            cuda_cores=draw(st.integers(1, profile.gpu.cuda_cores)),
            base_clock_mhz=1,
            boost_clock_mhz=draw(st.integers(1, profile.gpu.boost_clock_mhz)),
            vram_mib=draw(st.integers(1, profile.gpu.vram_mib)),
            generation="G",
        ),
    )
    return smaller, profile, host


@given(dominated_pair())
@settings(max_examples=300, deadline=None)
def test_plan_monotone_in_profile(triple):
    smaller, bigger, host = triple
    plan_small = plan_enforcement(smaller, host)
    plan_big = plan_enforcement(bigger, host)
    assert plan_small.gpu_active_thread_pct <= plan_big.gpu_active_thread_pct
    assert plan_small.vram_fraction <= plan_big.vram_fraction
    assert plan_small.gpu_core_clock_cap_mhz <= plan_big.gpu_core_clock_cap_mhz
    assert plan_small.cpu_freq_cap_khz <= plan_big.cpu_freq_cap_khz
    assert plan_small.cpu_core_count <= plan_big.cpu_core_count
    assert plan_small.memory_max_bytes <= plan_big.memory_max_bytes
