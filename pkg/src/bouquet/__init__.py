"""bouquet: emulate heterogeneous FL client hardware on a single host."""

from .profiles import (
    CpuSpec,
    EnforcementPlan,
    GpuSpec,
    HardwareProfile,
    HostCapabilities,
    fixture_path,
    load_profile_catalog,
    plan_enforcement,
    save_profile_catalog,
    validate_against_host,
)
from .sampler import (
    PopularityTable,
    SamplerFilter,
    describe_sample,
    load_popularity_table,
    sample_federation,
)

__version__ = "0.1.0"

__all__ = [
    "CpuSpec",
    "EnforcementPlan",
    "GpuSpec",
    "HardwareProfile",
    "HostCapabilities",
    "PopularityTable",
    "SamplerFilter",
    "describe_sample",
    "fixture_path",
    "load_popularity_table",
    "load_profile_catalog",
    "plan_enforcement",
    "sample_federation",
    "save_profile_catalog",
    "validate_against_host",
    "__version__",
]
