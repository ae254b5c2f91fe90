"""Host resource enforcement: probing, leases, and backends."""

from .commands import CommandResult, RecordingCommandRunner, SystemCommandRunner
from .core import Enforcer, EnforcementLease, MockBackend, RealBackend, ReleaseReport
from .probe import BackendCapabilityReport, probe_host

__all__ = [
    "BackendCapabilityReport",
    "CommandResult",
    "Enforcer",
    "EnforcementLease",
    "MockBackend",
    "RealBackend",
    "RecordingCommandRunner",
    "ReleaseReport",
    "SystemCommandRunner",
    "probe_host",
]
