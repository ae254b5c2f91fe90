"""Adapter between an FL framework's fit call and the bouquet orchestrator."""

from .artifact import ArtifactError, ChecksumMismatch, read_artifact, write_artifact
from .env import AdapterEnv, read_env
from .hook import ClientRunError, NotSupportedForHook, fit_hook
from .limits import apply_cooperative_limits
from .task import initial_parameters, param_names

__version__ = "0.1.0"

__all__ = [
    "AdapterEnv",
    "ArtifactError",
    "ChecksumMismatch",
    "ClientRunError",
    "NotSupportedForHook",
    "apply_cooperative_limits",
    "fit_hook",
    "initial_parameters",
    "param_names",
    "read_artifact",
    "read_env",
    "write_artifact",
]
