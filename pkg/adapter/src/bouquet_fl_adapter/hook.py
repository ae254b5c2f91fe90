"""Framework-side fit hook.

Bridges an FL framework's `fit` call (ordered parameter arrays in, updated
arrays out) to one orchestrated client run: parameters are serialized to a
params_in artifact, the orchestrator runs `run_fit` inside the profile's
restricted environment, and the updated artifact is deserialized back.
Client failures surface as ClientRunError carrying the run's status, so the
framework sees OOM kills and timeouts as structured errors rather than hangs.
"""

from __future__ import annotations

import importlib.util
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from bouquet.enforcer import Enforcer, RealBackend, RecordingCommandRunner, SystemCommandRunner, probe_host
from bouquet.errors import UnknownProfileId
from bouquet.profiles import load_profile_catalog
from bouquet.scheduler import MODE_REAL, ClientRunResult, TaskCommand, run_client

from .artifact import read_artifact, write_artifact
from .task import param_names


class NotSupportedForHook(RuntimeError):
    """The requested configuration cannot produce parameters (e.g. simulated
    mode, which never writes a params_out artifact)."""


class ClientRunError(RuntimeError):
    """The orchestrated client run did not finish ok."""

    def __init__(self, result: ClientRunResult):
        self.status = result.status.kind
        self.result = result
        detail = f" ({result.detail})" if result.detail else ""
        super().__init__(
            f"client run for profile {result.profile_id!r} "
            f"failed with status {result.status.kind}{detail}"
        )


def _orchestrator_locatable() -> bool:
    return importlib.util.find_spec("bouquet") is not None


def fit_hook(parameters: list[np.ndarray], config: dict) -> list[np.ndarray]:
    """Run one client fit under the configured hardware profile.

    `parameters` is the framework's ordered tensor list; names are assigned
    from the demo model's state order and preserved end to end. Required
    config keys: profile_id, catalog_path. Optional: epochs (1), seed (0),
    batch_size (32), timeout_s (300), workdir, degrade_allowed (True),
    fake_commands (False), host_profile_id, mode ("real").
    """
    mode = config.get("mode", MODE_REAL)
    if mode != MODE_REAL:
        raise NotSupportedForHook(
            f"mode {mode!r} produces no params_out artifact; the hook needs real mode"
        )
    if not _orchestrator_locatable():
        raise NotSupportedForHook("orchestrator package not installed")

    names = param_names()
    if len(parameters) != len(names):
        raise ValueError(
            f"expected {len(names)} parameter tensors for the demo task, "
            f"got {len(parameters)}"
        )

    catalog = load_profile_catalog(config["catalog_path"])
    profile_id = config["profile_id"]
    if profile_id not in catalog:
        raise UnknownProfileId(profile_id)
    profile = catalog[profile_id]

    fake_commands = bool(config.get("fake_commands", False))
    runner = RecordingCommandRunner() if fake_commands else SystemCommandRunner()
    host_profile = None
    if config.get("host_profile_id"):
        host_profile = catalog[config["host_profile_id"]]
    host, caps = probe_host(runner=runner, catalog=catalog, host_profile=host_profile)
    enforcer = Enforcer(
        RealBackend(runner=runner, capabilities=caps, run_id=f"hook{os.getpid()}")
    )

    workdir = Path(config.get("workdir") or tempfile.mkdtemp(prefix="bouquet-fit-"))
    workdir.mkdir(parents=True, exist_ok=True)
    params_in = workdir / "params_in.bin"
    params_out = workdir / "params_out.bin"
    write_artifact(dict(zip(names, parameters)), params_in)

    task = TaskCommand(
        argv=(
            sys.executable, "-m", "bouquet_fl_adapter.run_fit",
            "--params-in", str(params_in),
            "--params-out", str(params_out),
            "--epochs", str(config.get("epochs", 1)),
            "--seed", str(config.get("seed", 0)),
            "--batch-size", str(config.get("batch_size", 32)),
        ),
        params_in=params_in,
        params_out=params_out,
        timeout_s=float(config.get("timeout_s", 300.0)),
    )
    result = run_client(
        profile,
        task,
        host=host,
        enforcer=enforcer,
        mode=MODE_REAL,
        degrade_allowed=bool(config.get("degrade_allowed", True)),
    )
    if result.status.kind != "ok":
        raise ClientRunError(result)

    updated = read_artifact(params_out)
    if list(updated.keys()) != names:
        raise ClientRunError(result)  # child broke the contract
    return [updated[name] for name in names]
