"""Single seam through which all external commands run.

Every cpupower / nvidia-smi / MPS invocation goes through a runner object so
unit tests and the CLI's --fake-commands mode can swap in a recording fake
that never touches the host.
"""

from __future__ import annotations

import shutil
import subprocess
from dataclasses import dataclass

from ..errors import ExternalCommandFailed

# Tools the orchestrator may call; the fake runner advertises all of them.
KNOWN_TOOLS = ("cpupower", "nvidia-smi", "nvidia-cuda-mps-control")


@dataclass(frozen=True)
class CommandResult:
    argv: tuple[str, ...]
    returncode: int
    stdout: str
    stderr: str

    def check(self) -> "CommandResult":
        if self.returncode != 0:
            raise ExternalCommandFailed(list(self.argv), self.returncode, self.stdout + self.stderr)
        return self


class SystemCommandRunner:
    """Runs commands on the real host."""

    def which(self, tool: str) -> str | None:
        return shutil.which(tool)

    def run(self, argv: list[str], *, input_text: str | None = None, timeout: float = 30.0) -> CommandResult:
        try:
            proc = subprocess.run(
                argv,
                input=input_text,
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except FileNotFoundError:
            return CommandResult(tuple(argv), 127, "", f"{argv[0]}: not found")
        except subprocess.TimeoutExpired:
            return CommandResult(tuple(argv), 124, "", f"{argv[0]}: timed out after {timeout}s")
        return CommandResult(tuple(argv), proc.returncode, proc.stdout, proc.stderr)


class RecordingCommandRunner:
    """Fake runner: records every invocation, returns canned results.

    `responses` maps an argv prefix (tuple) to a CommandResult template; the
    longest matching prefix wins. Unmatched commands succeed with empty
    output, which is what --fake-commands wants.
    """

    def __init__(
        self,
        available: tuple[str, ...] = KNOWN_TOOLS,
        responses: dict[tuple[str, ...], CommandResult] | None = None,
    ):
        self.available = available
        self.responses = dict(responses or {})
        self.calls: list[tuple[str, ...]] = []

    def which(self, tool: str) -> str | None:
        return f"/fake/bin/{tool}" if tool in self.available else None

    def run(self, argv: list[str], *, input_text: str | None = None, timeout: float = 30.0) -> CommandResult:
        key = tuple(argv)
        self.calls.append(key)
        best: tuple[str, ...] | None = None
        for prefix in self.responses:
            if key[: len(prefix)] == prefix and (best is None or len(prefix) > len(best)):
                best = prefix
        if best is not None:
            canned = self.responses[best]
            return CommandResult(key, canned.returncode, canned.stdout, canned.stderr)
        return CommandResult(key, 0, "", "")
