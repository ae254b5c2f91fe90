"""Exception hierarchy shared across the orchestrator."""

from __future__ import annotations


class BouquetError(Exception):
    """Base class for all orchestrator errors."""


class ConfigError(BouquetError):
    """Invalid experiment configuration (bad paths, bad values)."""


class ParseError(BouquetError):
    """Malformed input file. Carries a locus (line number or field path)."""

    def __init__(self, message: str, *, locus: str | None = None):
        self.locus = locus
        super().__init__(f"{message} (at {locus})" if locus else message)


class DuplicateId(BouquetError):
    def __init__(self, profile_id: str):
        self.profile_id = profile_id
        super().__init__(f"duplicate profile id: {profile_id!r}")


class InvariantViolation(BouquetError):
    """A domain type field failed one of its invariants."""

    def __init__(self, field: str, rule: str):
        self.field = field
        self.rule = rule
        super().__init__(f"invariant violation on {field!r}: {rule}")


class NotEmulable(BouquetError):
    """A profile cannot be realized on the host. Carries the validation report."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("profile not emulable on host: " + "; ".join(violations))


class UnknownProfileId(BouquetError):
    def __init__(self, profile_id: str, row: int | None = None):
        self.profile_id = profile_id
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"unknown profile id {profile_id!r}{where}")


class EmptyTable(BouquetError):
    """Popularity table has no entry with positive weight."""


class FilterExcludesAll(BouquetError):
    """The active sampler filter leaves no entry to draw from."""


class MissingGpu(BouquetError):
    """The workload needs a GPU the profile (or reference host) does not have."""


class UnknownReferenceHost(BouquetError):
    def __init__(self, host_id: str):
        self.host_id = host_id
        super().__init__(f"workload reference host {host_id!r} not in catalog")


class LeaseHeld(BouquetError):
    """An unreleased enforcement lease already exists."""


class PrivilegeError(BouquetError):
    """The requested enforcement needs elevated privileges."""


class UnsupportedAction(BouquetError):
    def __init__(self, action: str, reason: str):
        self.action = action
        self.reason = reason
        super().__init__(f"enforcement action {action!r} unsupported: {reason}")


class ExternalCommandFailed(BouquetError):
    def __init__(self, argv: list[str], returncode: int, output: str):
        self.argv = list(argv)
        self.returncode = returncode
        self.output = output
        super().__init__(
            f"command {' '.join(argv)!r} failed with exit status {returncode}: {output.strip()}"
        )


class ReleaseFailed(BouquetError):
    """One or more restore steps failed during lease release."""

    def __init__(self, failures: list[str]):
        self.failures = failures
        super().__init__("release failures: " + "; ".join(failures))


class SpawnFailed(BouquetError):
    """Child process could not be spawned."""


class DegenerateSeries(BouquetError):
    """Correlation is undefined: one side has all-equal values."""


class NonPositiveValue(BouquetError):
    """Mean normalization requires strictly positive inputs."""


class MissingBenchmarkEntry(BouquetError):
    def __init__(self, profile_id: str):
        self.profile_id = profile_id
        super().__init__(f"no benchmark entry for profile {profile_id!r}")
