"""Popularity-weighted federation sampling.

Draws device profiles with replacement, proportionally to survey-style
weights, using the pinned xoshiro256** generator so the same
(table, n, seed, filter) input yields the same federation on every platform.
Each draw consumes exactly one uniform variate and selects by inverse CDF
over the cumulative weights of the filtered entries, in table order.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyTable, FilterExcludesAll, ParseError, UnknownProfileId
from .prng import Xoshiro256StarStar
from .profiles import HardwareProfile, HostCapabilities, validate_against_host


@dataclass(frozen=True)
class PopularityTable:
    """Ordered (profile_id, weight) entries. Weights need not sum to 1;
    they are normalized when sampling."""

    entries: tuple[tuple[str, float], ...]
    source_label: str = ""

    def __post_init__(self):
        if not any(w > 0 for _, w in self.entries):
            raise EmptyTable("no entry with positive weight")


@dataclass(frozen=True)
class SamplerFilter:
    allowed_generations: frozenset[str] | None = None
    max_vram_mib: int | None = None
    max_cuda_cores: int | None = None
    require_emulable_on: HostCapabilities | None = None

    def admits(self, profile: HardwareProfile) -> bool:
        if self.allowed_generations is not None:
            if profile.gpu is None or profile.gpu.generation not in self.allowed_generations:
                return False
        if self.max_vram_mib is not None:
            if profile.gpu is not None and profile.gpu.vram_mib > self.max_vram_mib:
                return False
        if self.max_cuda_cores is not None:
            if profile.gpu is not None and profile.gpu.cuda_cores > self.max_cuda_cores:
                return False
        if self.require_emulable_on is not None:
            if validate_against_host(profile, self.require_emulable_on):
                return False
        return True


NO_FILTER = SamplerFilter()


def load_popularity_table(
    path: Path | str, catalog: dict[str, HardwareProfile]
) -> PopularityTable:
    """Load the popularity CSV (header ``profile_id,weight,source_label``).

    Weights are decimals in [0, 1] or percentages suffixed ``%``; comment
    lines start with ``#``. Every row must resolve in the catalog; errors
    carry the 1-based file line number.
    """
    path = Path(path)
    entries: list[tuple[str, float]] = []
    source_label = ""
    with path.open(newline="", encoding="utf-8") as fh:
        header: list[str] | None = None
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in row]
                if header != ["profile_id", "weight", "source_label"]:
                    raise ParseError(
                        "expected header 'profile_id,weight,source_label'",
                        locus=f"{path}:{lineno}",
                    )
                continue
            if len(row) != 3:
                raise ParseError("expected 3 columns", locus=f"{path}:{lineno}")
            profile_id, weight_text, label = (c.strip() for c in row)
            if profile_id not in catalog:
                raise UnknownProfileId(profile_id, row=lineno)
            entries.append((profile_id, _parse_weight(weight_text, f"{path}:{lineno}")))
            if label and not source_label:
                source_label = label
    if header is None:
        raise ParseError("missing header row", locus=str(path))
    return PopularityTable(entries=tuple(entries), source_label=source_label)


def _parse_weight(text: str, locus: str) -> float:
    raw = text
    percent = text.endswith("%")
    if percent:
        text = text[:-1]
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"bad weight {raw!r}", locus=locus) from None
    if percent:
        value /= 100.0
    if not 0.0 <= value <= 1.0:
        raise ParseError(f"weight {raw!r} outside [0, 1]", locus=locus)
    return value


def filtered_entries(
    table: PopularityTable,
    catalog: dict[str, HardwareProfile],
    sample_filter: SamplerFilter = NO_FILTER,
) -> list[tuple[str, float]]:
    """Entries admitted by the filter, with positive weight, in table order."""
    out = []
    for profile_id, weight in table.entries:
        if weight <= 0:
            continue
        if profile_id not in catalog:
            raise UnknownProfileId(profile_id)
        if sample_filter.admits(catalog[profile_id]):
            out.append((profile_id, weight))
    return out


def sample_federation(
    table: PopularityTable,
    n: int,
    seed: int,
    catalog: dict[str, HardwareProfile],
    sample_filter: SamplerFilter = NO_FILTER,
) -> list[str]:
    """Draw n profile ids with replacement, weights renormalized after
    filtering. Deterministic in (table, n, seed, filter)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    entries = filtered_entries(table, catalog, sample_filter)
    if not entries:
        raise FilterExcludesAll("filter leaves no entry with positive weight")
    total = sum(w for _, w in entries)
    cumulative: list[float] = []
    acc = 0.0
    for _, w in entries:
        acc += w / total
        cumulative.append(acc)
    cumulative[-1] = 1.0  # guard against float drift at the top end

    rng = Xoshiro256StarStar(seed)
    sample: list[str] = []
    for _ in range(n):
        u = rng.random()
        lo, hi = 0, len(cumulative) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if u < cumulative[mid]:
                hi = mid
            else:
                lo = mid + 1
        sample.append(entries[lo][0])
    return sample


def describe_sample(sample: list[str]) -> dict[str, int]:
    """Histogram of a sampled federation; counts sum to len(sample)."""
    return dict(Counter(sample))
