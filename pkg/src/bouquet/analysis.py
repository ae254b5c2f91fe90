"""Rank-correlation validation of emulated against benchmarked performance.

Spearman's rho is the Pearson correlation of rank vectors with average ranks
for ties. Kendall's tau is the tie-corrected tau-b:

    tau_b = (C - D) / sqrt((n0 - n1) * (n0 - n2))

where C/D count concordant/discordant pairs, n0 = n(n-1)/2, and n1/n2 sum
t(t-1)/2 over tie groups of each side. tau-b is the variant of record here
because benchmark scores can tie; tau-a would differ on such inputs.

Orientation: each series carries a higher_is_better flag, and values are
sign-flipped as needed so that "better" points the same way on both sides
before ranking. Two series that order devices identically therefore correlate
at +1 even when one is a time (lower better) and the other a score.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .errors import DegenerateSeries, MissingBenchmarkEntry, NonPositiveValue, ParseError
from .profiles import HardwareProfile

if TYPE_CHECKING:  # avoid an import cycle; scheduler imports nothing from here
    from .scheduler import RoundReport


@dataclass(frozen=True)
class PairedSeries:
    labels: tuple[str, ...]
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    higher_is_better_x: bool
    higher_is_better_y: bool

    def __post_init__(self):
        if not (len(self.labels) == len(self.xs) == len(self.ys)):
            raise ValueError("labels, xs, ys must have equal lengths")
        if len(self.xs) < 2:
            raise ValueError("need at least 2 paired observations")
        for v in (*self.xs, *self.ys):
            if not math.isfinite(v):
                raise ValueError("series values must be finite")


def _oriented(values: Iterable[float], higher_is_better: bool) -> list[float]:
    return [v if higher_is_better else -v for v in values]


def average_ranks(values: list[float]) -> list[float]:
    """1-based ranks; tied values share the average (fractional) rank."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman_rho(series: PairedSeries) -> float:
    xs = _oriented(series.xs, series.higher_is_better_x)
    ys = _oriented(series.ys, series.higher_is_better_y)
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        raise DegenerateSeries("one side has all-equal values")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    n = len(rx)
    mean = (n + 1) / 2  # both rank vectors have the same mean
    cov = sum((a - mean) * (b - mean) for a, b in zip(rx, ry))
    var_x = sum((a - mean) ** 2 for a in rx)
    var_y = sum((b - mean) ** 2 for b in ry)
    return cov / math.sqrt(var_x * var_y)


def kendall_tau(series: PairedSeries) -> float:
    xs = _oriented(series.xs, series.higher_is_better_x)
    ys = _oriented(series.ys, series.higher_is_better_y)
    n = len(xs)
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            prod = dx * dy
            if prod > 0:
                concordant += 1
            elif prod < 0:
                discordant += 1
    n0 = n * (n - 1) // 2
    n1 = _tie_pair_count(xs)
    n2 = _tie_pair_count(ys)
    if n0 == n1 or n0 == n2:
        raise DegenerateSeries("one side has all-equal values")
    return (concordant - discordant) / math.sqrt((n0 - n1) * (n0 - n2))


def _tie_pair_count(values: list[float]) -> int:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return sum(t * (t - 1) // 2 for t in counts.values())


def normalize_about_mean(xs: list[float]) -> list[float]:
    """Divide by the arithmetic mean so the output mean is 1."""
    if not xs:
        raise NonPositiveValue("empty series")
    if any(x <= 0 for x in xs):
        raise NonPositiveValue("all values must be positive")
    mean = sum(xs) / len(xs)
    return [x / mean for x in xs]


# ---------------------------------------------------------------------------
# Benchmark table and report emission
# ---------------------------------------------------------------------------


def load_benchmark(path: Path | str) -> dict[str, float]:
    """Benchmark CSV (header ``profile_id,score,source``) -> id -> score."""
    path = Path(path)
    scores: dict[str, float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        header: list[str] | None = None
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [c.strip() for c in row]
                if header != ["profile_id", "score", "source"]:
                    raise ParseError(
                        "expected header 'profile_id,score,source'", locus=f"{path}:{lineno}"
                    )
                continue
            if len(row) != 3:
                raise ParseError("expected 3 columns", locus=f"{path}:{lineno}")
            try:
                scores[row[0].strip()] = float(row[1])
            except ValueError:
                raise ParseError(f"bad score {row[1]!r}", locus=f"{path}:{lineno}") from None
    if header is None:
        raise ParseError("missing header row", locus=str(path))
    return scores


def mean_wall_times(reports: "Iterable[RoundReport]") -> dict[str, float]:
    """Mean wall seconds per profile over runs that finished ok."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for report in reports:
        for run in report.runs:
            if run.status.kind != "ok":
                continue
            sums[run.profile_id] = sums.get(run.profile_id, 0.0) + run.wall_time_s
            counts[run.profile_id] = counts.get(run.profile_id, 0) + 1
    return {pid: sums[pid] / counts[pid] for pid in sums}


def build_paired_series(
    means: dict[str, float], benchmark: dict[str, float]
) -> PairedSeries:
    labels = tuple(sorted(means))
    for pid in labels:
        if pid not in benchmark:
            raise MissingBenchmarkEntry(pid)
    return PairedSeries(
        labels=labels,
        xs=tuple(means[pid] for pid in labels),
        ys=tuple(benchmark[pid] for pid in labels),
        higher_is_better_x=False,  # wall time: lower is better
        higher_is_better_y=True,  # benchmark score: higher is better
    )


def emit_validation_report(
    reports: "list[RoundReport]",
    benchmark: dict[str, float],
    catalog: dict[str, HardwareProfile],
    out_dir: Path | str,
) -> dict:
    """Write plot-ready validation files and return the summary dict.

    Files: ``per_gpu.csv`` (per-profile means, scores, mean-normalized
    series), ``summary.json`` (rho, tau-b, n, mode), and
    ``per_generation.csv`` (rows grouped by GPU generation).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    means = mean_wall_times(reports)
    series = build_paired_series(means, benchmark)
    rho = spearman_rho(series)
    tau = kendall_tau(series)
    norm_time = normalize_about_mean(list(series.xs))
    norm_score = normalize_about_mean(list(series.ys))

    modes = {report.mode for report in reports}
    mode = modes.pop() if len(modes) == 1 else "mixed"

    def generation_of(pid: str) -> str:
        profile = catalog.get(pid)
        if profile is None or profile.gpu is None:
            return ""
        return profile.gpu.generation

    rows = [
        {
            "profile_id": pid,
            "generation": generation_of(pid),
            "mean_wall_time_s": f"{series.xs[i]:.6f}",
            "score": f"{series.ys[i]:.6f}",
            "norm_time": f"{norm_time[i]:.6f}",
            "norm_score": f"{norm_score[i]:.6f}",
        }
        for i, pid in enumerate(series.labels)
    ]

    fieldnames = ["profile_id", "generation", "mean_wall_time_s", "score", "norm_time", "norm_score"]
    with (out_dir / "per_gpu.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)

    with (out_dir / "per_generation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(sorted(rows, key=lambda r: (r["generation"], r["profile_id"])))

    summary = {
        "spearman_rho": rho,
        "kendall_tau_b": tau,
        "n": len(series.labels),
        "mode": mode,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
