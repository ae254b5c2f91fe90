"""Command-line surface: probe, sample, run, validate, reset.

Exit codes: 0 success (client-level failures inside a completed round are
data, not errors), 1 orchestration/runtime failure, 2 configuration error,
3 privilege or missing-mechanism refusal in real mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import analysis, scheduler
from .enforcer import (
    Enforcer,
    MockBackend,
    RealBackend,
    RecordingCommandRunner,
    SystemCommandRunner,
    probe_host,
)
from .errors import (
    BouquetError,
    ConfigError,
    DegenerateSeries,
    DuplicateId,
    EmptyTable,
    FilterExcludesAll,
    InvariantViolation,
    MissingBenchmarkEntry,
    NonPositiveValue,
    ParseError,
    PrivilegeError,
    UnknownProfileId,
    UnknownReferenceHost,
    UnsupportedAction,
)
from .perfmodel import load_workload
from .profiles import (
    HostCapabilities,
    host_to_dict,
    load_profile_catalog,
    pseudo_host,
)
from .sampler import (
    NO_FILTER,
    SamplerFilter,
    describe_sample,
    load_popularity_table,
    sample_federation,
)
from .scheduler import MODE_REAL, MODE_SIMULATED, TaskTemplate, run_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_PRIVILEGE = 3

_CONFIG_EXIT_ERRORS = (
    ConfigError,
    ParseError,
    DuplicateId,
    InvariantViolation,
    UnknownProfileId,
    UnknownReferenceHost,
    EmptyTable,
    FilterExcludesAll,
    MissingBenchmarkEntry,
    DegenerateSeries,
    NonPositiveValue,
)


@dataclass
class ExperimentConfig:
    catalog_path: str | None = None
    popularity_path: str | None = None
    workload_path: str | None = None
    task: dict | None = None
    clients_per_round: int = 4
    rounds: int = 1
    seed: int = 0
    mode: str = MODE_SIMULATED
    backend: str = "real"
    output_dir: str = "bouquet-results"
    degrade_allowed: bool = False
    fake_commands: bool = False
    host_profile_id: str | None = None
    filter: dict | None = None

    @classmethod
    def load(cls, path: str | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in {path}: {exc.msg}", locus=f"line {exc.lineno}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**raw)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.clients_per_round < 0:
            raise ConfigError("clients_per_round must be >= 0")
        if self.mode not in (MODE_REAL, MODE_SIMULATED):
            raise ConfigError(f"mode must be 'real' or 'simulated', got {self.mode!r}")
        if self.backend not in ("real", "mock"):
            raise ConfigError(f"backend must be 'real' or 'mock', got {self.backend!r}")
        if not self.catalog_path:
            raise ConfigError("catalog_path is required")
        if not self.popularity_path:
            raise ConfigError("popularity_path is required")
        if self.mode == MODE_SIMULATED and not self.workload_path:
            raise ConfigError("simulated mode requires workload_path")
        if self.mode == MODE_REAL and not self.task:
            raise ConfigError("real mode requires a task")
        for label, path in (
            ("catalog_path", self.catalog_path),
            ("popularity_path", self.popularity_path),
            ("workload_path", self.workload_path),
        ):
            if path and not Path(path).is_file():
                raise ConfigError(f"{label} does not exist: {path}")


def _build_filter(cfg_filter: dict | None, host: HostCapabilities | None) -> SamplerFilter:
    if not cfg_filter:
        return NO_FILTER
    known = {"allowed_generations", "max_vram_mib", "max_cuda_cores", "require_emulable_on_host"}
    unknown = set(cfg_filter) - known
    if unknown:
        raise ConfigError(f"unknown filter key(s): {sorted(unknown)}")
    generations = cfg_filter.get("allowed_generations")
    return SamplerFilter(
        allowed_generations=frozenset(generations) if generations else None,
        max_vram_mib=cfg_filter.get("max_vram_mib"),
        max_cuda_cores=cfg_filter.get("max_cuda_cores"),
        require_emulable_on=host if cfg_filter.get("require_emulable_on_host") else None,
    )


def _make_runner(fake_commands: bool):
    return RecordingCommandRunner() if fake_commands else SystemCommandRunner()


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(human)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_probe(args) -> int:
    catalog = load_profile_catalog(args.catalog) if args.catalog else None
    host_profile = None
    if args.host_profile:
        if catalog is None or args.host_profile not in catalog:
            raise ConfigError(f"host profile {args.host_profile!r} not in catalog")
        host_profile = catalog[args.host_profile]
    runner = _make_runner(args.fake_commands)
    host, report = probe_host(runner=runner, catalog=catalog, host_profile=host_profile)
    payload = {"host": host_to_dict(host), "capabilities": report.to_dict()}
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"host: {host.id}")
    print(f"  cpu: {host.cpu.model_name} ({host.cpu.cores}c/{host.cpu.threads}t, "
          f"{host.cpu.base_clock_mhz}-{host.cpu.boost_clock_mhz} MHz)")
    if host.gpu:
        print(f"  gpu: {host.gpu.model_name} ({host.gpu.cuda_cores} CUDA cores, "
              f"{host.gpu.vram_mib} MiB VRAM)")
    else:
        print("  gpu: none detected")
    print(f"  ram: {host.ram_mib} MiB")
    print(f"  privileged: {host.is_privileged}")
    print("capabilities:")
    for action in sorted(report.supported):
        status = "ok" if report.supported[action] else f"unsupported ({report.reason(action)})"
        print(f"  {action}: {status}")
    for note in report.notes:
        print(f"  note: {note}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 0:
        raise ConfigError("--n must be nonnegative")
    catalog = load_profile_catalog(args.catalog)
    table = load_popularity_table(args.popularity, catalog)
    generations = frozenset(args.filter_generation) if args.filter_generation else None
    sample_filter = SamplerFilter(
        allowed_generations=generations,
        max_vram_mib=args.max_vram_mib,
        max_cuda_cores=args.max_cuda_cores,
    )
    sample = sample_federation(table, args.n, args.seed, catalog, sample_filter)
    histogram = describe_sample(sample)
    if args.json:
        print(json.dumps({"sample": sample, "histogram": dict(sorted(histogram.items()))},
                         indent=2, sort_keys=True))
        return EXIT_OK
    for profile_id in sample:
        print(profile_id)
    if args.summary:
        total = len(sample)
        print("# histogram")
        for profile_id in sorted(histogram):
            count = histogram[profile_id]
            print(f"{profile_id}\t{count}\t{count / total:.4f}")
    return EXIT_OK


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.catalog:
        cfg.catalog_path = args.catalog
    if args.popularity:
        cfg.popularity_path = args.popularity
    if args.workload:
        cfg.workload_path = args.workload
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.clients is not None:
        cfg.clients_per_round = args.clients
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode:
        cfg.mode = args.mode
    if args.backend:
        cfg.backend = args.backend
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.degrade_allowed:
        cfg.degrade_allowed = True
    if args.fake_commands:
        cfg.fake_commands = True
    if args.host_profile:
        cfg.host_profile_id = args.host_profile
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    cfg.validate()

    catalog = load_profile_catalog(cfg.catalog_path)
    table = load_popularity_table(cfg.popularity_path, catalog)
    workload = load_workload(cfg.workload_path) if cfg.workload_path else None

    task_template = None
    if cfg.task:
        known = {f.name for f in fields(TaskTemplate)}
        unknown = set(cfg.task) - known
        if unknown:
            raise ConfigError(f"unknown task key(s): {sorted(unknown)}")
        task_template = TaskTemplate(**{**cfg.task, "argv": tuple(cfg.task.get("argv", ()))})

    if cfg.mode == MODE_SIMULATED:
        assert workload is not None
        anchor_id = cfg.host_profile_id or workload.reference_host_id
        if anchor_id not in catalog:
            raise UnknownReferenceHost(anchor_id)
        host = pseudo_host(catalog[anchor_id])
        enforcer = Enforcer(MockBackend())
    else:
        runner = _make_runner(cfg.fake_commands)
        host_profile = None
        if cfg.host_profile_id:
            if cfg.host_profile_id not in catalog:
                raise ConfigError(f"host profile {cfg.host_profile_id!r} not in catalog")
            host_profile = catalog[cfg.host_profile_id]
        host, cap_report = probe_host(runner=runner, catalog=catalog, host_profile=host_profile)
        if cfg.backend == "mock":
            backend = MockBackend()
        else:
            backend = RealBackend(runner=runner, capabilities=cap_report,
                                  run_id=f"run{os.getpid()}")
        enforcer = Enforcer(backend)
        if cfg.backend == "real" and not cfg.degrade_allowed:
            needed = ["cpu_freq", "cpu_affinity", "memory_cgroup"]
            if any(p.gpu is not None for p in catalog.values()):
                needed += ["gpu_clock", "gpu_mps"]
            blocked = [(a, cap_report.reason(a)) for a in needed if not cap_report.supports(a)]
            if blocked:
                for action, reason in blocked:
                    print(f"refusing real mode: {action} unsupported ({reason})", file=sys.stderr)
                print("pass --degrade-allowed to record skips instead", file=sys.stderr)
                return EXIT_PRIVILEGE
        stale = enforcer.stale_state()
        if stale:
            for line in stale:
                print(line, file=sys.stderr)
            print("stale orchestrator state found; run `bouquet reset` first", file=sys.stderr)
            return EXIT_RUNTIME

    sample_filter = _build_filter(cfg.filter, host)
    reports = run_experiment(
        catalog=catalog,
        table=table,
        host=host,
        enforcer=enforcer,
        mode=cfg.mode,
        rounds=cfg.rounds,
        clients_per_round=cfg.clients_per_round,
        seed=cfg.seed,
        out_dir=Path(cfg.output_dir),
        task_template=task_template,
        workload=workload,
        sample_filter=sample_filter,
        degrade_allowed=cfg.degrade_allowed,
    )

    summaries = []
    for report in reports:
        ok = sum(1 for r in report.runs if r.status.kind == "ok")
        failed = len(report.runs) - ok
        summaries.append(
            {"round": report.round_idx, "clients": len(report.runs), "ok": ok, "failed": failed}
        )
    if args.json:
        print(json.dumps({"output_dir": cfg.output_dir, "rounds": summaries},
                         indent=2, sort_keys=True))
    else:
        for line in summaries:
            print(f"round {line['round']}: clients={line['clients']} "
                  f"ok={line['ok']} failed={line['failed']}")
        print(f"reports written to {cfg.output_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    reports = scheduler.load_round_reports(args.reports)
    if not reports:
        raise ConfigError(f"no round_*.jsonl files under {args.reports}")
    catalog = load_profile_catalog(args.catalog)
    benchmark = analysis.load_benchmark(args.benchmark)
    out_dir = Path(args.output_dir) if args.output_dir else Path(args.reports) / "validation"
    summary = analysis.emit_validation_report(reports, benchmark, catalog, out_dir)
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(f"spearman_rho={summary['spearman_rho']:.3f} "
              f"kendall_tau_b={summary['kendall_tau_b']:.3f} n={summary['n']}")
        print(f"validation files written to {out_dir}")
    return EXIT_OK


def cmd_reset(args) -> int:
    runner = _make_runner(args.fake_commands)
    backend = RealBackend(runner=runner)
    lines = Enforcer(backend).emergency_reset()
    if args.json:
        print(json.dumps({"actions": lines}, indent=2, sort_keys=True))
    elif lines:
        for line in lines:
            print(line)
    else:
        print("nothing to do")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entrypoint
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bouquet",
        description="Emulate heterogeneous federated-learning client hardware on one host.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    p_probe = sub.add_parser("probe", parents=[common], help="inspect host capabilities")
    p_probe.add_argument("--catalog", help="catalog used to resolve the GPU's core count")
    p_probe.add_argument("--host-profile", help="profile id describing this host")
    p_probe.add_argument("--fake-commands", action="store_true",
                         help="testing: fake external tools instead of invoking them")
    p_probe.set_defaults(func=cmd_probe)

    p_sample = sub.add_parser("sample", parents=[common], help="sample a federation")
    p_sample.add_argument("--catalog", required=True)
    p_sample.add_argument("--popularity", required=True)
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--summary", action="store_true", help="append a histogram")
    p_sample.add_argument("--filter-generation", action="append", default=None,
                          metavar="GEN", help="restrict to a GPU generation (repeatable)")
    p_sample.add_argument("--max-vram-mib", type=int, default=None)
    p_sample.add_argument("--max-cuda-cores", type=int, default=None)
    p_sample.set_defaults(func=cmd_sample)

    p_run = sub.add_parser("run", parents=[common], help="run an experiment")
    p_run.add_argument("--config", help="experiment config JSON (flags override)")
    p_run.add_argument("--catalog")
    p_run.add_argument("--popularity")
    p_run.add_argument("--workload")
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--clients", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--mode", choices=[MODE_REAL, MODE_SIMULATED], default=None)
    p_run.add_argument("--backend", choices=["real", "mock"], default=None)
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--degrade-allowed", action="store_true",
                       help="record unsupported enforcement actions as skips")
    p_run.add_argument("--fake-commands", action="store_true")
    p_run.add_argument("--host-profile")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", parents=[common],
                           help="rank-correlate reports against a benchmark")
    p_val.add_argument("--reports", required=True, help="experiment output directory")
    p_val.add_argument("--benchmark", required=True, help="benchmark CSV")
    p_val.add_argument("--catalog", required=True)
    p_val.add_argument("--output-dir", default=None)
    p_val.set_defaults(func=cmd_validate)

    p_reset = sub.add_parser("reset", parents=[common],
                             help="clear any leftover hardware limits")
    p_reset.add_argument("--fake-commands", action="store_true")
    p_reset.set_defaults(func=cmd_reset)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PrivilegeError as exc:
        print(f"privilege error: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except UnsupportedAction as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except _CONFIG_EXIT_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BouquetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
