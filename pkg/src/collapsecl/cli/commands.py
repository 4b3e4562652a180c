"""
CLI commands: argparse subcommands for collapsecl.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional

from ..config import ExperimentConfig
from ..core.metrics import summarize
from ..core.trainer import run_experiment
from ..errors import CollapseError, ConfigError, UsageError
from ..store import files
from ..store.models import MetricsReport, SeedSummary
from ..verify.suites import SuiteRunner
from . import formatter

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _parse_seeds(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        seeds = [int(s) for s in raw.replace(" ", "").split(",") if s]
    except ValueError:
        raise UsageError(f"--seeds expects a comma-separated list of integers, got {raw!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(Path(args.config))
    seeds = _parse_seeds(getattr(args, "seeds", None))
    return config.with_seeds(seeds) if seeds else config


def _out_dir(args, config: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(config.output_dir)


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path,
             relations_dir: Optional[Path] = None) -> MetricsReport:
    """One seeded pipeline: build the stream, train, write report/loss/accuracy files."""
    stream = config.stream.build(seed, config.base_dir)
    checkpoints = out_dir / "checkpoints" if config.checkpoints else None
    report = run_experiment(config.for_seed(seed), stream, checkpoint_dir=checkpoints,
                            relations_dir=relations_dir / f"seed{seed}" if relations_dir else None)
    files.write_report(files.report_path(out_dir, seed), report)
    files.write_losses_csv(files.losses_path(out_dir, seed), report.loss_records)
    files.write_accuracy_csv(out_dir / f"accuracy_{seed}.csv", report.headline)
    return report


def run_seeds(config: ExperimentConfig, out_dir: Path, workers: int = 1,
              relations_dir: Optional[Path] = None) -> list[MetricsReport]:
    """Run every seed, in worker processes when workers > 1; results come back in seed order."""
    seeds = list(config.seeds)
    if workers <= 1 or len(seeds) == 1:
        return [run_seed(config, s, out_dir, relations_dir) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_seed, config, s, out_dir, relations_dir) for s in seeds]
        return [f.result() for f in futures]


def summarize_reports(reports: list[MetricsReport]) -> SeedSummary:
    """Mean and population std of AA and F over the seeds of one ablation cell."""
    if not reports:
        raise UsageError("no reports to summarize")
    settings = reports[0].settings
    aa_mean, aa_std = summarize(r.average_accuracy for r in reports)
    forgetting = [r.average_forgetting for r in reports if r.average_forgetting is not None]
    f_mean, f_std = summarize(forgetting) if forgetting else (None, None)
    return SeedSummary(
        plasticity=settings.get("plasticity", ""),
        stability=settings.get("stability", ""),
        pseudo_replay=bool(settings.get("pseudo_replay", False)),
        buffer=int(settings.get("buffer", 0)),
        aa_mean=aa_mean, aa_std=aa_std, f_mean=f_mean, f_std=f_std,
        n_seeds=len(reports),
    )


def cmd_run(args) -> int:
    """Run the configured experiment once per seed and write the summary."""
    config = _load_config(args)
    out_dir = _out_dir(args, config)
    relations = Path(args.dump_relations) if args.dump_relations else None
    logger.info("run_started | config=%s | seeds=%s | out=%s", args.config, list(config.seeds), out_dir)

    reports = run_seeds(config, out_dir, args.workers, relations)
    summary = summarize_reports(reports)
    files.write_summary_csv(out_dir / "summary.csv", [summary])
    print(formatter.format_reports(reports))
    print(formatter.format_summary([summary]))
    return EXIT_OK


def ablation_cells(config: ExperimentConfig) -> list[dict[str, Any]]:
    """Cells of the configured grid in order, duplicates removed."""
    grid = config.grid
    if grid.empty:
        raise ConfigError("ablation grid is empty", field="grid")
    if grid.cells:
        cells = [dict(c) for c in grid.cells]
    else:
        t = config.train
        axes = (
            ("plasticity_loss", grid.plasticity_loss or (t.plasticity_loss,)),
            ("stability", grid.stability or (t.stability,)),
            ("pseudo_replay", grid.pseudo_replay or (t.pseudo_replay,)),
            ("buffer_capacity", grid.buffer_capacity or (t.buffer_capacity,)),
        )
        names = [name for name, _ in axes]
        cells = [dict(zip(names, values)) for values in itertools.product(*(v for _, v in axes))]

    unique: list[dict[str, Any]] = []
    for cell in cells:
        if cell in unique:
            logger.warning("duplicate_cell_dropped | cell=%s", cell)
            continue
        unique.append(cell)
    return unique


def _cell_dir(cell: dict[str, Any], config: ExperimentConfig) -> str:
    t = config.with_cell(cell).train
    replay = "on" if t.pseudo_replay else "off"
    return f"{t.plasticity_loss}_{t.stability}_replay-{replay}_buffer{t.buffer_capacity}"


def cmd_ablate(args) -> int:
    """Run every grid cell over all seeds; one summary row per cell."""
    config = _load_config(args)
    if args.grid:
        config = config.with_grid_file(Path(args.grid))
    out_dir = _out_dir(args, config)
    cells = ablation_cells(config)
    # Every cell is validated up front.
    variants = [(cell, config.with_cell(cell)) for cell in cells]
    logger.info("ablation_started | cells=%d | seeds=%s", len(variants), list(config.seeds))

    rows = []
    for cell, variant in variants:
        reports = run_seeds(variant, out_dir / _cell_dir(cell, config), args.workers)
        rows.append(summarize_reports(reports))
        logger.info("cell_done | cell=%s | aa_mean=%.4f", cell, rows[-1].aa_mean)
    files.write_summary_csv(out_dir / "summary.csv", rows)
    print(formatter.format_summary(rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    """Run invariant and oracle suites; nonzero exit on any failure."""
    runner = SuiteRunner(seed=args.seed, reservoir_trials=args.trials)
    results = runner.run(args.suite)
    print(formatter.format_checks(results))
    failed = [r for r in results if not r.passed]
    if failed:
        logger.error("verify_failed | suite=%s | failed=%s", args.suite, [r.name for r in failed])
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    """Re-aggregate per-seed reports found under --out into summary.csv.

    A directory holding only a summary.csv has that table printed instead.
    """
    out_dir = Path(args.out)
    paths = sorted(out_dir.rglob("report_*.json"))
    if not paths:
        summary = out_dir / "summary.csv"
        if summary.is_file():
            print(formatter.format_summary(files.read_summary_csv(summary)))
            return EXIT_OK
        raise UsageError(f"no report_<seed>.json files under {out_dir}")
    groups: dict[tuple, list[MetricsReport]] = {}
    for path in paths:
        report = files.read_report(path)
        key = (str(path.parent), report.settings.get("plasticity"), report.settings.get("stability"),
               report.settings.get("pseudo_replay"), report.settings.get("buffer"))
        groups.setdefault(key, []).append(report)
    rows = []
    for key in sorted(groups, key=str):
        reports = sorted(groups[key], key=lambda r: r.seed)
        rows.append(summarize_reports(reports))
    files.write_summary_csv(out_dir / "summary.csv", rows)
    print(formatter.format_summary(rows))
    if args.losses:
        tails = {}
        for path in sorted(out_dir.rglob("losses_*.csv")):
            tails[str(path.relative_to(out_dir))] = files.final_losses(files.read_losses_csv(path))
        print(formatter.format_final_losses(tails))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser."""
    parser = argparse.ArgumentParser(
        prog="collapsecl",
        description="Continual contrastive learning with fixed simplex-ETF prototypes",
    )
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity on stderr (default: INFO)",
    )

    sub = parser.add_subparsers(dest="command", help="Available commands")

    # run
    p = sub.add_parser("run", help="Run an experiment for every seed")
    p.add_argument("--config", required=True, help="Experiment config (JSON or YAML)")
    p.add_argument("--out", help="Output directory (default: config output_dir)")
    p.add_argument("--seeds", help="Comma-separated seeds, overriding the config")
    p.add_argument("--workers", type=int, default=1, help="Seeds to run in parallel processes")
    p.add_argument("--dump-relations", metavar="DIR",
                   help="Write relation matrices of each task's first batch to DIR")

    # ablate
    p = sub.add_parser("ablate", help="Run an ablation grid and tabulate mean/std per cell")
    p.add_argument("--config", required=True, help="Experiment config (JSON or YAML)")
    p.add_argument("--grid", help="File whose `grid` section replaces the config's")
    p.add_argument("--out", help="Output directory (default: config output_dir)")
    p.add_argument("--seeds", help="Comma-separated seeds, overriding the config")
    p.add_argument("--workers", type=int, default=1, help="Seeds to run in parallel processes")

    # verify
    p = sub.add_parser("verify", help="Run invariant and oracle suites")
    p.add_argument("--suite", default="all", help="etf | grad | reservoir | metrics | all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100_000, help="Monte-Carlo trials for the reservoir suite")

    # report
    p = sub.add_parser("report", help="Rebuild summary.csv from existing per-seed reports")
    p.add_argument("--out", required=True, help="Directory holding report_<seed>.json files")
    p.add_argument("--losses", action="store_true", help="Also print each task's final-epoch losses")

    return parser


def run_cli(argv: Optional[list[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s | %(message)s",
        stream=sys.stderr,
    )

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    commands = {
        "run": cmd_run,
        "ablate": cmd_ablate,
        "verify": cmd_verify,
        "report": cmd_report,
    }
    try:
        return commands[args.command](args)
    except UsageError as e:
        print(f"collapsecl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        where = f"{args.config}: " if getattr(args, "config", None) and args.config not in str(e) else ""
        print(f"collapsecl: invalid config: {where}{e}", file=sys.stderr)
        return EXIT_FAILED
    except CollapseError as e:
        print(f"collapsecl: {e}", file=sys.stderr)
        return EXIT_FAILED
