"""
Human-readable output formatting for CLI.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Optional

import pandas as pd

from ..store.models import MetricsReport, SeedSummary
from ..verify.suites import CheckResult


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:6.2f}"


def format_matrix(report: MetricsReport) -> str:
    """Lower-triangular accuracy matrix in percent, one row per trained task."""
    m = report.headline
    lines = ["after  " + " ".join(f"  T{k:<4}" for k in range(1, m.num_tasks + 1))]
    for t in range(1, m.num_tasks + 1):
        cells = [_pct(m.get(t, k)) if k <= t else "      " for k in range(1, m.num_tasks + 1)]
        lines.append(f"T{t:<5} " + " ".join(cells))
    return "\n".join(lines)


def format_reports(reports: Iterable[MetricsReport]) -> str:
    lines = []
    for r in reports:
        nc = ""
        if r.nc:
            nc = f"  nc1={r.nc['nc1']:.4f}  nc2={r.nc['nc2']:.4f}"
        lines.append(f"seed {r.seed} ({r.scenario}): AA={_pct(r.average_accuracy)}%  "
                     f"F={_pct(r.average_forgetting)}{nc}")
        lines.append(format_matrix(r))
        lines.append("")
    return "\n".join(lines).rstrip()


def format_summary(rows: Iterable[SeedSummary]) -> str:
    """One line per ablation cell: mean ± std over seeds."""
    rows = list(rows)
    if not rows:
        return "No results."
    header = f"{'plasticity':<12} {'stability':<9} {'replay':<6} {'buffer':>6}   {'AA':>15}   {'F':>15}  seeds"
    lines = [header, "-" * len(header)]
    for r in rows:
        aa = f"{_pct(r.aa_mean)} ± {_pct(r.aa_std).strip()}"
        f = "-" if r.f_mean is None else f"{_pct(r.f_mean)} ± {_pct(r.f_std).strip()}"
        lines.append(f"{r.plasticity:<12} {r.stability:<9} {'on' if r.pseudo_replay else 'off':<6} "
                     f"{r.buffer:>6}   {aa:>15}   {f:>15}  {r.n_seeds}")
    return "\n".join(lines)


def format_final_losses(tails: Mapping[str, pd.DataFrame]) -> str:
    """Last-epoch losses per task, one block per losses file."""
    if not tails:
        return "No loss files."
    lines = []
    for name, frame in tails.items():
        lines.append(name)
        for task, row in frame.iterrows():
            lines.append(f"  T{task:<3} epoch {int(row['epoch']):>4}  plasticity={row['fnc2']:.4f}  "
                         f"ird={row['ird']:.4f}  sprd={row['sprd']:.4f}  alpha={row['alpha']:.2f}")
    return "\n".join(lines)


def format_checks(results: Iterable[CheckResult]) -> str:
    results = list(results)
    lines = []
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        lines.append(f"  {mark} {r.name:<24} max_error={r.max_error:.3e}  tol={r.tolerance:.0e}  {r.detail}")
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"\n{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
