"""
Readers and writers for every file collapsecl produces.

JSON documents are written with sorted keys and a trailing newline. Tables
go through pandas with a fixed column order; floats keep their shortest
round-trip form, missing values are written as empty cells.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable

import pandas as pd

from ..core.buffer import ReplayBuffer
from ..core.encoder import MlpParams
from ..core.etf import PrototypeSet
from ..core.losses import RelationDistribution
from ..core.metrics import AccuracyMatrix
from ..errors import ConfigError
from .models import SUMMARY_COLUMNS, LossRecord, MetricsReport, SeedSummary

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "task", "fnc2", "ird", "sprd", "alpha")


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e.msg}", line=e.lineno) from None


def _write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


# ── Prototypes and checkpoints ──

def save_prototypes(path: Path, prototypes: PrototypeSet) -> Path:
    return write_json(path, prototypes.to_dict())


def checkpoint_path(root: Path, seed: int, task: int) -> Path:
    return root / f"seed{seed}" / f"task{task}.json"


def save_checkpoint(path: Path, params: MlpParams) -> Path:
    return write_json(path, params.to_dict())


def load_checkpoint(path: Path) -> MlpParams:
    """Restore encoder parameters (momentum buffers start at zero)."""
    return MlpParams.from_dict(read_json(path))


# ── Reports ──

def report_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"report_{seed}.json"


def losses_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"losses_{seed}.csv"


def write_report(path: Path, report: MetricsReport) -> Path:
    return write_json(path, report.to_dict())


def read_report(path: Path) -> MetricsReport:
    return MetricsReport.from_dict(read_json(path))


def write_losses_csv(path: Path, records: Iterable[LossRecord]) -> Path:
    """Columns: epoch,task,fnc2,ird,sprd,alpha."""
    frame = pd.DataFrame([[r.epoch, r.task, r.fnc2, r.ird, r.sprd, r.alpha] for r in records],
                         columns=list(LOSS_COLUMNS))
    return _write_frame(path, frame)


def read_losses_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def final_losses(frame: pd.DataFrame) -> pd.DataFrame:
    """The last recorded epoch of every task, indexed by task."""
    return frame.sort_values(["task", "epoch"]).groupby("task").tail(1).set_index("task")


def write_accuracy_csv(path: Path, matrix: AccuracyMatrix) -> Path:
    """One row per (after_task, task) pair of the lower triangle."""
    rows = [(t, k, matrix.get(t, k)) for t in range(1, matrix.num_tasks + 1) for k in range(1, t + 1)]
    return _write_frame(path, pd.DataFrame(rows, columns=["after_task", "task", "accuracy"]))


def write_summary_csv(path: Path, rows: Iterable[SeedSummary]) -> Path:
    """Columns: plasticity,stability,pseudo_replay,buffer,aa_mean,aa_std,f_mean,f_std,n_seeds."""
    frame = pd.DataFrame([r.to_record() for r in rows], columns=list(SUMMARY_COLUMNS))
    return _write_frame(path, frame)


def read_summary_csv(path: Path) -> list[SeedSummary]:
    frame = pd.read_csv(path, keep_default_na=False, na_values={"f_mean": [""], "f_std": [""]},
                        float_precision="round_trip",
                        dtype={"plasticity": str, "stability": str, "pseudo_replay": str})
    return [SeedSummary.from_record(row) for row in frame.to_dict("records")]


# ── Inspection dumps ──

def dump_buffer_csv(path: Path, buffer: ReplayBuffer) -> Path:
    """Stored entries as slot,task,label,x0..x{D-1}."""
    dim = buffer.entries[0].x.shape[0] if buffer.entries else 0
    columns = ["slot", "task", "label"] + [f"x{i}" for i in range(dim)]
    rows = [[slot, e.task, e.label, *(float(v) for v in e.x)] for slot, e in enumerate(buffer.entries)]
    return _write_frame(path, pd.DataFrame(rows, columns=columns))


def write_relations(out_dir: Path, task: int, relations: dict[str, RelationDistribution]) -> list[Path]:
    """One CSV per relation matrix: relations_task<t>_<name>.csv, rows in batch order."""
    written = []
    for name, rel in sorted(relations.items()):
        frame = pd.DataFrame(rel.probs, columns=[f"p{j}" for j in range(rel.probs.shape[1])])
        frame.insert(0, "row", range(len(frame)))
        written.append(_write_frame(out_dir / f"relations_task{task}_{name}.csv", frame))
    logger.debug("relations_dumped | task=%d | files=%d | dir=%s", task, len(written), out_dir)
    return written
