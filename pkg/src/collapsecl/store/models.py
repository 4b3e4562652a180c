"""
Persisted experiment records.

Plain dataclasses; each has a to_dict/from_dict pair used by store.files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from ..core.metrics import AccuracyMatrix


@dataclass
class LossRecord:
    """Per-epoch mean losses for one task."""
    task: int = 1
    epoch: int = 1
    fnc2: float = 0.0  # plasticity term (FNC2, or SupCon for the supcon-asym baseline)
    ird: float = 0.0
    sprd: float = 0.0
    alpha: float = 0.0
    total: float = 0.0
    batches: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task, "epoch": self.epoch, "fnc2": self.fnc2, "ird": self.ird,
            "sprd": self.sprd, "alpha": self.alpha, "total": self.total, "batches": self.batches,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LossRecord":
        return cls(**{k: data[k] for k in cls().to_dict()})


@dataclass
class NCPoint:
    """NC scores of clean current-task embeddings after one epoch."""
    task: int = 1
    epoch: int = 0
    nc1: float = 0.0
    nc2: float = 0.0


@dataclass
class TaskTrace:
    """Everything recorded while learning one task."""
    task: int = 1
    losses: list[LossRecord] = field(default_factory=list)
    nc_trace: list[NCPoint] = field(default_factory=list)
    calls: dict[str, int] = field(default_factory=dict)  # loss name -> invocation count
    r_above_one: int = 0  # anchors whose prototype ratio r_i exceeded 1
    skipped_anchors: int = 0
    buffer_size: int = 0
    offered: int = 0  # current-task samples offered to the reservoir

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "losses": [r.to_dict() for r in self.losses],
            "nc_trace": [vars(p).copy() for p in self.nc_trace],
            "calls": dict(sorted(self.calls.items())),
            "r_above_one": self.r_above_one,
            "skipped_anchors": self.skipped_anchors,
            "buffer_size": self.buffer_size,
            "offered": self.offered,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskTrace":
        return cls(
            task=data["task"],
            losses=[LossRecord.from_dict(r) for r in data.get("losses", [])],
            nc_trace=[NCPoint(**p) for p in data.get("nc_trace", [])],
            calls=dict(data.get("calls", {})),
            r_above_one=data.get("r_above_one", 0),
            skipped_anchors=data.get("skipped_anchors", 0),
            buffer_size=data.get("buffer_size", 0),
            offered=data.get("offered", 0),
        )


@dataclass
class MetricsReport:
    """The result of one seeded experiment."""
    seed: int = 0
    scenario: str = "class-il"
    class_il: Optional[AccuracyMatrix] = None
    task_il: Optional[AccuracyMatrix] = None
    average_accuracy: float = 0.0
    average_forgetting: Optional[float] = None  # undefined for a single task
    nc: dict[str, Any] = field(default_factory=dict)  # final NC diagnostics on test embeddings
    traces: list[TaskTrace] = field(default_factory=list)
    settings: dict[str, Any] = field(default_factory=dict)  # ablation cell this run belongs to

    @property
    def headline(self) -> AccuracyMatrix:
        """The matrix AA and F are computed from."""
        return self.task_il if self.scenario == "task-il" else self.class_il

    @property
    def loss_records(self) -> list[LossRecord]:
        return [r for trace in self.traces for r in trace.losses]

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "scenario": self.scenario,
            "settings": self.settings,
            "average_accuracy": self.average_accuracy,
            "average_forgetting": self.average_forgetting,
            "class_il": self.class_il.to_dict() if self.class_il else None,
            "task_il": self.task_il.to_dict() if self.task_il else None,
            "nc": self.nc,
            "traces": [t.to_dict() for t in self.traces],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsReport":
        return cls(
            seed=data["seed"],
            scenario=data.get("scenario", "class-il"),
            class_il=AccuracyMatrix.from_dict(data["class_il"]) if data.get("class_il") else None,
            task_il=AccuracyMatrix.from_dict(data["task_il"]) if data.get("task_il") else None,
            average_accuracy=data["average_accuracy"],
            average_forgetting=data.get("average_forgetting"),
            nc=data.get("nc", {}),
            traces=[TaskTrace.from_dict(t) for t in data.get("traces", [])],
            settings=data.get("settings", {}),
        )


SUMMARY_COLUMNS = ("plasticity", "stability", "pseudo_replay", "buffer",
                   "aa_mean", "aa_std", "f_mean", "f_std", "n_seeds")


@dataclass
class SeedSummary:
    """One row of summary.csv: mean and std over seeds of one ablation cell."""
    plasticity: str = "fnc2"
    stability: str = "hsd"
    pseudo_replay: bool = True
    buffer: int = 0
    aa_mean: float = 0.0
    aa_std: float = 0.0
    f_mean: Optional[float] = None
    f_std: Optional[float] = None
    n_seeds: int = 0

    def to_record(self) -> dict[str, Any]:
        """Column -> value for summary.csv; replay is written as on/off."""
        return {
            "plasticity": self.plasticity, "stability": self.stability,
            "pseudo_replay": "on" if self.pseudo_replay else "off", "buffer": self.buffer,
            "aa_mean": self.aa_mean, "aa_std": self.aa_std,
            "f_mean": self.f_mean, "f_std": self.f_std, "n_seeds": self.n_seeds,
        }

    @classmethod
    def from_record(cls, row: dict[str, Any]) -> "SeedSummary":
        def optional(value: Any) -> Optional[float]:
            return None if value is None or value != value else float(value)

        return cls(
            plasticity=str(row["plasticity"]),
            stability=str(row["stability"]),
            pseudo_replay=row["pseudo_replay"] == "on",
            buffer=int(row["buffer"]),
            aa_mean=float(row["aa_mean"]),
            aa_std=float(row["aa_std"]),
            f_mean=optional(row["f_mean"]),
            f_std=optional(row["f_std"]),
            n_seeds=int(row["n_seeds"]),
        )
