"""
Continual-learning metrics and Neural-Collapse diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np

from ..errors import DegenerateClassError, DomainError, IncompleteMatrixError, UndefinedMetricError
from .etf import ClassPrototypeMap, PrototypeSet


@dataclass
class AccuracyMatrix:
    """A[t][k] = accuracy on task k after training task t, for 1 <= k <= t <= T."""
    num_tasks: int
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_tasks < 1:
            raise DomainError(f"accuracy matrix needs T >= 1, got T={self.num_tasks}")
        for (t, k), v in list(self.values.items()):
            self._check(t, k, v)

    def _check(self, t: int, k: int, value: float) -> None:
        if not (1 <= k <= t <= self.num_tasks):
            raise DomainError(f"A[{t},{k}] lies outside the lower triangle of a {self.num_tasks}-task matrix")
        if not (0.0 <= value <= 1.0):
            raise DomainError(f"A[{t},{k}]={value} is outside [0, 1]")

    def set(self, t: int, k: int, value: float) -> None:
        value = float(value)
        self._check(t, k, value)
        self.values[(t, k)] = value

    def get(self, t: int, k: int) -> Optional[float]:
        return self.values.get((t, k))

    def row(self, t: int) -> list[Optional[float]]:
        return [self.get(t, k) for k in range(1, t + 1)]

    @property
    def complete(self) -> bool:
        return len(self.values) == self.num_tasks * (self.num_tasks + 1) // 2

    def to_rows(self) -> list[list[Optional[float]]]:
        """Dense T x T list with None above the diagonal."""
        return [[self.get(t, k) if k <= t else None for k in range(1, self.num_tasks + 1)]
                for t in range(1, self.num_tasks + 1)]

    def to_dict(self) -> dict[str, Any]:
        return {"num_tasks": self.num_tasks, "rows": self.to_rows()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AccuracyMatrix":
        m = cls(num_tasks=int(data["num_tasks"]))
        for t, row in enumerate(data["rows"], start=1):
            for k, v in enumerate(row, start=1):
                if v is not None:
                    m.set(t, k, v)
        return m

    @classmethod
    def from_rows(cls, rows: list[list[Optional[float]]]) -> "AccuracyMatrix":
        return cls.from_dict({"num_tasks": len(rows), "rows": rows})


def average_accuracy(m: AccuracyMatrix) -> float:
    """Mean of the final row."""
    final = m.row(m.num_tasks)
    missing = [k for k, v in enumerate(final, start=1) if v is None]
    if missing:
        raise IncompleteMatrixError(f"row {m.num_tasks} is missing tasks {missing}")
    return float(sum(final) / m.num_tasks)


def average_forgetting(m: AccuracyMatrix) -> float:
    """Mean over i < T of max_{i <= t <= T-1} (A[t,i] - A[T,i])."""
    T = m.num_tasks
    if T < 2:
        raise UndefinedMetricError(f"forgetting needs at least 2 tasks, got T={T}")
    total = 0.0
    for i in range(1, T):
        final = m.get(T, i)
        history = [m.get(t, i) for t in range(i, T)]
        if final is None or any(v is None for v in history):
            raise IncompleteMatrixError(f"column {i} of the accuracy matrix is incomplete")
        total += max(v - final for v in history)
    return total / (T - 1)


# ── Neural-Collapse diagnostics ──

@dataclass
class NCReport:
    class_ids: list[int]
    class_means: np.ndarray
    global_mean: np.ndarray
    centered_means: np.ndarray  # class means about their average, unit length
    within_traces: np.ndarray
    nc1_score: float
    nc2_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": self.class_ids,
            "nc1": self.nc1_score,
            "nc2": self.nc2_score,
            "within_traces": [float(v) for v in self.within_traces],
        }


def _unit_rows(a: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, lengths, out=np.zeros_like(a), where=lengths > 1e-12)


def nc_diagnostics(embeddings: np.ndarray, labels: np.ndarray, prototypes: PrototypeSet,
                   proto_map: ClassPrototypeMap) -> NCReport:
    """Within/between scatter ratio (NC1) and mean mean-to-prototype cosine (NC2).

    NC1 centres on the mean of all samples. Class covariances are the biased
    (1/n_k) estimates, matching the between-class term. NC2 centres the class
    means on their own average and the prototypes on the average of the
    vertices present, so a subset of classes collapsed onto its vertices
    scores 1.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DomainError(f"embeddings {z.shape} and labels {y.shape} disagree")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size == 0:
        raise DegenerateClassError("no samples")
    lonely = classes[counts < 2]
    if lonely.size:
        raise DegenerateClassError(f"classes {lonely.tolist()} have fewer than 2 samples")

    global_mean = z.mean(axis=0)
    means = np.vstack([z[y == c].mean(axis=0) for c in classes])
    traces = np.array([np.sum((z[y == c] - means[i]) ** 2) / counts[i] for i, c in enumerate(classes)])
    centered = means - global_mean
    between = np.mean(np.sum(centered ** 2, axis=1))
    within = float(np.mean(traces))
    if between > 0:
        nc1 = within / between
    else:
        nc1 = 0.0 if within == 0 else float("inf")

    # NC2 compares the class-mean simplex with the simplex of the vertices present.
    tilde = _unit_rows(means - means.mean(axis=0))
    protos = prototypes.vectors[proto_map.vertices_for(classes)]
    targets = _unit_rows(protos - protos.mean(axis=0))
    nc2 = float(np.clip(np.mean(np.sum(tilde * targets, axis=1)), -1.0, 1.0))

    return NCReport(
        class_ids=[int(c) for c in classes],
        class_means=means,
        global_mean=global_mean,
        centered_means=tilde,
        within_traces=traces,
        nc1_score=float(nc1),
        nc2_score=nc2,
    )


def summarize(values: Iterable[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise UndefinedMetricError("cannot summarize an empty list")
    return float(arr.mean()), float(arr.std())
