"""
Class-incremental task streams and two-view augmentation.

Synthetic streams are Gaussian clusters around random unit-sphere means;
CSV streams are loaded from `task,label,split,x0..x{D-1}` files.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..errors import ConfigError, DatasetError, EmptyBatchError
from .buffer import BufferEntry, ReplayBuffer, reservoir_insert, sample_batch

logger = logging.getLogger(__name__)

SCENARIOS = ("class-il", "task-il")
TRAIN_FRACTION = 0.8


@dataclass
class TaskDataset:
    """Samples of one task, split into train and test."""
    task: int
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        if self.y_train.shape[0] + self.y_test.shape[0] == 0:
            raise DatasetError(f"task {self.task} has no samples")
        allowed = set(self.classes)
        stray = (set(self.y_train.tolist()) | set(self.y_test.tolist())) - allowed
        if stray:
            raise DatasetError(f"task {self.task} holds labels {sorted(stray)} outside its class set")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1] if self.x_train.size else self.x_test.shape[1]

    @property
    def train_pool(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_train, self.y_train


@dataclass
class TaskStream:
    """Ordered tasks with disjoint class sets."""
    tasks: list[TaskDataset]
    scenario: str = "class-il"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}", field="scenario")
        if not self.tasks:
            raise DatasetError("stream has no tasks")
        seen: set[int] = set()
        for expected, task in enumerate(self.tasks, start=1):
            if task.task != expected:
                raise DatasetError(f"task indices must run 1..T; found {task.task} at position {expected}")
            overlap = seen & set(task.classes)
            if overlap:
                raise DatasetError(f"task {task.task} reuses classes {sorted(overlap)} from earlier tasks")
            seen |= set(task.classes)

    @property
    def total_tasks(self) -> int:
        return len(self.tasks)

    @property
    def class_sets(self) -> list[tuple[int, ...]]:
        return [t.classes for t in self.tasks]

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)

    def task(self, t: int) -> TaskDataset:
        return self.tasks[t - 1]


@dataclass(frozen=True)
class AugmentConfig:
    """Vector-space augmentation: planar rotation, scale jitter, additive noise."""
    noise_std: float = 0.05
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    rotation: bool = False
    max_angle: float = math.pi / 8

    def __post_init__(self):
        lo, hi = self.scale_jitter
        object.__setattr__(self, "scale_jitter", (float(lo), float(hi)))
        if lo > hi:
            raise ConfigError(f"scale_jitter lower bound {lo} exceeds upper bound {hi}", field="scale_jitter")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}", field="noise_std")


# ── Generation and loading ──

def make_synthetic_stream(tasks: int, classes_per_task: int, samples_per_class: int, input_dim: int,
                          cluster_spread: float, seed: int, scenario: str = "class-il") -> TaskStream:
    """Gaussian clusters with seeded unit-sphere means; 80/20 train/test per class."""
    for name, value in (("tasks", tasks), ("classes_per_task", classes_per_task),
                        ("samples_per_class", samples_per_class)):
        if value < 1:
            raise ConfigError(f"{name} must be positive, got {value}", field=name)
    if input_dim < 2:
        raise ConfigError(f"input_dim must be >= 2, got {input_dim}", field="input_dim")
    if cluster_spread < 0:
        raise ConfigError(f"cluster_spread must be >= 0, got {cluster_spread}", field="cluster_spread")

    rng = np.random.default_rng(seed)
    n_classes = tasks * classes_per_task
    means = rng.standard_normal((n_classes, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    n_train = min(samples_per_class, max(1, int(round(TRAIN_FRACTION * samples_per_class))))

    datasets = []
    for t in range(tasks):
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for c in classes:
            x = means[c] + cluster_spread * rng.standard_normal((samples_per_class, input_dim))
            order = rng.permutation(samples_per_class)
            xs_tr.append(x[order[:n_train]])
            xs_te.append(x[order[n_train:]])
            ys_tr.append(np.full(n_train, c, dtype=np.int64))
            ys_te.append(np.full(samples_per_class - n_train, c, dtype=np.int64))
        datasets.append(TaskDataset(
            task=t + 1,
            classes=classes,
            x_train=np.vstack(xs_tr),
            y_train=np.concatenate(ys_tr),
            x_test=np.vstack(xs_te),
            y_test=np.concatenate(ys_te),
        ))
    logger.debug("stream_generated | tasks=%d | classes=%d | dim=%d | seed=%d",
                 tasks, n_classes, input_dim, seed)
    return TaskStream(tasks=datasets, scenario=scenario)


def load_csv_stream(path: Path | str, scenario: str = "class-il") -> TaskStream:
    """Read a `task,label,split,x0..x{D-1}` file; class sets must be disjoint across tasks."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:3] != ["task", "label", "split"] or len(header) < 4:
            raise DatasetError(f"{path}: header must start with task,label,split followed by x0..")
        dim = len(header) - 3
        expected = [f"x{i}" for i in range(dim)]
        if header[3:] != expected:
            raise DatasetError(f"{path}: feature columns must be named x0..x{dim - 1}")

        rows: dict[int, dict[str, list]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}")
            try:
                task, label = int(row[0]), int(row[1])
                values = [float(v) for v in row[3:]]
            except ValueError as e:
                raise DatasetError(f"{path}:{line_no}: {e}") from None
            split = row[2].strip()
            if split not in ("train", "test"):
                raise DatasetError(f"{path}:{line_no}: split must be 'train' or 'test', got {split!r}")
            bucket = rows.setdefault(task, {"train_x": [], "train_y": [], "test_x": [], "test_y": []})
            bucket[f"{split}_x"].append(values)
            bucket[f"{split}_y"].append(label)

    datasets = []
    for task in sorted(rows):
        b = rows[task]
        labels = b["train_y"] + b["test_y"]
        classes = tuple(dict.fromkeys(labels))
        datasets.append(TaskDataset(
            task=task,
            classes=classes,
            x_train=np.asarray(b["train_x"], dtype=np.float64).reshape(-1, dim),
            y_train=np.asarray(b["train_y"], dtype=np.int64),
            x_test=np.asarray(b["test_x"], dtype=np.float64).reshape(-1, dim),
            y_test=np.asarray(b["test_y"], dtype=np.int64),
        ))
    return TaskStream(tasks=datasets, scenario=scenario)


def write_csv_stream(stream: TaskStream, path: Path | str) -> Path:
    """Write a stream in the loader's CSV format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = stream.tasks[0].input_dim
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "label", "split"] + [f"x{i}" for i in range(dim)])
        for t in stream.tasks:
            for split, xs, ys in (("train", t.x_train, t.y_train), ("test", t.x_test, t.y_test)):
                for x, y in zip(xs, ys):
                    writer.writerow([t.task, int(y), split] + [repr(float(v)) for v in x])
    return path


# ── Augmentation ──

def _augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    b, d = out.shape
    if cfg.rotation and d >= 2:
        i = rng.integers(0, d, size=b)
        j = (i + rng.integers(1, d, size=b)) % d
        theta = rng.uniform(-cfg.max_angle, cfg.max_angle, size=b)
        rows = np.arange(b)
        xi, xj = out[rows, i].copy(), out[rows, j].copy()
        out[rows, i] = np.cos(theta) * xi - np.sin(theta) * xj
        out[rows, j] = np.sin(theta) * xi + np.cos(theta) * xj
    lo, hi = cfg.scale_jitter
    if hi > lo:
        out *= rng.uniform(lo, hi, size=(b, 1))
    else:
        out *= lo
    if cfg.noise_std > 0:
        out += cfg.noise_std * rng.standard_normal((b, d))
    return out


def augment_two_views(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic transforms of x (a vector or a (B, D) batch)."""
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.ndim == 1
    batch = arr[None, :] if flat else arr
    a = _augment(batch, cfg, rng)
    b = _augment(batch, cfg, rng)
    return (a[0], b[0]) if flat else (a, b)


# ── Batching ──

@dataclass
class ViewBatch:
    """Two views per drawn source: rows [view a; view b], row i pairs with i + B."""
    inputs: np.ndarray
    labels: np.ndarray
    view_pair: np.ndarray
    is_anchor: np.ndarray
    sources: np.ndarray      # (B, D) raw inputs before augmentation
    from_buffer: np.ndarray  # (B,) source came from the replay buffer


def task_batches(dataset: TaskDataset, buffer: ReplayBuffer, batch_size: int, augment_cfg: AugmentConfig,
                 rng: np.random.Generator, before_task: Optional[int] = None) -> Iterator[ViewBatch]:
    """One epoch of two-view batches drawn from D_t plus the replay buffer.

    The epoch has ceil(|union| / batch_size) batches, so every current sample
    is drawn once in expectation. Buffer-origin views are not anchors.
    """
    pool_x, pool_y = dataset.train_pool
    if pool_y.shape[0] == 0:
        raise EmptyBatchError(f"task {dataset.task} has no training samples")
    union = pool_y.shape[0] + len(buffer.arrays(before_task)[1])
    n_batches = max(1, math.ceil(union / batch_size))
    for _ in range(n_batches):
        mini = sample_batch(buffer, (pool_x, pool_y), batch_size, rng, before_task)
        view_a, view_b = augment_two_views(mini.inputs, augment_cfg, rng)
        b = mini.size
        yield ViewBatch(
            inputs=np.vstack([view_a, view_b]),
            labels=np.concatenate([mini.labels, mini.labels]),
            view_pair=np.concatenate([np.arange(b, 2 * b), np.arange(b)]),
            is_anchor=np.concatenate([~mini.is_buffer, ~mini.is_buffer]),
            sources=mini.inputs,
            from_buffer=mini.is_buffer,
        )


def offer_observed(buffer: ReplayBuffer, batch: ViewBatch, task: int) -> int:
    """Offer the current-task sources of a batch to the reservoir, in draw order."""
    current = ~batch.from_buffer
    labels = batch.labels[: batch.sources.shape[0]]
    for x, y in zip(batch.sources[current], labels[current]):
        reservoir_insert(buffer, BufferEntry(x=x.copy(), label=int(y), task=task))
    return int(current.sum())
