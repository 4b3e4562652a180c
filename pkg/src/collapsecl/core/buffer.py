"""
Reservoir-sampled replay memory.

Capacity 0 is the memory-free setting: items are counted and dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..errors import ConfigError, EmptyBatchError

logger = logging.getLogger(__name__)


@dataclass
class BufferEntry:
    """One stored raw input."""
    x: np.ndarray
    label: int
    task: int


@dataclass
class MiniBatch:
    """Source samples for one step, before augmentation."""
    inputs: np.ndarray
    labels: np.ndarray
    is_buffer: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class ReplayBuffer:
    """Fixed-capacity memory filled by reservoir sampling."""
    capacity: int = 0
    seed: int = 0
    entries: list[BufferEntry] = field(default_factory=list)
    seen_count: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError(f"buffer capacity must be >= 0, got {self.capacity}", field="buffer_capacity")
        self.rng = np.random.default_rng(self.seed)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def memory_free(self) -> bool:
        return self.capacity == 0

    def arrays(self, before_task: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Stored inputs and labels, optionally only those from tasks < before_task."""
        chosen = [e for e in self.entries if before_task is None or e.task < before_task]
        if not chosen:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64)
        return (np.vstack([e.x for e in chosen]),
                np.array([e.label for e in chosen], dtype=np.int64))


def reservoir_slot(seen: int, capacity: int, rng: np.random.Generator,
                   size: Optional[int] = None) -> Union[int, np.ndarray]:
    """Slot for the item offered after `seen` others; a value >= capacity means it is dropped.

    With `size`, draws that many independent decisions at once.
    """
    if seen < capacity:
        return seen if size is None else np.full(size, seen, dtype=np.int64)
    return rng.integers(0, seen + 1, size=size)


def reservoir_insert(buf: ReplayBuffer, item: BufferEntry) -> ReplayBuffer:
    """Offer one item: keep it with probability capacity / (seen + 1)."""
    if buf.capacity > 0:
        slot = int(reservoir_slot(buf.seen_count, buf.capacity, buf.rng))
        if slot < len(buf.entries):
            buf.entries[slot] = item
        elif slot < buf.capacity:
            buf.entries.append(item)
    buf.seen_count += 1
    return buf


def sample_batch(buf: ReplayBuffer, current_pool: tuple[np.ndarray, np.ndarray], batch_size: int,
                 rng: np.random.Generator, before_task: Optional[int] = None) -> MiniBatch:
    """Draw `batch_size` items uniformly from current_pool plus the buffer.

    Draws are without replacement when the union is large enough, with
    replacement otherwise. Buffer items come back flagged `is_buffer`.
    """
    if batch_size <= 0:
        raise ConfigError(f"batch_size must be > 0, got {batch_size}", field="batch_size")
    pool_x, pool_y = current_pool
    pool_x = np.asarray(pool_x, dtype=np.float64)
    pool_y = np.asarray(pool_y, dtype=np.int64)
    if pool_y.shape[0] == 0:
        raise EmptyBatchError("current pool is empty")

    buf_x, buf_y = buf.arrays(before_task)
    if buf_y.shape[0]:
        union_x = np.vstack([pool_x, buf_x])
        union_y = np.concatenate([pool_y, buf_y])
    else:
        union_x, union_y = pool_x, pool_y
    n_pool = pool_y.shape[0]
    union = union_y.shape[0]

    idx = rng.choice(union, size=batch_size, replace=batch_size > union)
    return MiniBatch(inputs=union_x[idx], labels=union_y[idx], is_buffer=idx >= n_pool)


def simulate_retention(capacity: int, stream_length: int, trials: int, seed: int) -> np.ndarray:
    """Monte-Carlo retention frequency of each stream position under reservoir sampling.

    Applies `reservoir_slot` to all trials at once; entry i is the fraction
    of trials in which item i is still stored after the whole stream.
    """
    rng = np.random.default_rng(seed)
    slots = np.full((trials, capacity), -1, dtype=np.int64)
    rows = np.arange(trials)
    for n in range(stream_length):
        j = reservoir_slot(n, capacity, rng, size=trials)
        hit = j < capacity
        slots[rows[hit], j[hit]] = n
    kept = np.bincount(slots[slots >= 0].ravel(), minlength=stream_length)
    logger.debug("reservoir_simulated | capacity=%d | stream=%d | trials=%d", capacity, stream_length, trials)
    return kept[:stream_length] / trials
