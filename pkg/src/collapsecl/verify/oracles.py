"""
Explicit-loop reference implementations and the finite-difference checker.

Plain Python loops over indices, one term at a time; the vectorized
kernels are checked against these.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from ..core.etf import ClassPrototypeMap, PrototypeSet
from ..core.losses import EmbeddingBatch
from ..core.metrics import AccuracyMatrix


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(sum(x * y for x, y in zip(a, b)))


def _focal(base: float, gamma: float) -> float:
    if gamma == 0:
        return 1.0
    if float(gamma).is_integer():
        return base ** int(gamma)
    return math.copysign(abs(base) ** gamma, base)


# ── Losses ──

def supcon_loop(batch: EmbeddingBatch, tau: float) -> float:
    z, y, m = batch.z, batch.labels, batch.size
    total = 0.0
    for i in range(m):
        if not batch.is_anchor[i]:
            continue
        positives = [j for j in range(m) if j != i and y[j] == y[i]]
        if not positives:
            continue
        den = sum(math.exp(_dot(z[i], z[k]) / tau) for k in range(m) if k != i)
        acc = 0.0
        for j in positives:
            acc += math.log(math.exp(_dot(z[i], z[j]) / tau) / den)
        total -= acc / len(positives)
    return total


def fnc2_loop(batch: EmbeddingBatch, old_prototypes: np.ndarray, proto_map: ClassPrototypeMap,
              prototypes: PrototypeSet, tau: float, gamma: float) -> float:
    z, y, m = batch.z, batch.labels, batch.size
    old = np.asarray(old_prototypes, dtype=np.float64).reshape(-1, z.shape[1])
    total = 0.0
    for i in range(m):
        if not batch.is_anchor[i]:
            continue
        den = sum(math.exp(_dot(z[i], z[k]) / tau) for k in range(m) if k != i)
        den += sum(math.exp(_dot(z[i], p) / tau) for p in old)
        positives = [j for j in range(m) if j != i and y[j] == y[i]]
        acc = 0.0
        for j in positives:
            c = math.exp(_dot(z[i], z[j]) / tau) / den
            acc += _focal(1.0 - c, gamma) * math.log(c)
        own = prototypes.vectors[proto_map.vertex(int(y[i]))]
        r = math.exp(_dot(z[i], own) / tau) / den
        acc += _focal(1.0 - r, gamma) * math.log(r)
        total -= acc / (len(positives) + 1)
    return total


def _softmax_row(logits: list[float]) -> list[float]:
    peak = max(logits)
    exps = [math.exp(v - peak) for v in logits]
    s = sum(exps)
    return [e / s for e in exps]


def ird_loop(z: np.ndarray, past_z: np.ndarray, kappa_current: float, kappa_past: float) -> float:
    m = z.shape[0]
    total = 0.0
    for i in range(m):
        others = [k for k in range(m) if k != i]
        cur = _softmax_row([_dot(z[i], z[k]) / kappa_current for k in others])
        past = _softmax_row([_dot(past_z[i], past_z[k]) / kappa_past for k in others])
        total -= sum(p * math.log(c) for p, c in zip(past, cur))
    return total


def sprd_loop(z: np.ndarray, past_z: np.ndarray, prototypes: np.ndarray,
              zeta_current: float, zeta_past: float) -> float:
    total = 0.0
    for i in range(z.shape[0]):
        cur = _softmax_row([_dot(z[i], p) / zeta_current for p in prototypes])
        past = _softmax_row([_dot(past_z[i], p) / zeta_past for p in prototypes])
        total -= sum(p * math.log(c) for p, c in zip(past, cur))
    return total


def hsd_loop(z: np.ndarray, past_z: np.ndarray, prototypes: np.ndarray, kappa_current: float,
             kappa_past: float, zeta_current: float, zeta_past: float, alpha: float) -> float:
    return ((1.0 - alpha) * ird_loop(z, past_z, kappa_current, kappa_past)
            + alpha * sprd_loop(z, past_z, prototypes, zeta_current, zeta_past))


# ── Metrics ──

def average_accuracy_loop(m: AccuracyMatrix) -> float:
    T = m.num_tasks
    total = 0.0
    for k in range(1, T + 1):
        total += m.get(T, k)
    return total / T


def average_forgetting_loop(m: AccuracyMatrix) -> float:
    T = m.num_tasks
    total = 0.0
    for i in range(1, T):
        best = -math.inf
        for t in range(i, T):
            best = max(best, m.get(t, i) - m.get(T, i))
        total += best
    return total / (T - 1)


def nc_loop(embeddings: np.ndarray, labels: np.ndarray, prototypes: PrototypeSet,
            proto_map: ClassPrototypeMap) -> tuple[float, float]:
    """(nc1, nc2) straight from the per-class definitions."""
    n, d = embeddings.shape
    classes = sorted(set(int(v) for v in labels))
    g = [sum(embeddings[s][j] for s in range(n)) / n for j in range(d)]
    traces, between, mus = [], [], []
    for c in classes:
        rows = [embeddings[s] for s in range(n) if labels[s] == c]
        mu = [sum(r[j] for r in rows) / len(rows) for j in range(d)]
        mus.append(mu)
        traces.append(sum(sum((r[j] - mu[j]) ** 2 for j in range(d)) for r in rows) / len(rows))
        between.append(sum((mu[j] - g[j]) ** 2 for j in range(d)))
    nc1 = (sum(traces) / len(traces)) / (sum(between) / len(between))

    k = len(classes)
    ps = [prototypes.vectors[proto_map.vertex(c)] for c in classes]
    mu_bar = [sum(mu[j] for mu in mus) / k for j in range(d)]
    p_bar = [sum(p[j] for p in ps) / k for j in range(d)]
    cosines = []
    for mu, p in zip(mus, ps):
        a = [mu[j] - mu_bar[j] for j in range(d)]
        b = [p[j] - p_bar[j] for j in range(d)]
        a_len, b_len = math.sqrt(_dot(a, a)), math.sqrt(_dot(b, b))
        cosines.append(_dot(a, b) / (a_len * b_len) if a_len > 1e-12 and b_len > 1e-12 else 0.0)
    return nc1, sum(cosines) / len(cosines)


def nearest_prototype_loop(z: np.ndarray, prototypes: PrototypeSet, proto_map: ClassPrototypeMap,
                           classes: Optional[Sequence[int]] = None) -> int:
    best_class, best_score = None, -math.inf
    for c in sorted(proto_map.class_to_vertex if classes is None else classes):
        score = _dot(z, prototypes.vectors[proto_map.vertex(c)])
        if score > best_score:
            best_class, best_score = c, score
    return best_class


# ── Finite differences ──

def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = fn(x)
        flat[i] = keep - step
        down = fn(x)
        flat[i] = keep
        out[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the larger of the two gradients' max magnitudes."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale
