"""
Invariant and oracle checks behind `collapsecl verify`.

Each check returns the largest error it observed; it passes when that error
is within the check's tolerance.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..core.buffer import BufferEntry, ReplayBuffer, reservoir_insert, simulate_retention
from ..core.encoder import backward, forward, init_params
from ..core.etf import ClassPrototypeMap, etf_geometry_error, generate_etf, verify_etf
from ..core.losses import (
    DistillationConfig, EmbeddingBatch, PlasticityConfig, fnc2_loss, hsd_loss, ird_loss,
    sprd_loss, supcon_loss,
)
from ..core.metrics import AccuracyMatrix, average_accuracy, average_forgetting, nc_diagnostics
from ..errors import UsageError
from . import oracles

logger = logging.getLogger(__name__)

SUITES = ("etf", "grad", "reservoir", "metrics")

GRAD_TOLERANCE = 1e-5
ORACLE_TOLERANCE = 1e-10
GRAD_BATCHES = 20


@dataclass
class CheckResult:
    suite: str
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance


@dataclass
class Check:
    """A named invariant: `run(seed)` returns (max observed error, detail)."""
    suite: str
    name: str
    description: str
    tolerance: float
    run: Callable[[int], tuple[float, str]]


# ── Shared fixtures ──

def random_unit(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    z = rng.standard_normal((rows, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(rng: np.random.Generator, n: int = 4, dim: int = 8, num_classes: int = 4,
                 asymmetric: bool = False) -> EmbeddingBatch:
    """N sources, two views each, labels drawn from `num_classes` classes."""
    labels = rng.integers(0, num_classes, size=n)
    anchors = None
    if asymmetric:
        anchors = rng.random(n) < 0.6
        anchors[0] = True
    return EmbeddingBatch.from_views(random_unit(rng, n, dim), random_unit(rng, n, dim), labels, anchors)


def two_task_map(num_classes: int = 4) -> ClassPrototypeMap:
    half = num_classes // 2
    return ClassPrototypeMap.from_task_classes([range(half), range(half, num_classes)])


# ── etf ──

def _etf_check(k: int) -> Callable[[int], tuple[float, str]]:
    def run(seed: int) -> tuple[float, str]:
        d = max(k - 1, 8)
        protos = generate_etf(k, d, seed)
        err = etf_geometry_error(protos) if verify_etf(protos, 1e-9) else math.inf
        return err, f"K={k} d={d}"
    return run


# ── grad ──

def _z_gradient_check(loss_fn: Callable[[EmbeddingBatch], object], asymmetric: bool = False,
                      ) -> Callable[[int], tuple[float, str]]:
    def run(seed: int) -> tuple[float, str]:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(GRAD_BATCHES):
            batch = random_batch(rng, asymmetric=asymmetric)
            analytic = loss_fn(batch).grad_z
            numeric = oracles.finite_difference(lambda z: loss_fn(batch.with_z(z)).value, batch.z)
            worst = max(worst, oracles.relative_error(analytic, numeric))
        return worst, f"{GRAD_BATCHES} batches, N=4 d=8 K=4"
    return run


def _value_check(loss_fn: Callable[[EmbeddingBatch], object], oracle_fn: Callable[[EmbeddingBatch], float],
                 asymmetric: bool = False) -> Callable[[int], tuple[float, str]]:
    def run(seed: int) -> tuple[float, str]:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(GRAD_BATCHES):
            batch = random_batch(rng, asymmetric=asymmetric)
            worst = max(worst, abs(loss_fn(batch).value - oracle_fn(batch)))
        return worst, f"{GRAD_BATCHES} batches"
    return run


def _loss_cases(seed: int) -> dict[str, tuple[Callable, Callable, bool]]:
    """name -> (loss on a batch, loop oracle on a batch, asymmetric anchors)."""
    rng = np.random.default_rng(seed + 7919)
    protos = generate_etf(4, 8, seed)
    proto_map = two_task_map()
    old = protos.rows(proto_map.vertices_before(2))
    seen = protos.rows(proto_map.vertices_up_to(2))
    distill = DistillationConfig(e0=0, epochs=100)
    past = {}

    def past_for(batch: EmbeddingBatch) -> np.ndarray:
        key = batch.labels.tobytes()
        if key not in past:
            past[key] = random_unit(rng, *batch.z.shape)
        return past[key]

    cases: dict[str, tuple[Callable, Callable, bool]] = {
        "supcon": (lambda b: supcon_loss(b, 0.5), lambda b: oracles.supcon_loop(b, 0.5), False),
        "supcon-asym": (lambda b: supcon_loss(b, 0.5), lambda b: oracles.supcon_loop(b, 0.5), True),
    }
    for gamma in (0.0, 1.0, 4.0):
        cfg = PlasticityConfig(tau=0.5, gamma=gamma)
        cases[f"fnc2-gamma{gamma:g}"] = (
            lambda b, cfg=cfg: fnc2_loss(b, old, proto_map, protos, cfg),
            lambda b, cfg=cfg: oracles.fnc2_loop(b, old, proto_map, protos, cfg.tau, cfg.gamma),
            True,
        )
    cases["ird"] = (
        lambda b: ird_loss(b, past_for(b), distill),
        lambda b: oracles.ird_loop(b.z, past_for(b), distill.kappa_current, distill.kappa_past),
        False,
    )
    cases["sprd"] = (
        lambda b: sprd_loss(b, past_for(b), seen, distill),
        lambda b: oracles.sprd_loop(b.z, past_for(b), seen, distill.zeta_current, distill.zeta_past),
        False,
    )
    for alpha in (0.0, 0.25, 0.7):
        epoch = int(round(alpha * distill.epochs))
        cases[f"hsd-alpha{alpha:g}"] = (
            lambda b, epoch=epoch: hsd_loss(b, past_for(b), seen, distill, epoch),
            lambda b, alpha=alpha: oracles.hsd_loop(b.z, past_for(b), seen, distill.kappa_current,
                                                    distill.kappa_past, distill.zeta_current,
                                                    distill.zeta_past, alpha),
            False,
        )
    return cases


def _encoder_check(seed: int) -> tuple[float, str]:
    """Backprop through the MLP and the normalization against finite differences on every weight."""
    rng = np.random.default_rng(seed)
    params = init_params([5, 6], output_dim=4, seed=seed)
    x = rng.standard_normal((6, 5))
    labels = np.array([0, 1, 0, 0, 1, 0])

    def value(p) -> float:
        z, _ = forward(p, x)
        return supcon_loss(EmbeddingBatch.from_views(z[:3], z[3:], labels[:3]), 0.5).value

    z, cache = forward(params, x)
    grad_z = supcon_loss(EmbeddingBatch.from_views(z[:3], z[3:], labels[:3]), 0.5).grad_z
    grads = backward(params, cache, grad_z)
    worst = 0.0
    for i, layer in enumerate(params.layers):
        perturbed = copy.deepcopy(params)

        def at(w: np.ndarray, i: int = i) -> float:
            perturbed.layers[i].weight = w
            return value(perturbed)

        numeric = oracles.finite_difference(at, layer.weight)
        worst = max(worst, oracles.relative_error(grads.weights[i], numeric))
    return worst, f"{len(params.layers)} layers"


# ── reservoir ──

def _reservoir_check(trials: int) -> Callable[[int], tuple[float, str]]:
    def run(seed: int) -> tuple[float, str]:
        capacity, length = 10, 1000
        freq = simulate_retention(capacity, length, trials, seed)
        err = float(np.max(np.abs(freq - capacity / length)))
        return err, f"capacity={capacity} stream={length} trials={trials}"
    return run


def _buffer_insert_check(seed: int) -> tuple[float, str]:
    capacity, length, trials = 5, 50, 4000
    kept = np.zeros(length)
    x = np.zeros(1)
    for trial in range(trials):
        buf = ReplayBuffer(capacity=capacity, seed=seed * trials + trial)
        for i in range(length):
            reservoir_insert(buf, BufferEntry(x=x, label=i, task=1))
        kept[[e.label for e in buf.entries]] += 1
    err = float(np.max(np.abs(kept / trials - capacity / length)))
    return err, f"ReplayBuffer capacity={capacity} stream={length} trials={trials}"


# ── metrics ──

def random_accuracy_matrix(rng: np.random.Generator, num_tasks: int) -> AccuracyMatrix:
    m = AccuracyMatrix(num_tasks)
    for t in range(1, num_tasks + 1):
        for k in range(1, t + 1):
            m.set(t, k, float(rng.random()))
    return m


def _matrix_oracle_check(seed: int) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        m = random_accuracy_matrix(rng, 4)
        worst = max(worst,
                    abs(average_accuracy(m) - oracles.average_accuracy_loop(m)),
                    abs(average_forgetting(m) - oracles.average_forgetting_loop(m)))
    return worst, "50 random 4x4 matrices"


def _hand_forgetting_check(seed: int) -> tuple[float, str]:
    m = AccuracyMatrix.from_rows([[0.9, None], [0.7, 0.8]])
    f = average_forgetting(m)
    return abs(f - 0.2), f"F={f!r}"


def _nc_oracle_check(seed: int) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    protos = generate_etf(4, 8, seed)
    proto_map = two_task_map()
    labels = np.repeat(np.arange(4), 50)
    z = protos.vectors[labels] + 0.3 * rng.standard_normal((200, 8))
    report = nc_diagnostics(z, labels, protos, proto_map)
    nc1, nc2 = oracles.nc_loop(z, labels, protos, proto_map)
    return max(abs(report.nc1_score - nc1), abs(report.nc2_score - nc2)), "4 classes x 50, d=8"


def builtin_checks(reservoir_trials: int = 100_000) -> list[Check]:
    checks = [
        Check("etf", f"etf-k{k}", f"simplex ETF geometry for K={k}", 1e-9, _etf_check(k))
        for k in (2, 3, 10, 50)
    ]
    for name in ("supcon", "supcon-asym", "fnc2-gamma0", "fnc2-gamma1", "fnc2-gamma4",
                 "ird", "sprd", "hsd-alpha0", "hsd-alpha0.25", "hsd-alpha0.7"):
        def grad_run(seed: int, name: str = name) -> tuple[float, str]:
            loss_fn, _, asym = _loss_cases(seed)[name]
            return _z_gradient_check(loss_fn, asym)(seed)

        def value_run(seed: int, name: str = name) -> tuple[float, str]:
            loss_fn, oracle_fn, asym = _loss_cases(seed)[name]
            return _value_check(loss_fn, oracle_fn, asym)(seed)

        checks.append(Check("grad", f"grad-{name}", f"analytic vs finite-difference gradient of {name}",
                            GRAD_TOLERANCE, grad_run))
        checks.append(Check("grad", f"oracle-{name}", f"{name} value vs explicit loops",
                            ORACLE_TOLERANCE, value_run))
    checks.append(Check("grad", "grad-encoder", "MLP + normalization backprop vs finite differences",
                        GRAD_TOLERANCE, _encoder_check))
    checks.append(Check("reservoir", "reservoir-retention", "per-item retention equals capacity / length",
                        0.002, _reservoir_check(reservoir_trials)))
    checks.append(Check("reservoir", "reservoir-insert", "ReplayBuffer retention equals capacity / length",
                        0.025, _buffer_insert_check))
    checks.extend([
        Check("metrics", "metrics-oracle", "AA and F vs explicit loops", 1e-12, _matrix_oracle_check),
        Check("metrics", "metrics-hand-forgetting", "two-task forgetting example", 1e-12,
              _hand_forgetting_check),
        Check("metrics", "metrics-nc-oracle", "NC1/NC2 vs explicit loops", 1e-10, _nc_oracle_check),
    ])
    return checks


class SuiteRunner:
    """Run the built-in checks of one suite, or all of them."""

    def __init__(self, seed: int = 0, reservoir_trials: int = 100_000):
        self.seed = seed
        self.checks = builtin_checks(reservoir_trials)

    def run(self, suite: str) -> list[CheckResult]:
        if suite != "all" and suite not in SUITES:
            raise UsageError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
        results = []
        for check in self.checks:
            if suite != "all" and check.suite != suite:
                continue
            err, detail = check.run(self.seed)
            result = CheckResult(suite=check.suite, name=check.name, max_error=err,
                                 tolerance=check.tolerance, detail=detail)
            logger.debug("check_done | name=%s | max_error=%.3e | passed=%s", check.name, err, result.passed)
            results.append(result)
        return results
