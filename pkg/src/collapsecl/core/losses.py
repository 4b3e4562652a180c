"""
Contrastive and distillation losses over unit embeddings.

Every loss returns its value together with the analytic gradient with
respect to the batch embeddings z. The chain rule through the L2
normalization lives in the encoder, so these kernels are pure functions of
their arrays.

Conventions for a batch of M = 2N views:
  s_ik = <z_i, z_k>           sample-sample similarity
  A(i) = {1..M} minus {i}     contrast set
  P(i) = {j in A(i): y_j = y_i}
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from ..errors import (
    DegenerateAnchorError, DomainError, EmptyBatchError, EmptyPrototypeError,
    ShapeError,
)
from .etf import ClassPrototypeMap, PrototypeSet, prototypes_for_labels

NORM_TOLERANCE = 1e-7


# ── Types ──

@dataclass(frozen=True)
class EmbeddingBatch:
    """2N unit embeddings with labels, view pairing and anchor flags."""
    z: np.ndarray
    labels: np.ndarray
    view_pair: np.ndarray
    is_anchor: np.ndarray
    strict: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        view_pair = np.asarray(self.view_pair, dtype=np.int64)
        is_anchor = np.asarray(self.is_anchor, dtype=bool)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "view_pair", view_pair)
        object.__setattr__(self, "is_anchor", is_anchor)

        if z.ndim != 2:
            raise ShapeError(f"z must be 2-D, got shape {z.shape}")
        m = z.shape[0]
        for name, arr in (("labels", labels), ("view_pair", view_pair), ("is_anchor", is_anchor)):
            if arr.shape != (m,):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({m},)")
        if m % 2:
            raise ShapeError(f"a two-view batch has an even number of rows, got {m}")
        idx = np.arange(m)
        if m and (np.any(view_pair < 0) or np.any(view_pair >= m)):
            raise ShapeError("view_pair indexes outside the batch")
        if np.any(view_pair == idx) or np.any(view_pair[view_pair] != idx):
            raise ShapeError("view_pair must be an involution without fixed points")
        if np.any(labels[view_pair] != labels):
            raise ShapeError("paired views must carry equal labels")
        if self.strict and m:
            norms = np.linalg.norm(z, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise ShapeError("every embedding must have unit norm")

    @classmethod
    def from_views(cls, z_a: np.ndarray, z_b: np.ndarray, labels: np.ndarray,
                   is_anchor: Optional[np.ndarray] = None, strict: bool = True) -> "EmbeddingBatch":
        """Stack two views as [a; b]; row i pairs with row i + N."""
        z_a = np.asarray(z_a, dtype=np.float64)
        n = z_a.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        anchors = np.ones(n, dtype=bool) if is_anchor is None else np.asarray(is_anchor, dtype=bool)
        pair = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
        return cls(
            z=np.vstack([z_a, np.asarray(z_b, dtype=np.float64)]),
            labels=np.concatenate([labels, labels]),
            view_pair=pair,
            is_anchor=np.concatenate([anchors, anchors]),
            strict=strict,
        )

    @property
    def size(self) -> int:
        return self.z.shape[0]

    def with_z(self, z: np.ndarray) -> "EmbeddingBatch":
        """Same structure, new embeddings; the unit-norm check is skipped."""
        return replace(self, z=np.asarray(z, dtype=np.float64), strict=False)


@dataclass(frozen=True)
class PlasticityConfig:
    """Temperature and focusing exponent of the plasticity loss."""
    tau: float = 0.5
    gamma: float = 1.0
    skip_degenerate_anchors: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau}")
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class DistillationConfig:
    """Temperatures of IRD / S-PRD and the HSD warm-up schedule."""
    kappa_past: float = 0.01
    kappa_current: float = 0.2
    zeta_past: float = 0.01
    zeta_current: float = 0.2
    e0: int = 30
    epochs: int = 100

    def __post_init__(self):
        for name in ("kappa_past", "kappa_current", "zeta_past", "zeta_current"):
            value = getattr(self, name)
            if not value > 0:
                raise DomainError(f"{name} must be > 0, got {value}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.e0 <= self.epochs:
            raise DomainError(f"warm-up e0={self.e0} must lie in [0, {self.epochs}]")


RELATION_KINDS = ("o", "q", "c", "r")


@dataclass(frozen=True)
class RelationDistribution:
    """A matrix of relation probabilities; o and q rows are stochastic."""
    probs: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise DomainError(f"unknown relation kind {self.kind!r}")
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.size and np.any(probs <= 0):
            raise DomainError(f"{self.kind}-relation entries must be positive")
        if self.kind in ("o", "q") and probs.size:
            if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
                raise DomainError(f"{self.kind}-relation rows must sum to 1")


@dataclass
class LossOutput:
    """Loss value and its gradient with respect to the batch embeddings."""
    value: float
    grad_z: np.ndarray
    diagnostics: dict[str, Any] = field(default_factory=dict)


# ── Kernels ──

def _offdiag_mask(m: int) -> np.ndarray:
    return ~np.eye(m, dtype=bool)


def _masked_logsumexp(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over masked entries with the max-subtraction trick."""
    masked = np.where(mask, logits, -np.inf)
    peak = np.max(masked, axis=1)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.sum(np.where(mask, np.exp(masked - peak[:, None]), 0.0), axis=1)
    with np.errstate(divide="ignore"):
        return peak + np.log(total)


def _log_softmax_offdiag(sim: np.ndarray, temperature: float) -> np.ndarray:
    """log softmax_{k != i}(sim_ik / T); the diagonal is left at 0."""
    m = sim.shape[0]
    mask = _offdiag_mask(m)
    logits = sim / temperature
    lse = _masked_logsumexp(logits, mask)
    return np.where(mask, logits - lse[:, None], 0.0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    peak = np.max(logits, axis=1, keepdims=True)
    shifted = logits - peak
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _pair_grad(coef: np.ndarray, z: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient of sum_ik coef_ik * <z_i, z_k> / T with respect to z."""
    return (coef + coef.T) @ z / temperature


def _focal_weight(base: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """(base^gamma, d/dbase) with an odd extension for negative bases and fractional gamma."""
    if gamma == 0:
        return np.ones_like(base), np.zeros_like(base)
    if float(gamma).is_integer():
        g = int(gamma)
        return base ** g, g * base ** (g - 1)
    mag = np.abs(base)
    return np.sign(base) * mag ** gamma, gamma * mag ** (gamma - 1.0)


def focal_log_term(log_x: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """f(u) = (1 - e^u)^gamma * u and df/du, where u = log x."""
    x = np.exp(log_x)
    weight, dweight = _focal_weight(1.0 - x, gamma)
    return weight * log_x, weight - dweight * x * log_x


def _positive_mask(labels: np.ndarray) -> np.ndarray:
    return (labels[:, None] == labels[None, :]) & _offdiag_mask(labels.shape[0])


def _check_past(current: EmbeddingBatch, past_z: np.ndarray) -> np.ndarray:
    past_z = np.asarray(past_z, dtype=np.float64)
    if past_z.shape != current.z.shape:
        raise ShapeError(f"past embeddings have shape {past_z.shape}, current {current.z.shape}")
    return past_z


# ── SupCon ──

def supcon_loss(batch: EmbeddingBatch, tau: float, skip_degenerate_anchors: bool = False) -> LossOutput:
    """Supervised contrastive loss summed over the anchors of the batch.

    With every view an anchor this is the plain SupCon loss; with buffer
    views flagged non-anchor it is the asymmetric variant, where those views
    only appear as positives and negatives of current anchors.
    """
    if not tau > 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    z = batch.z
    m = batch.size
    if m < 2:
        raise EmptyBatchError(f"a contrastive batch needs >= 2 views, got {m}")
    anchors = batch.is_anchor
    if not anchors.any():
        raise EmptyBatchError("batch has no anchors")

    positives = _positive_mask(batch.labels)
    counts = positives.sum(axis=1)
    degenerate = anchors & (counts == 0)
    if degenerate.any() and not skip_degenerate_anchors:
        raise DegenerateAnchorError(
            f"anchor {int(np.flatnonzero(degenerate)[0])} has no positive in the batch"
        )
    active = anchors & (counts > 0)

    log_prob = _log_softmax_offdiag(z @ z.T, tau)
    safe_counts = np.where(counts > 0, counts, 1)
    weights = np.where(positives & active[:, None], 1.0 / safe_counts[:, None], 0.0)
    value = -float(np.sum(weights * log_prob))

    prob = np.where(_offdiag_mask(m) & active[:, None], np.exp(log_prob), 0.0)
    grad = _pair_grad(prob - weights, z, tau)
    return LossOutput(value=value, grad_z=grad, diagnostics={"skipped_anchors": int(degenerate.sum())})


# ── FNC² ──

@dataclass
class Fnc2Terms:
    """Per-anchor pieces of the FNC² loss, exposed for inspection and tests."""
    log_c: np.ndarray          # (M, M); log c_ij for every j != i of an anchor row
    log_r: np.ndarray          # (M,); log r_i for anchors, 0 elsewhere
    log_denominator: np.ndarray
    positives: np.ndarray      # (M, M) bool, restricted to anchor rows
    weights: np.ndarray        # (M,) 1/(|P(i)|+1) for anchors, 0 elsewhere
    own_prototypes: np.ndarray  # (M, d); zero rows for non-anchors


def fnc2_terms(batch: EmbeddingBatch, old_prototypes: np.ndarray, proto_map: ClassPrototypeMap,
               prototypes: PrototypeSet, cfg: PlasticityConfig) -> Fnc2Terms:
    """Compute c_ij, r_i and the shared denominator for every anchor."""
    z = batch.z
    m, d = z.shape
    anchors = batch.is_anchor
    if m < 2 or not anchors.any():
        raise EmptyBatchError("FNC² needs at least one anchor in a batch of >= 2 views")
    old = np.asarray(old_prototypes, dtype=np.float64).reshape(-1, d)

    own = np.zeros_like(z)
    own[anchors] = prototypes_for_labels(proto_map, prototypes, batch.labels[anchors])

    offdiag = _offdiag_mask(m)
    sample_logits = (z @ z.T) / cfg.tau
    proto_logits = (z @ old.T) / cfg.tau
    all_logits = np.hstack([sample_logits, proto_logits])
    all_mask = np.hstack([offdiag, np.ones(proto_logits.shape, dtype=bool)])
    log_den = _masked_logsumexp(all_logits, all_mask)

    own_logits = np.einsum("ij,ij->i", z, own) / cfg.tau
    log_c = np.where(offdiag & anchors[:, None], sample_logits - log_den[:, None], 0.0)
    log_r = np.where(anchors, own_logits - log_den, 0.0)

    positives = _positive_mask(batch.labels) & anchors[:, None]
    counts = positives.sum(axis=1)
    degenerate = anchors & (counts == 0)
    if degenerate.any() and not cfg.skip_degenerate_anchors:
        raise DegenerateAnchorError(
            f"anchor {int(np.flatnonzero(degenerate)[0])} has no positive in the batch"
        )
    weights = np.where(anchors, 1.0 / (counts + 1.0), 0.0)
    return Fnc2Terms(log_c=log_c, log_r=log_r, log_denominator=log_den,
                     positives=positives, weights=weights, own_prototypes=own)


def fnc2_loss(batch: EmbeddingBatch, old_prototypes: np.ndarray, proto_map: ClassPrototypeMap,
              prototypes: PrototypeSet, cfg: PlasticityConfig) -> LossOutput:
    """Focal neural-collapse contrastive loss.

    Anchors are pulled toward their positives and their own ETF vertex, and
    pushed from every other view and from the prototypes of earlier tasks
    (`old_prototypes`, may be empty). Non-anchor views act as negatives and
    positives only.
    """
    z = batch.z
    m, d = z.shape
    old = np.asarray(old_prototypes, dtype=np.float64).reshape(-1, d)
    terms = fnc2_terms(batch, old, proto_map, prototypes, cfg)
    anchors = batch.is_anchor

    fc, dfc = focal_log_term(terms.log_c, cfg.gamma)
    fr, dfr = focal_log_term(terms.log_r, cfg.gamma)
    fc = np.where(terms.positives, fc, 0.0)
    fr = np.where(anchors, fr, 0.0)
    value = -float(np.sum(terms.weights * (fc.sum(axis=1) + fr)))

    g = np.where(terms.positives, -terms.weights[:, None] * dfc, 0.0)
    h = np.where(anchors, -terms.weights * dfr, 0.0)
    total = g.sum(axis=1) + h

    offdiag = _offdiag_mask(m)
    log_den = terms.log_denominator
    sample_share = np.where(offdiag & anchors[:, None],
                            np.exp((z @ z.T) / cfg.tau - log_den[:, None]), 0.0)
    proto_share = np.where(anchors[:, None], np.exp((z @ old.T) / cfg.tau - log_den[:, None]), 0.0)

    coef = g - total[:, None] * sample_share
    grad = _pair_grad(coef, z, cfg.tau)
    grad += (-total[:, None] * proto_share) @ old / cfg.tau
    grad += h[:, None] * terms.own_prototypes / cfg.tau

    counts = terms.positives.sum(axis=1)
    return LossOutput(
        value=value,
        grad_z=grad,
        diagnostics={
            "r_above_one": int(np.sum(anchors & (terms.log_r > 0))),
            "skipped_anchors": int(np.sum(anchors & (counts == 0))),
        },
    )


# ── Distillation ──

def ird_loss(current: EmbeddingBatch, past_z: np.ndarray, cfg: DistillationConfig) -> LossOutput:
    """Instance-wise relation distillation: cross-entropy of past vs current sample relations."""
    past_z = _check_past(current, past_z)
    z = current.z
    m = current.size
    if m < 2:
        raise EmptyBatchError(f"IRD needs >= 2 views, got {m}")
    mask = _offdiag_mask(m)
    log_cur = _log_softmax_offdiag(z @ z.T, cfg.kappa_current)
    past = np.where(mask, np.exp(_log_softmax_offdiag(past_z @ past_z.T, cfg.kappa_past)), 0.0)
    value = -float(np.sum(past * log_cur))
    cur = np.where(mask, np.exp(log_cur), 0.0)
    grad = _pair_grad(cur - past, z, cfg.kappa_current)
    return LossOutput(value=value, grad_z=grad)


def sprd_loss(current: EmbeddingBatch, past_z: np.ndarray, prototypes_1_to_t: np.ndarray,
              cfg: DistillationConfig) -> LossOutput:
    """Sample-prototype relation distillation against every prototype seen so far."""
    past_z = _check_past(current, past_z)
    z = current.z
    protos = np.asarray(prototypes_1_to_t, dtype=np.float64)
    if protos.size == 0:
        raise EmptyPrototypeError("S-PRD needs at least one prototype")
    if protos.ndim != 2 or protos.shape[1] != z.shape[1]:
        raise ShapeError(f"prototypes have shape {protos.shape}, embeddings {z.shape}")
    log_cur = _log_softmax(z @ protos.T / cfg.zeta_current)
    past = np.exp(_log_softmax(past_z @ protos.T / cfg.zeta_past))
    value = -float(np.sum(past * log_cur))
    grad = (np.exp(log_cur) - past) @ protos / cfg.zeta_current
    return LossOutput(value=value, grad_z=grad)


def alpha_schedule(epoch: int, cfg: DistillationConfig) -> float:
    """HSD mixing weight max(0, (e - e0) / E)."""
    return max(0.0, (epoch - cfg.e0) / cfg.epochs)


def combine_distillation(ird: LossOutput, sprd: LossOutput, alpha: float) -> LossOutput:
    """(1 - alpha) * IRD + alpha * S-PRD, value and gradient alike."""
    return LossOutput(
        value=(1.0 - alpha) * ird.value + alpha * sprd.value,
        grad_z=(1.0 - alpha) * ird.grad_z + alpha * sprd.grad_z,
        diagnostics={"alpha": alpha, "ird": ird.value, "sprd": sprd.value},
    )


def hsd_loss(current: EmbeddingBatch, past_z: np.ndarray, prototypes_1_to_t: np.ndarray,
             cfg: DistillationConfig, epoch: int) -> LossOutput:
    """Hardness-softness distillation: IRD blended into S-PRD after the warm-up."""
    alpha = alpha_schedule(epoch, cfg)
    return combine_distillation(
        ird_loss(current, past_z, cfg),
        sprd_loss(current, past_z, prototypes_1_to_t, cfg),
        alpha,
    )


# ── Inspection ──

def _compact_offdiag(mat: np.ndarray) -> np.ndarray:
    m = mat.shape[0]
    return mat[_offdiag_mask(m)].reshape(m, m - 1)


def relation_distributions(current: EmbeddingBatch, past_z: Optional[np.ndarray],
                           prototypes_1_to_t: np.ndarray, old_prototypes: np.ndarray,
                           proto_map: ClassPrototypeMap, prototypes: PrototypeSet,
                           plasticity: PlasticityConfig,
                           distill: DistillationConfig) -> dict[str, RelationDistribution]:
    """The o, q, c and r relation matrices of a batch.

    o rows drop the diagonal (M x (M-1)); c rows are the anchors' full
    off-diagonal ratios; r is a column over anchors.
    """
    z = current.z
    out: dict[str, RelationDistribution] = {}
    out["o_current"] = RelationDistribution(
        _compact_offdiag(np.exp(_log_softmax_offdiag(z @ z.T, distill.kappa_current))), "o")
    protos = np.asarray(prototypes_1_to_t, dtype=np.float64)
    if protos.size:
        out["q_current"] = RelationDistribution(np.exp(_log_softmax(z @ protos.T / distill.zeta_current)), "q")
    if past_z is not None:
        past_z = _check_past(current, past_z)
        out["o_past"] = RelationDistribution(
            _compact_offdiag(np.exp(_log_softmax_offdiag(past_z @ past_z.T, distill.kappa_past))), "o")
        if protos.size:
            out["q_past"] = RelationDistribution(np.exp(_log_softmax(past_z @ protos.T / distill.zeta_past)), "q")
    terms = fnc2_terms(current, old_prototypes, proto_map, prototypes, plasticity)
    anchors = current.is_anchor
    out["c"] = RelationDistribution(_compact_offdiag(np.exp(terms.log_c))[anchors], "c")
    out["r"] = RelationDistribution(np.exp(terms.log_r[anchors])[:, None], "r")
    return out
