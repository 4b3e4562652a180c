"""
Two-stage continual training: representation learning per task, then a
classifier on the frozen encoder, then evaluation of every task seen so far.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigError, DegenerateClassError, ProtocolError
from ..store.files import checkpoint_path, dump_buffer_csv, save_checkpoint, save_prototypes, write_relations
from ..store.models import LossRecord, MetricsReport, NCPoint, TaskTrace
from .buffer import ReplayBuffer
from .encoder import (
    MlpParams, ModelSnapshot, backward_and_step, encode, forward, init_params, reset_momentum, snapshot,
)
from .etf import ClassPrototypeMap, PrototypeSet, generate_etf
from .losses import (
    DistillationConfig, EmbeddingBatch, LossOutput, PlasticityConfig, alpha_schedule,
    combine_distillation, fnc2_loss, ird_loss, relation_distributions, sprd_loss, supcon_loss,
)
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, nc_diagnostics
from .stream import AugmentConfig, TaskDataset, TaskStream, offer_observed, task_batches

logger = logging.getLogger(__name__)

PLASTICITY_LOSSES = ("fnc2", "supcon-asym")
STABILITY_MODES = ("none", "ird", "sprd", "hsd")
CLASSIFIER_MODES = ("linear-probe", "nc4")
FEATURE_SOURCES = ("backbone", "projector")


@dataclass(frozen=True)
class ModelConfig:
    """Backbone widths after the input layer, projector width, embedding size."""
    hidden_sizes: tuple[int, ...] = (64, 32)
    projector_hidden: Optional[int] = None
    embedding_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden_sizes must be positive widths, got {list(self.hidden_sizes)}",
                              field="hidden_sizes")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}", field="embedding_dim")


@dataclass(frozen=True)
class TrainConfig:
    epochs_first_task: int = 100
    epochs_later: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    plasticity: PlasticityConfig = field(default_factory=PlasticityConfig)
    distill: DistillationConfig = field(default_factory=DistillationConfig)
    buffer_capacity: int = 0
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_batch_size: int = 64
    seed: int = 0
    classifier_mode: str = "linear-probe"
    probe_features: str = "backbone"
    plasticity_loss: str = "fnc2"
    stability: str = "hsd"
    pseudo_replay: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    nc_trace: bool = False

    def __post_init__(self):
        for name in ("epochs_first_task", "epochs_later", "batch_size", "probe_epochs", "probe_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.buffer_capacity < 0:
            raise ConfigError(f"buffer_capacity must be >= 0, got {self.buffer_capacity}", field="buffer_capacity")
        if not self.lr > 0 or not self.probe_lr > 0:
            raise ConfigError("learning rates must be > 0", field="lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}", field="momentum")
        for name, value, allowed in (
            ("classifier_mode", self.classifier_mode, CLASSIFIER_MODES),
            ("probe_features", self.probe_features, FEATURE_SOURCES),
            ("plasticity_loss", self.plasticity_loss, PLASTICITY_LOSSES),
            ("stability", self.stability, STABILITY_MODES),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}", field=name)
        if self.plasticity_loss == "supcon-asym" and self.stability in ("sprd", "hsd"):
            raise ConfigError(
                f"supcon-asym cannot be combined with {self.stability}: "
                "prototype relations need the prototype-anchored plasticity loss",
                field="stability",
            )
        if self.distill.epochs != self.epochs_later:
            raise ConfigError(
                f"distillation schedule length {self.distill.epochs} != epochs_later {self.epochs_later}",
                field="distill",
            )

    def epochs_for(self, task: int) -> int:
        return self.epochs_first_task if task == 1 else self.epochs_later

    @property
    def settings(self) -> dict[str, object]:
        """The ablation cell: plasticity, stability, pseudo-replay, buffer."""
        return {
            "plasticity": self.plasticity_loss,
            "stability": self.stability,
            "pseudo_replay": self.pseudo_replay,
            "buffer": self.buffer_capacity,
        }


@dataclass
class LinearProbe:
    """Multinomial logistic regression over standardized frozen features."""
    weight: np.ndarray          # (num_classes, feature_dim)
    bias: np.ndarray            # (num_classes,)
    classes: tuple[int, ...]    # class id of each output column
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def __post_init__(self):
        c, f = self.weight.shape
        if self.bias.shape != (c,) or len(self.classes) != c:
            raise ConfigError(f"probe has {c} weight rows, {self.bias.shape[0]} biases, {len(self.classes)} classes")
        if self.feature_mean.shape != (f,) or self.feature_scale.shape != (f,):
            raise ConfigError(f"probe feature statistics do not match feature dim {f}")

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.feature_mean) / self.feature_scale) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray, allowed: Optional[list[int]] = None) -> np.ndarray:
        """Class ids; `allowed` restricts the argmax to a subset of classes."""
        logits = self.logits(features)
        classes = np.asarray(self.classes)
        if allowed is not None:
            cols = np.flatnonzero(np.isin(classes, allowed))
            return classes[cols[np.argmax(logits[:, cols], axis=1)]]
        return classes[np.argmax(logits, axis=1)]


@dataclass
class TrainingContext:
    """Experiment-wide state shared by the per-task stages."""
    prototypes: PrototypeSet
    proto_map: ClassPrototypeMap
    rng: np.random.Generator
    calls: Counter = field(default_factory=Counter)  # loss name -> invocations
    relations_dir: Optional[Path] = None

    @classmethod
    def create(cls, prototypes: PrototypeSet, proto_map: ClassPrototypeMap, seed: int,
               relations_dir: Optional[Path] = None) -> "TrainingContext":
        return cls(prototypes=prototypes, proto_map=proto_map, rng=np.random.default_rng(seed),
                   relations_dir=relations_dir)


# ── Representation stage ──

def _plasticity(batch: EmbeddingBatch, t: int, ctx: TrainingContext, cfg: TrainConfig) -> LossOutput:
    if cfg.plasticity_loss == "supcon-asym":
        ctx.calls["supcon"] += 1
        return supcon_loss(batch, cfg.plasticity.tau, cfg.plasticity.skip_degenerate_anchors)
    vertices = ctx.proto_map.vertices_before(t) if cfg.pseudo_replay else []
    ctx.calls["fnc2"] += 1
    return fnc2_loss(batch, ctx.prototypes.rows(vertices), ctx.proto_map, ctx.prototypes, cfg.plasticity)


def _stability(batch: EmbeddingBatch, past_z: np.ndarray, seen: np.ndarray, epoch: int,
               ctx: TrainingContext, cfg: TrainConfig) -> tuple[LossOutput, float, float, float]:
    """Distillation term plus the (ird, sprd, alpha) values to record."""
    if cfg.stability == "ird":
        ctx.calls["ird"] += 1
        out = ird_loss(batch, past_z, cfg.distill)
        return out, out.value, 0.0, 0.0
    if cfg.stability == "sprd":
        ctx.calls["sprd"] += 1
        out = sprd_loss(batch, past_z, seen, cfg.distill)
        return out, 0.0, out.value, 1.0
    ctx.calls["ird"] += 1
    ctx.calls["sprd"] += 1
    alpha = alpha_schedule(epoch, cfg.distill)
    out = combine_distillation(ird_loss(batch, past_z, cfg.distill),
                               sprd_loss(batch, past_z, seen, cfg.distill), alpha)
    return out, out.diagnostics["ird"], out.diagnostics["sprd"], alpha


def _nc_point(params: MlpParams, dataset: TaskDataset, ctx: TrainingContext, epoch: int) -> NCPoint:
    z, _ = forward(params, dataset.x_train)
    report = nc_diagnostics(z, dataset.y_train, ctx.prototypes, ctx.proto_map)
    return NCPoint(task=dataset.task, epoch=epoch, nc1=report.nc1_score, nc2=report.nc2_score)


def _dump_relations(batch: EmbeddingBatch, past_z: Optional[np.ndarray], t: int,
                    ctx: TrainingContext, cfg: TrainConfig) -> None:
    old = ctx.prototypes.rows(ctx.proto_map.vertices_before(t) if cfg.pseudo_replay else [])
    seen = ctx.prototypes.rows(ctx.proto_map.vertices_up_to(t))
    relations = relation_distributions(batch, past_z, seen, old, ctx.proto_map, ctx.prototypes,
                                       cfg.plasticity, cfg.distill)
    write_relations(ctx.relations_dir, t, relations)


def train_task_representation(params: MlpParams, stream: TaskStream, t: int, buf: ReplayBuffer,
                              cfg: TrainConfig, ctx: TrainingContext,
                              teacher: Optional[ModelSnapshot] = None,
                              ) -> tuple[MlpParams, ModelSnapshot, TaskTrace]:
    """Train the encoder on task t and return it with a frozen snapshot and the task's trace.

    Task 1 minimizes the plasticity loss alone. Later tasks add the
    distillation term computed against `teacher`, the snapshot of task t-1,
    whose parameters are only read. Gradients are averaged over the 2N views
    of a batch before the update; recorded losses are the summed values.
    Momentum starts from zero, and every current-task source drawn into a
    batch is offered to the reservoir as it is observed.
    """
    if t >= 2 and cfg.stability != "none":
        if teacher is None:
            raise ProtocolError(f"task {t} needs the snapshot of task {t - 1}")
        if teacher.task != t - 1:
            raise ProtocolError(f"task {t} was given the snapshot of task {teacher.task}")
    distill = t >= 2 and cfg.stability != "none"

    dataset = stream.task(t)
    seen = ctx.prototypes.rows(ctx.proto_map.vertices_up_to(t))
    epochs = cfg.epochs_for(t)
    trace = TaskTrace(task=t)
    calls_before = Counter(ctx.calls)
    reset_momentum(params)
    if cfg.nc_trace:
        trace.nc_trace.append(_nc_point(params, dataset, ctx, epoch=0))
    logger.info("task_started | task=%d | classes=%s | epochs=%d | buffer=%d",
                t, list(dataset.classes), epochs, len(buf))

    for epoch in range(1, epochs + 1):
        sums = np.zeros(4)  # plasticity, ird, sprd, total
        alpha = 0.0
        n = 0
        for vb in task_batches(dataset, buf, cfg.batch_size, cfg.augment, ctx.rng, before_task=t):
            z, cache = forward(params, vb.inputs)
            batch = EmbeddingBatch(z=z, labels=vb.labels, view_pair=vb.view_pair, is_anchor=vb.is_anchor)
            plastic = _plasticity(batch, t, ctx, cfg)
            trace.r_above_one += plastic.diagnostics.get("r_above_one", 0)
            trace.skipped_anchors += plastic.diagnostics.get("skipped_anchors", 0)
            grad = plastic.grad_z
            ird = sprd = 0.0
            total = plastic.value
            past_z = None
            if distill:
                past_z, _ = forward(teacher.params, vb.inputs)
                stab, ird, sprd, alpha = _stability(batch, past_z, seen, epoch, ctx, cfg)
                grad = grad + stab.grad_z
                total += stab.value
            if ctx.relations_dir is not None and epoch == 1 and n == 0:
                _dump_relations(batch, past_z, t, ctx, cfg)
            backward_and_step(params, cache, grad / batch.size, cfg.lr, cfg.momentum)
            trace.offered += offer_observed(buf, vb, t)
            sums += (plastic.value, ird, sprd, total)
            n += 1

        means = sums / n
        record = LossRecord(task=t, epoch=epoch, fnc2=float(means[0]), ird=float(means[1]),
                            sprd=float(means[2]), alpha=float(alpha), total=float(means[3]), batches=n)
        trace.losses.append(record)
        if cfg.nc_trace:
            trace.nc_trace.append(_nc_point(params, dataset, ctx, epoch))
        logger.debug("epoch_done | task=%d | epoch=%d | plasticity=%.6f | ird=%.6f | sprd=%.6f | alpha=%.4f",
                     t, epoch, record.fnc2, record.ird, record.sprd, record.alpha)

    trace.calls = dict(ctx.calls - calls_before)
    last = trace.losses[-1]
    logger.info("task_trained | task=%d | plasticity=%.6f | total=%.6f | r_above_one=%d | offered=%d",
                t, last.fnc2, last.total, trace.r_above_one, trace.offered)
    return params, snapshot(params, t), trace


# ── Classifier stage ──

def train_linear_probe(params: MlpParams, dataset: TaskDataset, buf: ReplayBuffer, classes_seen: list[int],
                       cfg: TrainConfig, rng: np.random.Generator) -> LinearProbe:
    """Softmax regression on frozen features of D_t plus the stored samples of earlier tasks.

    Only `encode` touches the encoder, so its parameters are left as they are.
    """
    buf_x, buf_y = buf.arrays(before_task=dataset.task)
    x = dataset.x_train if not buf_y.size else np.vstack([dataset.x_train, buf_x])
    y = dataset.y_train if not buf_y.size else np.concatenate([dataset.y_train, buf_y])
    if y.size == 0:
        raise ProtocolError(f"no training samples for the task {dataset.task} probe")

    features = encode(params, x, cfg.probe_features)
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    feats = (features - mean) / scale

    classes = tuple(int(c) for c in classes_seen)
    column = {c: i for i, c in enumerate(classes)}
    targets = np.array([column[int(c)] for c in y])
    n, f = feats.shape
    w = np.zeros((len(classes), f))
    b = np.zeros(len(classes))
    for _ in range(cfg.probe_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.probe_batch_size):
            idx = order[start:start + cfg.probe_batch_size]
            logits = feats[idx] @ w.T + b
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(idx.size), targets[idx]] -= 1.0
            w -= cfg.probe_lr * probs.T @ feats[idx] / idx.size
            b -= cfg.probe_lr * probs.mean(axis=0)

    probe = LinearProbe(weight=w, bias=b, classes=classes, feature_mean=mean, feature_scale=scale)
    accuracy = float(np.mean(probe.predict(features) == y))
    logger.info("probe_trained | task=%d | samples=%d | classes=%d | train_acc=%.4f",
                dataset.task, n, len(classes), accuracy)
    return probe


def nc4_predict_embeddings(z: np.ndarray, prototypes: PrototypeSet, proto_map: ClassPrototypeMap,
                           classes: Optional[list[int]] = None) -> np.ndarray:
    """Nearest ETF vertex over `classes` (default: every mapped class); ties go to the lowest id."""
    candidates = sorted(proto_map.class_to_vertex if classes is None else classes)
    if not candidates:
        raise ProtocolError("nearest-prototype classification needs at least one seen class")
    protos = prototypes.vectors[proto_map.vertices_for(candidates)]
    scores = np.atleast_2d(z) @ protos.T
    return np.asarray(candidates)[np.argmax(scores, axis=1)]


def nc4_classify(params: MlpParams, x: np.ndarray, prototypes: PrototypeSet, proto_map: ClassPrototypeMap,
                 classes: Optional[list[int]] = None) -> int:
    """Class id of the prototype nearest to the embedding of a single input."""
    z, _ = forward(params, x)
    return int(nc4_predict_embeddings(z, prototypes, proto_map, classes)[0])


# ── Evaluation ──

def evaluate(params: MlpParams, stream: TaskStream, t: int, probe: Optional[LinearProbe], cfg: TrainConfig,
             ctx: TrainingContext, class_il: AccuracyMatrix, task_il: AccuracyMatrix) -> None:
    """Fill row t of both matrices with test accuracy on tasks 1..t."""
    seen = ctx.proto_map.classes_for_vertices(ctx.proto_map.vertices_up_to(t))
    for k in range(1, t + 1):
        data = stream.task(k)
        if data.y_test.size == 0:
            raise ProtocolError(f"task {k} has no test samples")
        own = list(data.classes)
        if cfg.classifier_mode == "nc4":
            z, _ = forward(params, data.x_test)
            pred_class = nc4_predict_embeddings(z, ctx.prototypes, ctx.proto_map, seen)
            pred_task = nc4_predict_embeddings(z, ctx.prototypes, ctx.proto_map, own)
        else:
            feats = encode(params, data.x_test, cfg.probe_features)
            pred_class = probe.predict(feats)
            pred_task = probe.predict(feats, allowed=own)
        class_il.set(t, k, float(np.mean(pred_class == data.y_test)))
        task_il.set(t, k, float(np.mean(pred_task == data.y_test)))
    logger.info("evaluated | after_task=%d | class_il=%s | task_il=%s",
                t, [round(v, 4) for v in class_il.row(t)], [round(v, 4) for v in task_il.row(t)])


# ── Experiment ──

def _final_nc(params: MlpParams, stream: TaskStream, ctx: TrainingContext) -> dict:
    x = np.vstack([d.x_test for d in stream.tasks])
    y = np.concatenate([d.y_test for d in stream.tasks])
    z, _ = forward(params, x)
    try:
        return nc_diagnostics(z, y, ctx.prototypes, ctx.proto_map).to_dict()
    except DegenerateClassError as e:
        logger.warning("nc_skipped | reason=%s", e)
        return {}


def _derive_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds for the random streams of one experiment."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def run_experiment(cfg: TrainConfig, stream: TaskStream, checkpoint_dir: Optional[Path] = None,
                   relations_dir: Optional[Path] = None) -> MetricsReport:
    """Run tasks 1..T in order and report accuracy matrices, NC scores and loss traces.

    Every random draw derives from `cfg.seed`, so equal seeds give equal reports.
    """
    init_seed, etf_seed, buffer_seed, batch_seed, probe_seed = _derive_seeds(cfg.seed, 5)

    proto_map = ClassPrototypeMap.from_task_classes(stream.class_sets)
    prototypes = generate_etf(proto_map.num_classes, cfg.model.embedding_dim, etf_seed)
    ctx = TrainingContext.create(prototypes, proto_map, batch_seed, relations_dir)
    if checkpoint_dir is not None:
        save_prototypes(checkpoint_dir / f"seed{cfg.seed}" / "prototypes.json", prototypes)
    probe_rng = np.random.default_rng(probe_seed)

    input_dim = stream.tasks[0].input_dim
    params = init_params([input_dim, *cfg.model.hidden_sizes], cfg.model.embedding_dim,
                         init_seed, cfg.model.projector_hidden)
    buf = ReplayBuffer(capacity=cfg.buffer_capacity, seed=buffer_seed)
    T = stream.total_tasks
    class_il, task_il = AccuracyMatrix(T), AccuracyMatrix(T)
    traces: list[TaskTrace] = []
    teacher: Optional[ModelSnapshot] = None
    logger.info("experiment_started | seed=%d | tasks=%d | classes=%d | params=%d | settings=%s",
                cfg.seed, T, proto_map.num_classes, params.num_parameters(), cfg.settings)

    for t in range(1, T + 1):
        params, teacher, trace = train_task_representation(params, stream, t, buf, cfg, ctx, teacher)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_path(checkpoint_dir, cfg.seed, t), params)

        probe = None
        if cfg.classifier_mode == "linear-probe":
            seen = proto_map.classes_for_vertices(proto_map.vertices_up_to(t))
            probe = train_linear_probe(params, stream.task(t), buf, seen, cfg, probe_rng)
        evaluate(params, stream, t, probe, cfg, ctx, class_il, task_il)

        trace.buffer_size = len(buf)
        if checkpoint_dir is not None and not buf.memory_free:
            dump_buffer_csv(checkpoint_dir / f"seed{cfg.seed}" / f"buffer_task{t}.csv", buf)
        traces.append(trace)

    report = MetricsReport(seed=cfg.seed, scenario=stream.scenario, class_il=class_il, task_il=task_il,
                           traces=traces, settings=cfg.settings)
    report.average_accuracy = average_accuracy(report.headline)
    report.average_forgetting = average_forgetting(report.headline) if T >= 2 else None
    report.nc = _final_nc(params, stream, ctx)
    logger.info("experiment_done | seed=%d | aa=%.4f | forgetting=%s",
                cfg.seed, report.average_accuracy, report.average_forgetting)
    return report

