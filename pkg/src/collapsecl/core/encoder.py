"""
MLP backbone + two-layer projection head onto the unit sphere.

Forward, backward and SGD-with-momentum are written out by hand over numpy
arrays. Row-vector convention: a layer maps a (B, in) batch to (B, out)
with `a @ W.T + b`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from ..errors import CacheError, ConfigError, ShapeError

ACTIVATIONS = ("relu", "identity")
NORM_GUARD = 1e-12
CHECKPOINT_FORMAT = "collapsecl-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    """One affine layer followed by an activation."""
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    velocity_w: Optional[np.ndarray] = field(default=None, repr=False)
    velocity_b: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.velocity_w is None:
            self.velocity_w = np.zeros_like(self.weight)
        if self.velocity_b is None:
            self.velocity_b = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    """Backbone layers followed by exactly two projector layers."""
    layers: list[Layer]
    backbone_layers: int
    output_dim: int
    version: int = 0

    projector_layers = 2

    def __post_init__(self):
        if len(self.layers) != self.backbone_layers + self.projector_layers:
            raise ConfigError(
                f"expected {self.backbone_layers} backbone + 2 projector layers, got {len(self.layers)}"
            )
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ConfigError(f"layer widths do not chain: {prev.fan_out} -> {nxt.fan_in}")
        if self.layers[-1].fan_out != self.output_dim:
            raise ConfigError(
                f"projector output {self.layers[-1].fan_out} != output_dim {self.output_dim}"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_dim(self) -> int:
        """Width of the backbone output (the probe's input)."""
        return self.layers[self.backbone_layers].fan_in

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers[: self.backbone_layers]]

    def num_parameters(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_sizes": self.layer_sizes,
            "backbone_layers": self.backbone_layers,
            "output_dim": self.output_dim,
            "layers": [
                {
                    "activation": layer.activation,
                    "shape": list(layer.weight.shape),
                    "weight": [float(v) for v in layer.weight.ravel()],
                    "bias": [float(v) for v in layer.bias],
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MlpParams":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        if int(data.get("version", 0)) != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {data.get('version')}")
        layers = []
        for raw in data["layers"]:
            out_dim, in_dim = raw["shape"]
            layers.append(Layer(
                weight=np.asarray(raw["weight"], dtype=np.float64).reshape(out_dim, in_dim),
                bias=np.asarray(raw["bias"], dtype=np.float64),
                activation=raw["activation"],
            ))
        return cls(layers=layers, backbone_layers=int(data["backbone_layers"]),
                   output_dim=int(data["output_dim"]))


@dataclass
class ForwardCache:
    """Everything backward needs from one forward pass."""
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]   # activations[0] is the input
    raw_outputs: np.ndarray         # projector output before normalization
    norms: np.ndarray
    embeddings: np.ndarray
    params_id: int
    params_version: int

    @property
    def degenerate(self) -> np.ndarray:
        return self.norms < NORM_GUARD


@dataclass
class Gradients:
    """Per-layer parameter gradients plus the gradient at the normalization input."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    raw_outputs: np.ndarray


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen copy of the encoder taken after task `task`."""
    params: MlpParams
    task: int


# ── Construction ──

def init_params(layer_sizes: Sequence[int], output_dim: int, seed: int,
                projector_hidden: Optional[int] = None) -> MlpParams:
    """Scaled-Gaussian weights (std 1/sqrt(fan_in)), zero biases.

    `layer_sizes` lists the backbone widths starting with the input width,
    e.g. [20, 32, 16] is 20 -> 32 -> 16. The projector maps the last width
    to `projector_hidden` (default: same width) and then to `output_dim`.
    """
    sizes = [int(s) for s in layer_sizes]
    if not sizes:
        raise ConfigError("layer_sizes must not be empty", field="layer_sizes")
    hidden = sizes[-1] if projector_hidden is None else int(projector_hidden)
    if any(s < 1 for s in sizes) or output_dim < 1 or hidden < 1:
        raise ConfigError(f"all layer sizes must be >= 1, got {sizes} -> {hidden} -> {output_dim}")

    rng = np.random.default_rng(seed)
    widths = sizes + [hidden, int(output_dim)]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        activation = "identity" if i == len(widths) - 2 else "relu"
        layers.append(Layer(
            weight=rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in),
            bias=np.zeros(fan_out),
            activation=activation,
        ))
    return MlpParams(layers=layers, backbone_layers=len(sizes) - 1, output_dim=int(output_dim))


# ── Forward ──

def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(pre, 0.0) if activation == "relu" else pre


def _check_inputs(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"input width {x.shape[-1]} does not match first layer ({params.input_dim})")
    return x


def l2_normalize(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit rows; rows with norm below the guard map to the first basis vector."""
    norms = np.linalg.norm(raw, axis=1)
    degenerate = norms < NORM_GUARD
    out = raw / np.where(degenerate, 1.0, norms)[:, None]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    return out, norms


def forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Map inputs (B, D) to unit embeddings (B, d)."""
    a = _check_inputs(params, inputs)
    pres, acts = [], [a]
    for layer in params.layers:
        pre = a @ layer.weight.T + layer.bias
        a = _activate(pre, layer.activation)
        pres.append(pre)
        acts.append(a)
    z, norms = l2_normalize(a)
    cache = ForwardCache(
        inputs=acts[0], pre_activations=pres, activations=acts, raw_outputs=a,
        norms=norms, embeddings=z, params_id=id(params), params_version=params.version,
    )
    return z, cache


def backbone_features(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    """Backbone output (pre-projector features)."""
    a = _check_inputs(params, inputs)
    for layer in params.layers[: params.backbone_layers]:
        a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
    return a


def encode(params: MlpParams, inputs: np.ndarray, features: str = "backbone") -> np.ndarray:
    """Frozen-encoder features for evaluation: 'backbone' or 'projector' output."""
    if features == "backbone":
        return backbone_features(params, inputs)
    if features == "projector":
        return forward(params, inputs)[0]
    raise ConfigError(f"unknown feature source {features!r}", field="probe_features")


# ── Backward ──

def normalization_backward(grad_z: np.ndarray, cache: ForwardCache) -> np.ndarray:
    """Chain rule through z = h / |h|: dh = (g - z (z . g)) / |h|."""
    z = cache.embeddings
    radial = np.einsum("ij,ij->i", z, grad_z)
    safe = np.where(cache.degenerate, 1.0, cache.norms)
    grad_h = (grad_z - z * radial[:, None]) / safe[:, None]
    grad_h[cache.degenerate] = 0.0
    return grad_h


def backward(params: MlpParams, cache: ForwardCache, grad_z: np.ndarray) -> Gradients:
    """Parameter gradients of a scalar loss given dL/dz."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise CacheError("forward cache does not belong to the current parameters")
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != cache.embeddings.shape:
        raise ShapeError(f"grad_z has shape {grad_z.shape}, embeddings {cache.embeddings.shape}")

    grad_h = normalization_backward(grad_z, cache)
    g = grad_h
    weights: list[np.ndarray] = [None] * len(params.layers)
    biases: list[np.ndarray] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[i] > 0)
        weights[i] = g.T @ cache.activations[i]
        biases[i] = g.sum(axis=0)
        g = g @ layer.weight
    return Gradients(weights=weights, biases=biases, raw_outputs=grad_h)


def sgd_step(params: MlpParams, grads: Gradients, lr: float, momentum: float) -> MlpParams:
    """In-place SGD with momentum: v <- mu v + g; w <- w - lr v."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}", field="lr")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}", field="momentum")
    for layer, dw, db in zip(params.layers, grads.weights, grads.biases):
        layer.velocity_w *= momentum
        layer.velocity_w += dw
        layer.velocity_b *= momentum
        layer.velocity_b += db
        layer.weight -= lr * layer.velocity_w
        layer.bias -= lr * layer.velocity_b
    params.version += 1
    return params


def backward_and_step(params: MlpParams, cache: ForwardCache, grad_z: np.ndarray,
                      lr: float, momentum: float) -> MlpParams:
    """Backpropagate dL/dz and apply one momentum-SGD update in place."""
    return sgd_step(params, backward(params, cache, grad_z), lr, momentum)


# ── Snapshots ──

def _frozen_copy(params: MlpParams) -> MlpParams:
    clone = copy.deepcopy(params)
    for layer in clone.layers:
        for arr in (layer.weight, layer.bias, layer.velocity_w, layer.velocity_b):
            arr.setflags(write=False)
    return clone


def snapshot(params: MlpParams, task: int) -> ModelSnapshot:
    """Independent read-only copy of the parameters, tagged with its task index."""
    return ModelSnapshot(params=_frozen_copy(params), task=int(task))


def reset_momentum(params: MlpParams) -> MlpParams:
    """Zero the velocity buffers of every layer."""
    for layer in params.layers:
        layer.velocity_w.fill(0.0)
        layer.velocity_b.fill(0.0)
    return params
