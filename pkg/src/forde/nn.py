"""Multi-layer perceptrons on the autodiff tape.

Parameters of one network live in a flat float64 vector with a fixed layout:
for every layer, the weight matrix ``W`` of shape ``(fan_in, fan_out)`` in
row-major order followed by the bias ``b`` of shape ``(fan_out,)``.
A stack of ``M`` such vectors (shape ``(M, P)``) evaluates all ensemble
members in one batched pass.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph, Node

__all__ = [
    "MLPConfig",
    "Batch",
    "layout",
    "n_params",
    "init_params",
    "forward_logits",
    "log_likelihood",
    "true_label_input_grad",
    "softmax",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    output_dim: int = 2
    activation: str = "relu"
    task: str = "classification"
    obs_noise: float = 0.1  # regression likelihood std, fixed
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be a non-empty list of positive ints")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "regression" and self.output_dim != 1:
            raise ValueError("regression models have output_dim 1")
        if self.obs_noise <= 0:
            raise ValueError("obs_noise must be positive")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        return cls(**{**d, "hidden": tuple(d["hidden"])})


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise ValueError("inputs must have shape (B, D) with B >= 1")
        if len(self.labels) != len(self.inputs):
            raise ValueError("labels and inputs disagree on batch size")

    def __len__(self):
        return len(self.inputs)


def layout(cfg: MLPConfig) -> list[tuple[slice, tuple[int, int], slice]]:
    """Per layer: (weight slice, weight shape, bias slice) into the flat vector."""
    out, off = [], 0
    dims = cfg.dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = slice(off, off + fan_in * fan_out)
        off = w.stop
        b = slice(off, off + fan_out)
        off = b.stop
        out.append((w, (fan_in, fan_out), b))
    return out


def n_params(cfg: MLPConfig) -> int:
    return layout(cfg)[-1][2].stop


def init_params(cfg: MLPConfig, seed: int | np.random.SeedSequence | None = None) -> np.ndarray:
    """He-scaled Gaussian weights, zero biases."""
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(cfg))
    for w, (fan_in, fan_out), _ in layout(cfg):
        theta[w] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=fan_in * fan_out)
    return theta


def forward_logits(cfg: MLPConfig, params: Node, inputs: Node) -> Node:
    """Network outputs on the tape.

    ``params`` has shape ``(P,)`` or ``(M, P)``; ``inputs`` has shape
    ``(B, D)`` or ``(M, B, D)``. Returns ``(B, C)`` or ``(M, B, C)``.
    """
    g = params.graph
    P = n_params(cfg)
    if params.shape[-1] != P or params.ndim not in (1, 2):
        raise ValueError(f"params must have shape (P,) or (M, P) with P={P}, got {params.shape}")
    if inputs.shape[-1] != cfg.input_dim or inputs.ndim not in (2, 3):
        raise ValueError(f"inputs must end in dimension {cfg.input_dim}, got {inputs.shape}")
    lead = params.shape[:-1]
    act = g.relu if cfg.activation == "relu" else g.tanh
    h = inputs
    layers = layout(cfg)
    for k, (w, wshape, b) in enumerate(layers):
        W = g.reshape(params[..., w], lead + wshape)
        bias = g.reshape(params[..., b], lead + (1, wshape[1]) if lead else (wshape[1],))
        h = g.matmul(h, W) + bias
        if k < len(layers) - 1:
            h = act(h)
    return h


def _pick_true(g: Graph, cfg: MLPConfig, logits: Node, labels: np.ndarray) -> Node:
    if cfg.task == "regression":
        return logits[..., 0]
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise ValueError("classification labels must be integers")
        labels = labels.astype(np.intp)
    if labels.min() < 0 or labels.max() >= cfg.output_dim:
        raise ValueError(f"label out of range [0, {cfg.output_dim})")
    idx = labels.reshape((1,) * (logits.ndim - 2) + (-1, 1))
    return g.gather(logits, idx, axis=-1)[..., 0]


def log_likelihood(cfg: MLPConfig, params: Node, inputs: Node, labels: np.ndarray, per_sample: bool = False) -> Node:
    """Batch log-likelihood, summed over samples (one value per member if stacked)."""
    g = params.graph
    logits = forward_logits(cfg, params, inputs)
    if cfg.task == "classification":
        lp = _pick_true(g, cfg, logits, labels) - g.logsumexp(logits, axis=-1)
    else:
        y = np.asarray(labels, dtype=np.float64)
        z = (logits[..., 0] - y) / cfg.obs_noise
        lp = -0.5 * z * z - (math.log(cfg.obs_noise) + 0.5 * _LOG_2PI)
    return lp if per_sample else g.sum(lp, axis=-1)


def true_label_input_grad(cfg: MLPConfig, params: Node, inputs: Node, labels: np.ndarray) -> Node:
    """Gradient of the true-class logit with respect to each input row.

    For stacked params the inputs are broadcast per member, giving
    ``(M, B, D)``. For regression the scalar output is used. The result is
    itself a node, so it can be differentiated with respect to ``params``.
    """
    g = params.graph
    lead = params.shape[:-1]
    # per-member copy of shared inputs, so each member gets its own gradient
    x = g.broadcast_to(inputs, lead + inputs.shape[-2:]) if lead and inputs.ndim == 2 else inputs
    logits = forward_logits(cfg, params, x)
    picked = _pick_true(g, cfg, logits, labels)
    (gx,) = g.backward(g.sum(picked), [x])
    return gx


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
