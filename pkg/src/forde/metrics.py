"""Bayesian model averaging and evaluation metrics.

All logs are natural; probabilities are clamped at ``PROB_FLOOR`` before
taking logs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .autodiff import Graph

__all__ = [
    "PredictiveBundle",
    "MetricsRecord",
    "PROB_FLOOR",
    "member_logits",
    "predict",
    "nll_acc",
    "ece",
    "entropy",
    "epistemic_aleatoric",
    "input_grads",
    "grad_cos_distance",
    "entropy_map",
    "regression_predictive",
    "regression_nll",
    "evaluate",
]

PROB_FLOOR = 1e-12
log = logging.getLogger(__name__)


@dataclass
class PredictiveBundle:
    member_probs: np.ndarray  # (M, B, C)
    bma_probs: np.ndarray  # (B, C)

    @classmethod
    def from_member_probs(cls, member_probs) -> "PredictiveBundle":
        member_probs = np.asarray(member_probs, dtype=np.float64)
        return cls(member_probs, member_probs.mean(axis=0))


@dataclass
class MetricsRecord:
    nll: float
    accuracy: float
    ece: float
    epistemic: float
    aleatoric: float
    mean_grad_cos_dist: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def member_logits(ensemble, inputs: np.ndarray) -> np.ndarray:
    """Outputs of every member, shape ``(M, B, C)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != ensemble.cfg.input_dim:
        raise ValueError(f"inputs must have shape (B, {ensemble.cfg.input_dim}), got {inputs.shape}")
    g = Graph()
    p = g.input(ensemble.params.shape, name="params")
    out = nn.forward_logits(ensemble.cfg, p, g.const(inputs))
    return g.forward([out], {p: ensemble.params})[0]


def predict(ensemble, inputs: np.ndarray) -> PredictiveBundle:
    """Per-member softmax and their arithmetic mean."""
    return PredictiveBundle.from_member_probs(nn.softmax(member_logits(ensemble, inputs)))


def nll_acc(bundle: PredictiveBundle, labels) -> tuple[float, float]:
    labels = np.asarray(labels).astype(np.intp)
    p = bundle.bma_probs[np.arange(len(labels)), labels]
    nll = -float(np.mean(np.log(np.maximum(p, PROB_FLOOR))))
    acc = float(np.mean(np.argmax(bundle.bma_probs, axis=1) == labels))
    return nll, acc


def ece(bundle: PredictiveBundle | np.ndarray, labels, bins: int = 15) -> float:
    """Top-label expected calibration error over ``bins`` equal-width bins.

    Bins are right-closed on (0, 1]; a confidence exactly on an inner edge
    goes to the higher bin.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = bundle.bma_probs if isinstance(bundle, PredictiveBundle) else np.asarray(bundle)
    labels = np.asarray(labels).astype(np.intp)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    idx = np.clip(np.floor(conf * bins).astype(np.intp), 0, bins - 1)
    N = len(labels)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        if n:
            total += n / N * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    return -np.sum(probs * np.log(np.maximum(probs, PROB_FLOOR)), axis=axis)


def epistemic_aleatoric(bundle: PredictiveBundle, reduce: bool = True, clamp: bool = True):
    """Split total entropy into mutual information and mean member entropy.

    Returns per-sample arrays when ``reduce`` is false.
    """
    total = entropy(bundle.bma_probs)
    aleatoric = entropy(bundle.member_probs).mean(axis=0)
    epistemic = total - aleatoric
    if clamp:
        epistemic = np.maximum(epistemic, 0.0)
    if reduce:
        return float(epistemic.mean()), float(aleatoric.mean())
    return epistemic, aleatoric


def input_grads(ensemble, inputs: np.ndarray, labels) -> np.ndarray:
    """True-label input gradients of every member, shape ``(M, B, D)``."""
    g = Graph()
    p = g.input(ensemble.params.shape, name="params")
    gx = nn.true_label_input_grad(ensemble.cfg, p, g.const(np.asarray(inputs, dtype=np.float64)), labels)
    return g.forward([gx], {p: ensemble.params})[0]


def grad_cos_distance(ensemble, inputs: np.ndarray, labels) -> float:
    """Mean over samples and member pairs ``i < j`` of ``1 - cos(grad_i, grad_j)``.

    A pair where either gradient is exactly zero counts as cosine 0.
    """
    M = ensemble.size
    if M < 2:
        raise ValueError("cosine distance needs at least two members")
    G = input_grads(ensemble, inputs, labels)
    norms = np.linalg.norm(G, axis=-1)  # (M, B)
    dots = np.einsum("ibd,jbd->ijb", G, G)
    denom = norms[:, None, :] * norms[None, :, :]
    zero = denom == 0.0
    if np.any(zero[np.triu_indices(M, k=1)]):
        log.info("zero input gradient in %d pair-samples; treating cosine as 0", int(zero[np.triu_indices(M, 1)].sum()))
    cos = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
    iu = np.triu_indices(M, k=1)
    return float(np.mean(1.0 - cos[iu]))


def entropy_map(ensemble, grid: np.ndarray) -> np.ndarray:
    """Entropy of the BMA predictive at each grid point."""
    return entropy(predict(ensemble, grid).bma_probs)


def regression_predictive(ensemble, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the equal-weight Gaussian mixture over members."""
    mu = member_logits(ensemble, inputs)[..., 0]  # (M, B)
    mean = mu.mean(axis=0)
    var = mu.var(axis=0) + ensemble.cfg.obs_noise ** 2
    return mean, var


def regression_nll(ensemble, inputs: np.ndarray, targets) -> float:
    mu = member_logits(ensemble, inputs)[..., 0]
    s = ensemble.cfg.obs_noise
    z = (np.asarray(targets, dtype=np.float64)[None, :] - mu) / s
    logp = -0.5 * z * z - math.log(s) - 0.5 * math.log(2 * math.pi)
    m = logp.max(axis=0)
    lse = m + np.log(np.mean(np.exp(logp - m), axis=0))
    return -float(lse.mean())


def evaluate(ensemble, inputs: np.ndarray, labels, bins: int = 15) -> MetricsRecord:
    bundle = predict(ensemble, inputs)
    nll, acc = nll_acc(bundle, labels)
    epi, ale = epistemic_aleatoric(bundle)
    gcd = grad_cos_distance(ensemble, inputs, labels) if ensemble.size > 1 else float("nan")
    return MetricsRecord(nll, acc, ece(bundle, labels, bins), epi, ale, gcd)
