"""Input-gradient kernel between ensemble members.

Each member's true-label input gradients are projected onto the unit
sphere, compared with an RBF base kernel whose metric lives in an
orthonormal basis ``U`` (identity or PCA eigenvectors), and averaged over
the mini-batch. A per-sample median-heuristic bandwidth rescales the
distances.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node

__all__ = [
    "LengthscaleSpec",
    "KernelMatrix",
    "normalize_grads",
    "pca_spec",
    "identity_spec",
    "pair_sq_dist",
    "pairwise_sq_dists",
    "median_bandwidths",
    "batch_kernel",
    "H_FLOOR",
]

H_FLOOR = 1e-12
SPEC_VERSION = 1


@dataclass
class LengthscaleSpec:
    """Orthonormal basis plus per-direction kernel weights.

    ``eigvals`` are data variances along the columns of ``basis``. The
    inverse squared lengthscale along direction ``d`` is the inverse of
    ``alpha / eigval_d + (1 - alpha)``, i.e. ``alpha=0`` is the identity
    metric and ``alpha=1`` weights each direction by its variance.
    """

    basis: np.ndarray
    eigvals: np.ndarray
    alpha: float = 1.0
    epsilon_pca: float = 1e-8
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.eigvals = np.asarray(self.eigvals, dtype=np.float64)
        D = len(self.eigvals)
        if self.basis.shape != (D, D):
            raise ValueError(f"basis must be ({D}, {D}), got {self.basis.shape}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if np.max(np.abs(self.basis.T @ self.basis - np.eye(D)), initial=0.0) >= 1e-8:
            raise ValueError("basis columns are not orthonormal")
        if np.any(self.eigvals < -1e-8 * max(1.0, float(np.max(np.abs(self.eigvals), initial=0.0)))):
            raise ValueError("eigenvalues must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.eigvals)

    def metric(self) -> np.ndarray:
        """Inverse squared lengthscales along each basis direction."""
        lam = np.clip(self.eigvals, 0.0, None)
        if self.alpha == 0.0:
            return np.ones_like(lam)
        # eigenvalues lost in round-off are exact zeros (null-space directions)
        top = float(lam.max(initial=0.0))
        lam = np.where(lam <= self.epsilon_pca * top, 0.0, lam)
        # 1 / (alpha / lam + (1 - alpha)), written to stay finite at lam = 0
        return lam / (self.alpha + (1.0 - self.alpha) * lam)

    def with_alpha(self, alpha: float) -> "LengthscaleSpec":
        return LengthscaleSpec(self.basis, self.eigvals, alpha, self.epsilon_pca, self.mean, self.std)

    def to_dict(self) -> dict:
        d = {
            "version": SPEC_VERSION,
            "dim": self.dim,
            "alpha": float(self.alpha),
            "epsilon_pca": float(self.epsilon_pca),
            "eigvals": [float(v) for v in self.eigvals],
            "basis": [float(v) for v in self.basis.reshape(-1)],
        }
        if self.mean is not None:
            d["mean"] = [float(v) for v in self.mean]
        if self.std is not None:
            d["std"] = [float(v) for v in self.std]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LengthscaleSpec":
        D = int(d["dim"])
        return cls(
            basis=np.asarray(d["basis"], dtype=np.float64).reshape(D, D),
            eigvals=np.asarray(d["eigvals"], dtype=np.float64),
            alpha=float(d["alpha"]),
            epsilon_pca=float(d.get("epsilon_pca", 1e-8)),
            mean=None if d.get("mean") is None else np.asarray(d["mean"]),
            std=None if d.get("std") is None else np.asarray(d["std"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "LengthscaleSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def identity_spec(D: int) -> LengthscaleSpec:
    return LengthscaleSpec(np.eye(D), np.ones(D), alpha=0.0)


def pca_spec(X: np.ndarray, alpha: float = 1.0, epsilon_pca: float = 1e-8) -> LengthscaleSpec:
    """Eigendecomposition of the sample covariance of ``X`` (centered internally).

    Eigenvalues are sorted in descending order. Each eigenvector's sign is
    fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2D design matrix")
    N = len(X)
    if N < 2:
        raise ValueError("PCA needs at least two samples")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (N - 1)
    try:
        lam, U = np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    pivot = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[pivot, np.arange(U.shape[1])])
    lam = np.clip(lam, 0.0, None)
    return LengthscaleSpec(U, lam, alpha=alpha, epsilon_pca=epsilon_pca)


def normalize_grads(raw: Node, eps: float = 1e-12) -> Node:
    """Scale each gradient (last axis) by ``1 / sqrt(|g|^2 + eps^2)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = raw.graph
    sq = g.sum(raw * raw, axis=-1, keepdims=True)
    return raw / g.sqrt(sq + eps * eps)


def _scaled_coords(s: Node, spec: LengthscaleSpec | None) -> Node:
    """Coordinates in the lengthscale basis scaled by the square-root metric."""
    if spec is None or spec.alpha == 0.0:
        # identity metric is basis invariant; skip the projection
        return s
    g = s.graph
    w = np.sqrt(spec.metric())
    return g.matmul(s, g.const(spec.basis * w))


def pair_sq_dist(s: Node, s2: Node, spec: LengthscaleSpec) -> Node:
    """``0.5 * (U^T s - U^T s2)^T diag(metric) (U^T s - U^T s2)``."""
    g = s.graph
    diff = s - s2
    w = spec.metric()
    z = g.matmul(g.reshape(diff, diff.shape[:-1] + (1, spec.dim)), g.const(spec.basis))
    z = g.reshape(z, diff.shape)
    return 0.5 * g.sum(z * z * w, axis=-1)


def pairwise_sq_dists(S: Node, spec: LengthscaleSpec | None, one_sided: bool = False) -> Node:
    """All-pairs distances ``d[i, j, b]`` for directions ``S`` of shape ``(M, B, D)``.

    With ``one_sided`` the second argument is held constant, so the
    gradient of ``d[i, j, b]`` reaches only member ``i``. ``spec=None``
    means the identity metric.
    """
    g = S.graph
    M, B, D = S.shape
    Z = _scaled_coords(S, spec)
    Zj = g.stop_gradient(Z) if one_sided else Z
    diff = g.reshape(Z, (M, 1, B, D)) - g.reshape(Zj, (1, M, B, D))
    return 0.5 * g.sum(diff * diff, axis=-1)


def median_bandwidths(dists: np.ndarray, M: int | None = None) -> np.ndarray:
    """Per-sample bandwidth ``median(d[:, :, b]) / (2 ln M)``.

    The median is the element at index ``n // 2`` of the ascending sort of
    all ``n = M*M`` entries (diagonal included). Floored at ``H_FLOOR``.
    """
    dists = np.asarray(dists, dtype=np.float64)
    if M is None:
        M = dists.shape[0]
    if M < 2:
        raise ValueError("median heuristic needs at least two particles")
    if dists.shape[:2] != (M, M):
        raise ValueError(f"expected dists of shape ({M}, {M}, ...), got {dists.shape}")
    flat = dists.reshape(M * M, -1)
    n = flat.shape[0]
    med = np.partition(flat, n // 2, axis=0)[n // 2]
    return np.maximum(med / (2.0 * math.log(M)), H_FLOOR)


@dataclass
class KernelMatrix:
    K: Node  # (M, M)
    bandwidths: Node  # (B,), constant w.r.t. differentiation
    dists: Node  # (M, M, B)


def batch_kernel(
    S: Node,
    spec: LengthscaleSpec,
    one_sided: bool = False,
    bandwidths: np.ndarray | None = None,
) -> KernelMatrix:
    """Mini-batch kernel ``K[i, j] = mean_b exp(-d[i, j, b] / h[b])``.

    Bandwidths come from the median heuristic unless given explicitly, and
    never carry gradient.
    """
    g = S.graph
    M = S.shape[0]
    if M < 2 and bandwidths is None:
        raise ValueError("batch_kernel needs M >= 2 for the median heuristic")
    d = pairwise_sq_dists(S, spec, one_sided=one_sided)
    if bandwidths is None:
        # bandwidth from the symmetric distances; same values as the one-sided ones
        h = g.custom(lambda dv: median_bandwidths(dv, M), [d], (S.shape[1],))
    else:
        h = g.const(np.broadcast_to(np.asarray(bandwidths, dtype=np.float64), (S.shape[1],)))
    K = g.mean(g.exp(g.neg(d) / h), axis=-1)
    return KernelMatrix(K, h, d)
