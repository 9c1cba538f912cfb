"""Particle trainers: FoRDE and the DE / weight-RDE / function-RDE / LIT baselines.

All methods share one update. With ``g_data`` the gradient of the batch
log-likelihood and ``g_rep`` the method's repulsion (both ascent
directions, one row per member)::

    v = (g_data - g_rep) / B
    u = v + prior_grad             # prior_grad = -weight_decay * theta by default
    buf = momentum * buf + u
    theta += lr * (u + momentum * buf)   # Nesterov
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from . import nn
from .autodiff import Graph
from .gradkernel import (
    LengthscaleSpec,
    batch_kernel,
    identity_spec,
    median_bandwidths,
    normalize_grads,
    pairwise_sq_dists,
    pca_spec,
)

__all__ = [
    "METHODS",
    "TrainConfig",
    "ParticleEnsemble",
    "EmpCovPrior",
    "StepStats",
    "init_ensemble",
    "learning_rate",
    "driving_grad",
    "repulsion_grads",
    "kde_log_density",
    "empcov_logprior_grad",
    "prior_grad",
    "forde_step",
    "baseline_step",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_log_csv",
    "LOG_FIELDS",
]

METHODS = ("forde", "de", "weight_rde", "function_rde", "lit")
LOG_FIELDS = ("epoch", "train_nll", "train_acc", "mean_offdiag_kernel", "epoch_seconds")
CHECKPOINT_VERSION = 1

# named random substreams derived from the single run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_DATA = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    method: str = "forde"
    n_particles: int = 10
    epochs: int = 10
    batch_size: int = 128
    lr_init: float = 0.1
    lr_final: float = 1e-3
    lr_decay_start: float = 0.5  # fraction of total steps
    lr_decay_end: float = 0.9
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    eps: float = 1e-12
    lengthscale: str = "identity"  # identity | pca | tuned
    alpha: float = 1.0  # only read for lengthscale="tuned"
    lit_weight: float = 1.0
    prior: str = "isotropic"  # isotropic | empcov
    empcov_scale: float = 1.0
    empcov_jitter: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_init < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.lr_decay_start <= self.lr_decay_end <= 1.0:
            raise ValueError("need 0 <= lr_decay_start <= lr_decay_end <= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.lengthscale not in ("identity", "pca", "tuned"):
            raise ValueError(f"unknown lengthscale source {self.lengthscale!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.prior not in ("isotropic", "empcov"):
            raise ValueError(f"unknown prior {self.prior!r}")

    @property
    def effective_alpha(self) -> float:
        return {"identity": 0.0, "pca": 1.0}.get(self.lengthscale, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParticleEnsemble:
    """``M`` flat parameter vectors sharing one architecture."""

    cfg: nn.MLPConfig
    params: np.ndarray  # (M, P)
    momentum: np.ndarray | None = None
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        if self.params.shape[1] != nn.n_params(self.cfg):
            raise ValueError("parameter vectors do not match the model layout")
        if self.momentum is None:
            self.momentum = np.zeros_like(self.params)

    @property
    def size(self) -> int:
        return self.params.shape[0]

    @property
    def members(self) -> list[np.ndarray]:
        return list(self.params)


def _seed_seq(seed: int, stream: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream, *extra])


def init_ensemble(cfg: nn.MLPConfig, n_particles: int, seed: int) -> ParticleEnsemble:
    """Independent He initialization per member (member ``i`` uses substream ``i``)."""
    params = np.stack([nn.init_params(cfg, _seed_seq(seed, STREAM_INIT, i)) for i in range(n_particles)])
    return ParticleEnsemble(cfg, params)


def learning_rate(tcfg: TrainConfig, step: int, total_steps: int) -> float:
    """Constant, then linear decay between the two fractions of training."""
    if total_steps <= 0:
        return tcfg.lr_init
    frac = step / total_steps
    a, b = tcfg.lr_decay_start, tcfg.lr_decay_end
    if frac <= a:
        return tcfg.lr_init
    if frac >= b:
        return tcfg.lr_final
    w = (frac - a) / (b - a)
    return (1.0 - w) * tcfg.lr_init + w * tcfg.lr_final


# ----------------------------------------------------------------- gradients
def driving_grad(cfg: nn.MLPConfig, params: np.ndarray, batch: nn.Batch) -> np.ndarray:
    """Gradient of the summed batch log-likelihood (ascent direction).

    ``params`` may be one vector ``(P,)`` or a stack ``(M, P)``.
    """
    g = Graph()
    p = g.input(np.shape(params), name="params")
    ll = g.sum(nn.log_likelihood(cfg, p, g.const(batch.inputs), batch.labels))
    (gp,) = g.backward(ll, [p])
    return g.forward([gp], {p: params})[0]


def _log_kde_sum(K):
    g = K.graph
    return g.sum(g.log(g.sum(K, axis=1)))


def _forde_repulsion(g: Graph, cfg, p, batch, spec, eps, bandwidths=None):
    raw = nn.true_label_input_grad(cfg, p, g.const(batch.inputs), batch.labels)
    S = normalize_grads(raw, eps)
    km = batch_kernel(S, spec, one_sided=True, bandwidths=bandwidths)
    return km, _log_kde_sum(km.K)


def repulsion_grads(
    ensemble: ParticleEnsemble,
    batch: nn.Batch,
    spec: LengthscaleSpec,
    eps: float = 1e-12,
    bandwidths: np.ndarray | None = None,
) -> np.ndarray:
    """Input-gradient repulsion for every member, shape ``(M, P)``.

    Row ``i`` is ``sum_j grad_i k(i, j) / sum_j k(i, j)``; member ``j``'s
    side of each kernel entry is held fixed. Zero when ``M == 1``.
    """
    if ensemble.size == 1:
        return np.zeros_like(ensemble.params)
    g = Graph()
    p = g.input(ensemble.params.shape, name="params")
    _, L = _forde_repulsion(g, ensemble.cfg, p, batch, spec, eps, bandwidths)
    (gr,) = g.backward(L, [p])
    return g.forward([gr], {p: ensemble.params})[0]


def kde_log_density(
    ensemble: ParticleEnsemble,
    batch: nn.Batch,
    spec: LengthscaleSpec,
    i: int,
    eps: float = 1e-12,
    bandwidths: np.ndarray | None = None,
) -> float:
    """``log sum_j k(theta_i, theta_j)`` under the input-gradient kernel."""
    g = Graph()
    p = g.input(ensemble.params.shape, name="params")
    raw = nn.true_label_input_grad(ensemble.cfg, p, g.const(batch.inputs), batch.labels)
    km = batch_kernel(normalize_grads(raw, eps), spec, bandwidths=bandwidths)
    (K,) = g.forward([km.K], {p: ensemble.params})
    return float(np.log(K[i].sum()))


def _offdiag_mean(K: np.ndarray) -> float:
    M = len(K)
    if M < 2:
        return float("nan")
    return float((K.sum() - np.trace(K)) / (M * (M - 1)))


def _weight_rde(params: np.ndarray):
    M = len(params)
    diff = params[:, None, :] - params[None, :, :]
    d = 0.5 * np.einsum("ijp,ijp->ij", diff, diff)
    h = median_bandwidths(d[..., None], M)[0]
    K = np.exp(-d / h)
    # grad_i k(i, j) = -k(i, j) (theta_i - theta_j) / h
    num = -np.einsum("ij,ijp->ip", K, diff) / h
    return num / K.sum(axis=1, keepdims=True), K


def _lit_penalty(g: Graph, S):
    M, B, D = S.shape
    Sb = g.transpose(S, (1, 0, 2))  # (B, M, D)
    cos = g.matmul(Sb, g.swap_last(Sb))  # (B, M, M)
    upper = np.triu(np.ones((M, M)), k=1)
    return g.sum(g.mean(cos * cos, axis=0) * upper)


@dataclass
class StepStats:
    kernel: np.ndarray | None = None  # (M, M) kernel used for repulsion, if any

    @property
    def mean_offdiag_kernel(self) -> float:
        return float("nan") if self.kernel is None else _offdiag_mean(self.kernel)


def _method_grads(ensemble, batch, tcfg: TrainConfig, spec, repulsion=True):
    """(g_data, g_rep, stats) for the configured method, ascent convention."""
    cfg, params = ensemble.cfg, ensemble.params
    M = ensemble.size
    method = tcfg.method if repulsion else "de"
    g = Graph()
    p = g.input(params.shape, name="params")
    X = g.const(batch.inputs)
    ll = g.sum(nn.log_likelihood(cfg, p, X, batch.labels))
    (gd,) = g.backward(ll, [p])
    outputs = [gd]
    K = None
    if method == "de" or M == 1:
        g_data = g.forward(outputs, {p: params})[0]
        return g_data, np.zeros_like(params), StepStats()
    if method == "weight_rde":
        g_data = g.forward(outputs, {p: params})[0]
        g_rep, K = _weight_rde(params)
        return g_data, g_rep, StepStats(K)
    if method == "forde":
        km, L = _forde_repulsion(g, cfg, p, batch, spec, tcfg.eps)
        (gr,) = g.backward(L, [p])
        outputs += [gr, km.K]
    elif method == "function_rde":
        F = nn.forward_logits(cfg, p, X)
        F = g.reshape(F, (M, 1, int(np.prod(F.shape[1:]))))
        d = pairwise_sq_dists(F, None, one_sided=True)
        h = g.custom(lambda dv: median_bandwidths(dv, M), [d], (1,))
        Kn = g.mean(g.exp(g.neg(d) / h), axis=-1)
        (gr,) = g.backward(_log_kde_sum(Kn), [p])
        outputs += [gr, Kn]
    elif method == "lit":
        S = normalize_grads(nn.true_label_input_grad(cfg, p, X, batch.labels), tcfg.eps)
        (gpen,) = g.backward(_lit_penalty(g, S), [p])
        # descent on the penalty, expressed as a repulsion term scaled back by B
        outputs += [gpen * (tcfg.lit_weight * len(batch))]
    vals = g.forward(outputs, {p: params})
    if len(vals) == 3:
        K = vals[2]
    return vals[0], vals[1], StepStats(K)


# --------------------------------------------------------------------- prior
@dataclass
class EmpCovPrior:
    """Gaussian prior ``N(0, scale * cov + jitter * I)`` on first-layer weight columns."""

    scale: float
    jitter: float
    cov: np.ndarray
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.scale <= 0 or self.jitter < 0:
            raise ValueError("need scale > 0 and jitter >= 0")
        A = self.scale * self.cov + self.jitter * np.eye(len(self.cov))
        try:
            self._chol = linalg.cho_factor(A, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("scale * cov + jitter * I is not positive definite") from exc

    @classmethod
    def from_data(cls, X: np.ndarray, scale: float = 1.0, jitter: float = 1e-3) -> "EmpCovPrior":
        X = np.asarray(X, dtype=np.float64)
        Xc = X - X.mean(axis=0)
        return cls(scale, jitter, Xc.T @ Xc / (len(X) - 1))

    def solve(self, W: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self._chol, W)


def empcov_logprior_grad(prior: EmpCovPrior, cfg: nn.MLPConfig, params: np.ndarray) -> np.ndarray:
    """``-(aC + eI)^{-1} w`` for every first-layer weight column, zero elsewhere."""
    params = np.asarray(params, dtype=np.float64)
    wsl, (D, H), _ = nn.layout(cfg)[0]
    if len(prior.cov) != D:
        raise ValueError("prior covariance does not match the input dimension")
    out = np.zeros_like(params)
    flat = params.reshape(-1, params.shape[-1])
    res = out.reshape(-1, params.shape[-1])
    for k in range(len(flat)):
        W = flat[k, wsl].reshape(D, H)
        res[k, wsl] = -prior.solve(W).reshape(-1)
    return out


def prior_grad(ensemble: ParticleEnsemble, tcfg: TrainConfig, prior: EmpCovPrior | None = None) -> np.ndarray:
    """Log-prior ascent direction: weight decay, with EmpCov on the first layer if set."""
    out = -tcfg.weight_decay * ensemble.params
    if prior is not None:
        wsl = nn.layout(ensemble.cfg)[0][0]
        out[:, wsl] = tcfg.weight_decay * empcov_logprior_grad(prior, ensemble.cfg, ensemble.params)[:, wsl]
    return out


# -------------------------------------------------------------------- update
def _apply_update(ensemble, g_data, g_rep, B, tcfg, lr, prior):
    v = (g_data - g_rep) / B
    u = v + prior_grad(ensemble, tcfg, prior)
    buf = tcfg.momentum * ensemble.momentum + u
    delta = u + tcfg.momentum * buf if tcfg.nesterov else buf
    return replace(ensemble, params=ensemble.params + lr * delta, momentum=buf, step=ensemble.step + 1)


def forde_step(
    ensemble: ParticleEnsemble,
    batch: nn.Batch,
    spec: LengthscaleSpec,
    tcfg: TrainConfig,
    lr: float,
    prior: EmpCovPrior | None = None,
    repulsion: bool = True,
) -> tuple[ParticleEnsemble, StepStats]:
    """One FoRDE update on a mini-batch. With one member (or ``repulsion=False``) this is a DE step."""
    if tcfg.method != "forde":
        tcfg = replace(tcfg, method="forde")
    g_data, g_rep, stats = _method_grads(ensemble, batch, tcfg, spec, repulsion)
    return _apply_update(ensemble, g_data, g_rep, len(batch), tcfg, lr, prior), stats


def baseline_step(
    ensemble: ParticleEnsemble,
    batch: nn.Batch,
    tcfg: TrainConfig,
    lr: float,
    prior: EmpCovPrior | None = None,
) -> tuple[ParticleEnsemble, StepStats]:
    if tcfg.method == "forde":
        raise ValueError("use forde_step for method 'forde'")
    g_data, g_rep, stats = _method_grads(ensemble, batch, tcfg, None)
    return _apply_update(ensemble, g_data, g_rep, len(batch), tcfg, lr, prior), stats


def train_step(ensemble, batch, tcfg, lr, spec=None, prior=None):
    if tcfg.method == "forde":
        return forde_step(ensemble, batch, spec, tcfg, lr, prior)
    return baseline_step(ensemble, batch, tcfg, lr, prior)


# --------------------------------------------------------------------- train
def resolve_spec(tcfg: TrainConfig, X: np.ndarray, spec: LengthscaleSpec | None) -> LengthscaleSpec:
    """Lengthscale spec for ``tcfg``: identity, or PCA of ``X`` at the configured alpha."""
    alpha = tcfg.effective_alpha
    if spec is not None:
        return spec if tcfg.lengthscale == "tuned" and spec.alpha == alpha else spec.with_alpha(alpha)
    if alpha == 0.0:
        return identity_spec(X.shape[1])
    return pca_spec(X, alpha=alpha)


def _train_metrics(ensemble: ParticleEnsemble, X, y) -> tuple[float, float]:
    from .metrics import predict, nll_acc, regression_nll

    if ensemble.cfg.task == "regression":
        return regression_nll(ensemble, X, y), float("nan")
    return nll_acc(predict(ensemble, X), y)


def train(
    X: np.ndarray,
    y: np.ndarray,
    cfg: nn.MLPConfig,
    tcfg: TrainConfig,
    spec: LengthscaleSpec | None = None,
    init: ParticleEnsemble | None = None,
    callback=None,
) -> tuple[ParticleEnsemble, list[dict]]:
    """Run ``tcfg.epochs`` epochs of shuffled mini-batch updates.

    Resumes from ``init.epoch`` when ``init`` is given. Returns the final
    ensemble and one log row per epoch run.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    N = len(X)
    if N < 1:
        raise ValueError("empty training set")
    ensemble = init if init is not None else init_ensemble(cfg, tcfg.n_particles, tcfg.seed)
    if tcfg.method == "forde":
        spec = resolve_spec(tcfg, X, spec)
    prior = EmpCovPrior.from_data(X, tcfg.empcov_scale, tcfg.empcov_jitter) if tcfg.prior == "empcov" else None
    B = min(tcfg.batch_size, N)
    steps_per_epoch = math.ceil(N / B)
    total = steps_per_epoch * tcfg.epochs
    log = []
    for epoch in range(ensemble.epoch, tcfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(_seed_seq(tcfg.seed, STREAM_SHUFFLE, epoch)).permutation(N)
        kvals = []
        for k in range(steps_per_epoch):
            idx = order[k * B:(k + 1) * B]
            lr = learning_rate(tcfg, epoch * steps_per_epoch + k, total)
            ensemble, stats = train_step(ensemble, nn.Batch(X[idx], y[idx]), tcfg, lr, spec, prior)
            kvals.append(stats.mean_offdiag_kernel)
        ensemble = replace(ensemble, epoch=epoch + 1)
        seconds = time.perf_counter() - t0
        nll, acc = _train_metrics(ensemble, X, y)
        row = {
            "epoch": epoch + 1,
            "train_nll": nll,
            "train_acc": acc,
            "mean_offdiag_kernel": float(np.mean(kvals)) if not all(np.isnan(kvals)) else float("nan"),
            "epoch_seconds": seconds,
        }
        log.append(row)
        if callback is not None:
            callback(ensemble, row)
    return ensemble, log


# ---------------------------------------------------------------- file I/O
def save_checkpoint(path, ensemble: ParticleEnsemble, tcfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` container: params, momentum buffers and JSON metadata.

    The output depends only on its arguments (no timestamps).
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": ensemble.cfg.to_dict(),
        "train": None if tcfg is None else tcfg.to_dict(),
        "epoch": ensemble.epoch,
        "step": ensemble.step,
        # shuffling is counter based: (seed, epoch) is the whole RNG state
        "rng": {"seed": None if tcfg is None else tcfg.seed, "next_epoch": ensemble.epoch},
        "extra": extra or {},
    }
    arrays = {"params": ensemble.params, "momentum": ensemble.momentum, "meta": np.array(json.dumps(meta, sort_keys=True))}
    buf = io.BytesIO()
    # fixed member timestamps keep identical runs byte-identical
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            with zf.open(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ParticleEnsemble, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        ens = ParticleEnsemble(
            nn.MLPConfig.from_dict(meta["model"]),
            z["params"].copy(),
            z["momentum"].copy(),
            epoch=int(meta["epoch"]),
            step=int(meta["step"]),
        )
    return ens, meta


def write_log_csv(path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k != "epoch" else int(r[k]) for k in LOG_FIELDS})
