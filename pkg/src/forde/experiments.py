"""Paired FoRDE-versus-baseline protocols on the desk-scale tasks.

Each protocol trains every method on the same data and seeds, measures the
quantity its check is about, and returns a JSON-ready report with one
``{"pass": bool, ...}`` entry per check under ``"criteria"``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import data, metrics, nn, parvi
from .gradkernel import pca_spec

__all__ = [
    "EXPERIMENTS",
    "Reg1dSetup",
    "Cls2dSetup",
    "AnisoSetup",
    "MnistSetup",
    "SETUPS",
    "reg1d",
    "cls2d",
    "aniso",
    "mnist",
    "run",
    "make_setup",
    "step_seconds",
    "ring",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("reg1d", "cls2d", "aniso", "mnist")


def _train(X, y, cfg, tcfg, spec=None):
    ens, _ = parvi.train(X, y, cfg, tcfg, spec=spec)
    return ens


def _tcfg(setup, method, seed, **kw):
    return parvi.TrainConfig(
        method=method,
        n_particles=setup.n_particles,
        epochs=setup.epochs,
        batch_size=setup.batch_size,
        lr_init=setup.lr_init,
        lr_final=setup.lr_final,
        weight_decay=setup.weight_decay,
        seed=seed,
        **kw,
    )


# ------------------------------------------------------------------ reg1d
@dataclass(frozen=True)
class Reg1dSetup:
    n_train: int = 40
    gap: float = 0.5  # training inputs avoid (-gap, gap)
    data_seed: int = 0
    hidden: tuple = (50, 50)
    n_particles: int = 16
    epochs: int = 200
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 5e-4
    seeds: tuple = (0, 1, 2, 3, 4)
    grid_points: int = 41
    margin: float = 0.05  # grid stays this far inside the gap
    min_ratio: float = 1.3


def reg1d(setup: Reg1dSetup = Reg1dSetup(), progress=None) -> dict:
    """Predictive variance inside the input gap, FoRDE over DE."""
    t0 = time.perf_counter()
    g = setup.gap
    ds = data.gen_regression_1d(setup.n_train, setup.data_seed, clusters=((-1.0, -g), (g, 1.0)))
    cfg = nn.MLPConfig(2, setup.hidden, 1, "relu", task="regression")
    xg = np.linspace(-g + setup.margin, g - setup.margin, setup.grid_points)
    Xg = data.regression_features(xg)
    per_seed = []
    for seed in setup.seeds:
        row = {"seed": seed}
        for method in ("de", "forde"):
            ens = _train(ds.X, ds.y, cfg, _tcfg(setup, method, seed))
            _, var = metrics.regression_predictive(ens, Xg)
            row[f"gap_var_{method}"] = float(var.mean())
        row["ratio"] = row["gap_var_forde"] / row["gap_var_de"]
        per_seed.append(row)
        _note(progress, f"reg1d seed {seed}: ratio {row['ratio']:.3f}")
    v_de = float(np.mean([r["gap_var_de"] for r in per_seed]))
    v_fo = float(np.mean([r["gap_var_forde"] for r in per_seed]))
    ratio = v_fo / v_de
    return _report(
        "reg1d",
        setup,
        t0,
        per_seed=per_seed,
        gap_variance={"de": v_de, "forde": v_fo},
        gap_variance_ratio=ratio,
        criteria={"gap_variance_ratio": {"value": ratio, "threshold": setup.min_ratio, "pass": ratio >= setup.min_ratio}},
    )


# ------------------------------------------------------------------ cls2d
@dataclass(frozen=True)
class Cls2dSetup:
    n_per_class: int = 50
    noise: float = 0.1
    data_seed: int = 0
    hidden: tuple = (32, 32)
    n_particles: int = 16
    epochs: int = 100
    batch_size: int = 20
    lr_init: float = 0.05
    lr_final: float = 5e-4
    weight_decay: float = 5e-4
    seeds: tuple = (0, 1, 2, 3, 4)
    ring_factor: float = 3.0
    ring_points: int = 64
    baselines: tuple = ("de", "weight_rde", "function_rde")
    min_wins: int = 4


def ring(radius: float, n: int) -> np.ndarray:
    t = 2 * math.pi * np.arange(n) / n
    return radius * np.stack([np.cos(t), np.sin(t)], axis=1)


def cls2d(setup: Cls2dSetup = Cls2dSetup(), progress=None) -> dict:
    """Mean predictive entropy on a far-field ring, FoRDE against each baseline."""
    t0 = time.perf_counter()
    ds = data.gen_classification_2d(setup.n_per_class, setup.data_seed, setup.noise)
    cfg = nn.MLPConfig(2, setup.hidden, 2, "relu")
    radius = setup.ring_factor * float(np.max(np.linalg.norm(ds.X, axis=1)))
    far = ring(radius, setup.ring_points)
    methods = ("forde", *setup.baselines)
    per_seed = []
    for seed in setup.seeds:
        row = {"seed": seed}
        for method in methods:
            ens = _train(ds.X, ds.y, cfg, _tcfg(setup, method, seed))
            row[f"entropy_{method}"] = float(metrics.entropy_map(ens, far).mean())
            row[f"train_acc_{method}"] = metrics.nll_acc(metrics.predict(ens, ds.X), ds.y)[1]
        per_seed.append(row)
        _note(progress, "cls2d seed %d: " % seed + " ".join(f"{m}={row['entropy_' + m]:.3f}" for m in methods))
    criteria = {}
    for b in setup.baselines:
        wins = sum(r["entropy_forde"] > r[f"entropy_{b}"] for r in per_seed)
        criteria[f"far_entropy_vs_{b}"] = {"wins": wins, "seeds": len(per_seed), "min_wins": setup.min_wins, "pass": wins >= setup.min_wins}
    means = {m: float(np.mean([r[f"entropy_{m}"] for r in per_seed])) for m in methods}
    return _report("cls2d", setup, t0, ring_radius=radius, per_seed=per_seed, far_field_entropy=means, criteria=criteria)


# ------------------------------------------------------------------ aniso
@dataclass(frozen=True)
class AnisoSetup:
    dim: int = 10
    eigvals: tuple = (4.0, 3.0, 2.0, 1.0, 0.5, 0.05, 0.02, 0.01, 0.005, 0.001)
    n_train: int = 400
    n_test: int = 1000
    data_seed: int = 0
    hidden: tuple = (32, 32)
    n_particles: int = 8
    epochs: int = 100
    batch_size: int = 32
    lr_init: float = 0.05
    lr_final: float = 5e-4
    weight_decay: float = 5e-4
    seeds: tuple = (0, 1, 2, 3, 4)
    alphas: tuple = (0.0, 0.2, 0.4, 0.8, 1.0)
    shift: str = "lowvar_noise"
    sigma: float = 0.5
    k: int = 5
    degradation_severity: int = 3
    diag_shift: str = "iso_noise"
    diag_sigma: float = 0.1
    min_wins: int = 4


def _aniso_data(setup: AnisoSetup):
    eig = np.asarray(setup.eigvals, dtype=np.float64)
    tr = data.gen_anisotropic(setup.n_train, setup.dim, eig, setup.data_seed)
    te = data.gen_anisotropic(setup.n_test, setup.dim, eig, setup.data_seed + 7919, basis_seed=setup.data_seed, split="test")
    return tr, te


def _accuracy(ens, ds):
    return metrics.nll_acc(metrics.predict(ens, ds.X), ds.y)[1]


def aniso(setup: AnisoSetup = AnisoSetup(), progress=None) -> dict:
    """Accuracy under data-aligned noise for DE and FoRDE across lengthscale weights.

    Also records input-gradient cosine distance and epistemic uncertainty
    of FoRDE (``alpha=1``) and DE under the diagnostic shift.
    """
    t0 = time.perf_counter()
    if len(setup.eigvals) != setup.dim:
        raise ValueError("need one eigenvalue per dimension")
    tr, te = _aniso_data(setup)
    spec = pca_spec(tr.X)
    cfg = nn.MLPConfig(setup.dim, setup.hidden, 2, "relu")
    sev = range(0, 6)
    shifted = {s: data.corrupt(te, data.CorruptionSpec(setup.shift, s, seed=setup.data_seed, sigma=setup.sigma, k=setup.k), spec) for s in sev}
    diag = {s: data.corrupt(te, data.CorruptionSpec(setup.diag_shift, s, seed=setup.data_seed, sigma=setup.diag_sigma, k=setup.k), spec) for s in sev}
    variants = [("de", None)] + [("forde", a) for a in setup.alphas]
    per_seed = []
    for seed in setup.seeds:
        row = {"seed": seed, "accuracy": {}, "diagnostics": {}}
        for method, alpha in variants:
            name = method if alpha is None else f"forde_alpha_{alpha:g}"
            extra = {} if alpha is None else {"lengthscale": "tuned", "alpha": alpha}
            ens = _train(tr.X, tr.y, cfg, _tcfg(setup, method, seed, **extra), spec=spec if alpha is not None else None)
            row["accuracy"][name] = [_accuracy(ens, shifted[s]) for s in sev]
            if alpha is None or alpha == 1.0:
                row["diagnostics"][name] = [
                    {
                        "severity": s,
                        "grad_cos_dist": metrics.grad_cos_distance(ens, diag[s].X, diag[s].y),
                        "epistemic": metrics.epistemic_aleatoric(metrics.predict(ens, diag[s].X))[0],
                    }
                    for s in sev
                ]
        per_seed.append(row)
        acc = row["accuracy"]
        _note(progress, f"aniso seed {seed}: de {np.mean(acc['de'][1:]):.3f} " + " ".join(f"a={a:g}:{np.mean(acc[f'forde_alpha_{a:g}'][1:]):.3f}" for a in setup.alphas))
    return _report("aniso", setup, t0, per_seed=per_seed, **_aniso_summary(setup, per_seed))


def _aniso_summary(setup: AnisoSetup, per_seed: list) -> dict:
    names = ["de"] + [f"forde_alpha_{a:g}" for a in setup.alphas]
    mean_acc = {n: np.mean([r["accuracy"][n] for r in per_seed], axis=0) for n in names}
    pca = "forde_alpha_1"
    s = setup.degradation_severity
    deg = {n: float(mean_acc[n][0] - mean_acc[n][s]) for n in ("de", pca)}
    corrupted = {n: float(np.mean(mean_acc[n][1:])) for n in names}
    sweep = [corrupted[f"forde_alpha_{a:g}"] for a in setup.alphas]
    if np.ptp(sweep) == 0.0:
        rho = 0.0  # a flat sweep does not decrease
    else:
        rho = float(stats.spearmanr(setup.alphas, sweep).statistic)
    criteria = {
        "degradation_at_severity": {"severity": s, "forde_pca": deg[pca], "de": deg["de"], "pass": deg[pca] < deg["de"]},
        "mean_corrupted_accuracy": {"forde_pca": corrupted[pca], "de": corrupted["de"], "pass": corrupted[pca] > corrupted["de"]},
        "alpha_sweep_spearman": {"alphas": list(setup.alphas), "accuracy": sweep, "rho": rho, "pass": rho >= 0.0},
    }
    for key in ("grad_cos_dist", "epistemic"):
        wins = 0
        for r in per_seed:
            f = [d[key] for d in r["diagnostics"][pca]]
            b = [d[key] for d in r["diagnostics"]["de"]]
            wins += all(x > y for x, y in zip(f[1:], b[1:]))
        criteria[f"{key}_every_severity"] = {"wins": wins, "seeds": len(per_seed), "min_wins": setup.min_wins, "pass": wins >= setup.min_wins}
    per_severity = {n: [float(v) for v in mean_acc[n]] for n in names}
    return {"per_severity_accuracy": per_severity, "criteria": criteria}


# ------------------------------------------------------------------ mnist
@dataclass(frozen=True)
class MnistSetup:
    hidden: tuple = (256, 256)
    n_particles: int = 10
    epochs: int = 1
    batch_size: int = 128
    lr_init: float = 0.05
    lr_final: float = 5e-4
    weight_decay: float = 5e-4
    n_train: int = 1024  # subset used for timing and training
    n_test: int = 1000
    seed: int = 0
    timing_steps: int = 4
    ratio_range: tuple = (2.0, 6.0)


def _mnist_data(setup: MnistSetup, data_dir):
    if data_dir is not None:
        d = Path(data_dir)
        tr = data.load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
        te = data.load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", split="test")
        return tr.subset(slice(0, setup.n_train)), te.subset(slice(0, setup.n_test)), str(d)
    # shape-compatible stand-in: timing does not depend on pixel values
    rng = np.random.default_rng(np.random.SeedSequence([setup.seed, 606]))
    n = setup.n_train + setup.n_test
    X = rng.uniform(size=(n, 784))
    y = rng.integers(0, 10, n)
    return data.Dataset(X[: setup.n_train], y[: setup.n_train]), data.Dataset(X[setup.n_train:], y[setup.n_train:], split="test"), None


def step_seconds(cfg, tcfg, X, y, steps: int, spec=None) -> float:
    """Wall-clock seconds for ``steps`` training steps of ``tcfg`` (after one warm-up step)."""
    ens = parvi.init_ensemble(cfg, tcfg.n_particles, tcfg.seed)
    B = tcfg.batch_size
    batches = [nn.Batch(X[k * B:(k + 1) * B], y[k * B:(k + 1) * B]) for k in range(steps + 1)]
    ens, _ = parvi.train_step(ens, batches[0], tcfg, tcfg.lr_init, spec)
    t = time.perf_counter()
    for b in batches[1:]:
        ens, _ = parvi.train_step(ens, b, tcfg, tcfg.lr_init, spec)
    return time.perf_counter() - t


def mnist(setup: MnistSetup = MnistSetup(), data_dir=None, progress=None) -> dict:
    """Per-step cost of FoRDE relative to DE on the MNIST-sized MLP, plus test metrics."""
    t0 = time.perf_counter()
    tr, te, source = _mnist_data(setup, data_dir)
    cfg = nn.MLPConfig(784, setup.hidden, 10, "relu")
    need = setup.batch_size * (setup.timing_steps + 1)
    if len(tr) < need:
        raise ValueError(f"timing needs at least {need} training samples")
    spec = pca_spec(tr.X)
    secs = {}
    for method in ("de", "forde"):
        tc = _tcfg(setup, method, setup.seed)
        secs[method] = step_seconds(cfg, tc, tr.X, tr.y, setup.timing_steps, spec if method == "forde" else None)
        _note(progress, f"mnist {method}: {secs[method]:.2f}s for {setup.timing_steps} steps")
    ratio = secs["forde"] / secs["de"]
    lo, hi = setup.ratio_range
    test = {}
    if source is not None:
        for method in ("de", "forde"):
            ens = _train(tr.X, tr.y, cfg, _tcfg(setup, method, setup.seed), spec=spec if method == "forde" else None)
            test[method] = metrics.evaluate(ens, te.X, te.y).to_dict()
    return _report(
        "mnist",
        setup,
        t0,
        data_source=source or "synthetic",
        step_seconds=secs,
        time_ratio=ratio,
        test_metrics=test,
        criteria={"time_ratio": {"value": ratio, "range": [lo, hi], "pass": lo <= ratio <= hi}},
    )


# ------------------------------------------------------------------ driver
SETUPS = {"reg1d": Reg1dSetup, "cls2d": Cls2dSetup, "aniso": AnisoSetup, "mnist": MnistSetup}
RUNNERS = {"reg1d": reg1d, "cls2d": cls2d, "aniso": aniso, "mnist": mnist}


def make_setup(name: str, overrides: dict | None = None):
    """Default setup of ``name`` with ``overrides`` applied (unknown keys rejected)."""
    if name not in SETUPS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    cls = SETUPS[name]
    base = cls()
    overrides = dict(overrides or {})
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ValueError(f"unknown {name} setting(s): {unknown}")
    for key, val in overrides.items():
        cur = getattr(base, key)
        if isinstance(cur, tuple) and not isinstance(val, tuple):
            val = tuple(val) if isinstance(val, list) else (val,)
        overrides[key] = val
    return replace(base, **overrides)


def run(name: str, overrides: dict | None = None, progress=None, **kw) -> dict:
    setup = make_setup(name, overrides)
    return RUNNERS[name](setup, progress=progress, **kw)


def _note(progress, msg):
    log.info(msg)
    if progress is not None:
        progress(msg)


def _report(name, setup, t0, **body):
    crit = body.get("criteria", {})
    return {
        "experiment": name,
        "setup": _jsonable(asdict(setup)),
        **_jsonable(body),
        "passed": bool(all(c["pass"] for c in crit.values())),
        "seconds": time.perf_counter() - t0,
    }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x
