"""Command-line front end: ``forde pca | train | eval | repro``.

Exit codes: 0 success, 1 computation failure, 2 invalid configuration or
input data, 3 file-system error. ``FORDE_THREADS`` caps the number of
BLAS worker threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import zipfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, experiments, metrics, nn, parvi
from .config import ConfigError, RunConfig
from .gradkernel import LengthscaleSpec, pca_spec

log = logging.getLogger("forde")

EXIT_OK, EXIT_COMPUTE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
STREAM_DATA = parvi.STREAM_DATA


# ------------------------------------------------------------------ datasets
def _data_seed(seed: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, STREAM_DATA, split]).generate_state(1)[0])


def build_datasets(cfg: RunConfig) -> tuple[data.Dataset, data.Dataset, str, int]:
    """Train and test sets described by ``cfg.data``; returns (train, test, task, n_outputs)."""
    d = cfg.data
    kind = d["kind"]
    s_tr, s_te = _data_seed(cfg.seed, 0), _data_seed(cfg.seed, 1)
    task = "classification"
    if kind == "moons":
        tr = data.gen_classification_2d(d["n"], s_tr, d["noise"])
        te = data.gen_classification_2d(max(1, d["n_test"] // 2), s_te, d["noise"], split="test")
    elif kind == "reg1d":
        clusters = ((-1.0, -d["gap"]), (d["gap"], 1.0))
        tr = data.gen_regression_1d(d["n"], s_tr, d["noise"], clusters)
        te = data.gen_regression_1d(d["n_test"], s_te, d["noise"], clusters, split="test")
        task = "regression"
    elif kind == "aniso":
        tr = data.gen_anisotropic(d["n"], d["dim"], d["eigvals"], s_tr, basis_seed=s_tr)
        te = data.gen_anisotropic(d["n_test"], d["dim"], d["eigvals"], s_te, basis_seed=s_tr, split="test")
    elif kind == "csv":
        tr = data.load_csv(d["path"], d["label_col"])
        te = data.load_csv(d["test_path"], d["label_col"], split="test") if d["test_path"] else tr
    else:
        tr = data.load_idx(d["images"], d["labels"])
        if d["test_images"] and d["test_labels"]:
            te = data.load_idx(d["test_images"], d["test_labels"], split="test")
        else:
            te = tr
    if d["limit"]:
        tr = tr.subset(slice(0, d["limit"]))
    if d["normalize"]:
        mean, std = data.fit_normalizer(tr)
        tr, te = tr.normalized(mean, std), te.normalized(mean, std)
    if te.dim != tr.dim:
        raise data.DataFormatError(f"train has {tr.dim} features but test has {te.dim}")
    n_out = 1 if task == "regression" else int(max(tr.y.max(), te.y.max())) + 1
    return tr, te, task, max(n_out, 2) if task == "classification" else 1


def _load_spec(cfg: RunConfig, X) -> LengthscaleSpec | None:
    if cfg.pca is None:
        return None
    spec = LengthscaleSpec.load(cfg.pca)
    if spec.dim != X.shape[1]:
        raise ConfigError(f"pca: lengthscale file has dimension {spec.dim} but the data has {X.shape[1]}")
    return spec


# ------------------------------------------------------------------ commands
def cmd_pca(args) -> int:
    cfg = _config(args)
    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError("--alpha: must lie in [0, 1]")
    tr, _, _, _ = build_datasets(cfg)
    spec = pca_spec(tr.X, alpha=args.alpha, epsilon_pca=args.epsilon_pca)
    if tr.mean is not None:
        spec.mean, spec.std = tr.mean, tr.std
    out = _outdir(args.out)
    spec.save(out / "lengthscale.json")
    top = spec.eigvals[:10]
    print("top eigenvalues: " + " ".join(f"{v:.6g}" for v in top))
    return EXIT_OK


def _lengthscale_flags_given(args, cfg: RunConfig) -> list[str]:
    given = [k for k in ("train.lengthscale", "train.alpha") if k in cfg.explicit]
    if args.alpha is not None:
        given.append("--alpha")
    if args.lengthscale is not None:
        given.append("--lengthscale")
    if cfg.pca is not None:
        given.append("pca")
    return given


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg.set("train.method", args.method)
    if args.epochs is not None:
        cfg.set("train.epochs", str(args.epochs))
    if args.lengthscale:
        cfg.set("train.lengthscale", args.lengthscale)
    alphas = [None]
    if args.alpha is not None:
        try:
            alphas = [float(a) for a in args.alpha.split(",") if a.strip()]
        except ValueError:
            raise ConfigError(f"--alpha: expected a comma-separated list of numbers, got {args.alpha!r}") from None
        if not alphas:
            raise ConfigError("--alpha: empty list")
        if "train.lengthscale" not in cfg.explicit:
            cfg.set("train.lengthscale", "tuned")
    if cfg.train["method"] != "forde":
        flags = _lengthscale_flags_given(args, cfg)
        if flags:
            log.warning("method %s has no lengthscale; ignoring %s", cfg.train["method"], ", ".join(flags))
        alphas = [None]
    for a in alphas:
        if a is not None:
            cfg.set("train.alpha", repr(a))
        cfg.validate()
    tr, _, task, n_out = build_datasets(cfg)
    model = cfg.model_config(tr.dim, n_out, task)
    base = _outdir(args.out)
    for a in alphas:
        run_cfg = cfg
        if a is not None:
            run_cfg.set("train.alpha", repr(a))
        out = base if a is None else _outdir(base / f"alpha_{a:g}")
        _train_one(run_cfg, model, tr, out, args.resume)
    return EXIT_OK


def _train_one(cfg: RunConfig, model: nn.MLPConfig, tr: data.Dataset, out: Path, resume: bool) -> None:
    tcfg = cfg.train_config()
    spec = _load_spec(cfg, tr.X) if tcfg.method == "forde" else None
    ck = out / "checkpoint.npz"
    init = None
    if resume:
        if not ck.exists():
            raise FileNotFoundError(f"--resume: no checkpoint at {ck}")
        init, meta = parvi.load_checkpoint(ck)
        saved = dict(meta["train"] or {})
        now = tcfg.to_dict()
        diff = sorted(k for k in now if k != "epochs" and saved.get(k) != now[k])
        if diff or meta["model"] != model.to_dict():
            raise ConfigError(f"--resume: checkpoint was written with different settings ({', '.join(diff) or 'model'})")
        log.info("resuming %s at epoch %d", ck, init.epoch)
    (out / "config.txt").write_text("\n".join(cfg.to_lines()) + "\n", encoding="utf-8")
    log_path = out / "log.csv"
    if not resume:
        parvi.write_log_csv(log_path, [])

    def on_epoch(ens, row):
        # checkpoint every epoch so an interrupted run can be resumed
        tmp = ck.with_suffix(".tmp")
        parvi.save_checkpoint(tmp, ens, tcfg, extra={"run": cfg.to_dict()})
        os.replace(tmp, ck)
        parvi.write_log_csv(log_path, [row], append=True)
        log.info("epoch %d nll %.4f acc %.4f kernel %.4f (%.2fs)", row["epoch"], row["train_nll"], row["train_acc"], row["mean_offdiag_kernel"], row["epoch_seconds"])

    ens, _ = parvi.train(tr.X, tr.y, model, tcfg, spec=spec, init=init, callback=on_epoch)
    if not ck.exists():  # nothing left to run
        parvi.save_checkpoint(ck, ens, tcfg, extra={"run": cfg.to_dict()})
    print(f"wrote {ck}")


def _parse_grid(text: str) -> np.ndarray:
    try:
        x0, x1, y0, y1, n = text.split(",")
        n = int(n)
        xs, ys = np.linspace(float(x0), float(x1), n), np.linspace(float(y0), float(y1), n)
    except ValueError:
        raise ConfigError(f"--entropy-grid: expected xmin,xmax,ymin,ymax,n, got {text!r}") from None
    if n < 1:
        raise ConfigError("--entropy-grid: n must be >= 1")
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _metrics_row(ens, ds: data.Dataset) -> dict:
    if ens.cfg.task == "regression":
        mean, var = metrics.regression_predictive(ens, ds.X)
        return {
            "nll": metrics.regression_nll(ens, ds.X, ds.y),
            "rmse": float(np.sqrt(np.mean((mean - ds.y) ** 2))),
            "mean_predictive_variance": float(var.mean()),
        }
    return metrics.evaluate(ens, ds.X, ds.y).to_dict()


def cmd_eval(args) -> int:
    try:
        ens, meta = parvi.load_checkpoint(args.checkpoint)
    except (ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise data.DataFormatError(f"{args.checkpoint}: not a readable checkpoint ({exc})") from None
    run = (meta.get("extra") or {}).get("run")
    if args.config is None and not args.overrides and run is None:
        raise ConfigError("eval: checkpoint carries no run configuration; pass a config file")
    cfg = _config(args) if (args.config or args.overrides) else _config_from_dict(run)
    corruption = None
    if args.corrupt:
        try:
            corruption = data.CorruptionSpec.parse(args.corrupt, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(f"--corrupt: {exc}") from None
    sweep_kind = args.sweep
    if sweep_kind is not None and sweep_kind not in data.CORRUPTIONS:
        raise ConfigError(f"--sweep: expected one of {data.CORRUPTIONS}, got {sweep_kind!r}")
    grid = _parse_grid(args.entropy_grid) if args.entropy_grid else None
    tr, te, task, n_out = build_datasets(cfg)
    if ens.cfg.input_dim != te.dim or ens.cfg.task != task:
        raise ConfigError(f"eval: checkpoint expects {ens.cfg.input_dim}-dimensional {ens.cfg.task} data, config gives {te.dim}-dimensional {task}")
    if task == "classification" and int(te.y.max()) >= ens.cfg.output_dim:
        raise ConfigError("eval: test labels exceed the checkpoint's number of classes")
    if grid is not None and ens.cfg.input_dim != 2:
        raise ConfigError("--entropy-grid: needs a model with 2D inputs")
    pca = pca_spec(tr.X)
    ds = data.corrupt(te, corruption, pca) if corruption is not None else te
    out = _outdir(args.out)
    record = _metrics_row(ens, ds)
    _write_json(out / "metrics.json", record)
    if sweep_kind is not None:
        with (out / "sweep.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["severity", "nll", "acc", "ece", "epistemic"])
            for sev in range(6):
                shifted = data.corrupt(te, data.CorruptionSpec(sweep_kind, sev, seed=cfg.seed), pca)
                if task == "regression":
                    r = _metrics_row(ens, shifted)
                    w.writerow([sev, repr(r["nll"]), "nan", "nan", "nan"])
                    continue
                b = metrics.predict(ens, shifted.X)
                nll, acc = metrics.nll_acc(b, shifted.y)
                w.writerow([sev, repr(nll), repr(acc), repr(metrics.ece(b, shifted.y)), repr(metrics.epistemic_aleatoric(b)[0])])
    if grid is not None:
        ent = metrics.entropy_map(ens, grid)
        with (out / "entropy.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "entropy"])
            for (x, y), e in zip(grid, ent):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(e))])
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_repro(args) -> int:
    overrides = {}
    for item in args.overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"{item}: overrides must look like key=value")
        try:
            overrides[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key.strip()] = value
    try:
        setup = experiments.make_setup(args.experiment, overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.experiment}: {exc}") from None
    out = _outdir(args.out)
    kw = {"data_dir": args.data_dir} if args.experiment == "mnist" else {}
    if args.data_dir and args.experiment != "mnist":
        log.warning("--data-dir is only used by the mnist experiment")
    try:
        report = experiments.RUNNERS[args.experiment](setup, **kw)
    except Exception as exc:
        raise RuntimeError(f"{args.experiment}: {type(exc).__name__}: {exc}") from exc
    path = out / f"{args.experiment}_report.json"
    _write_json(path, report)
    for name, c in report["criteria"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {args.experiment}.{name}")
    print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ helpers
def _config(args) -> RunConfig:
    cfg = config_mod.load(args.config, args.overrides)
    cfg.validate()
    return cfg


def _config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for key in ("name", "seed", "pca"):
        setattr(cfg, key, d.get(key, getattr(cfg, key)))
    for prefix in ("data", "model", "train"):
        for k, v in (d.get(prefix) or {}).items():
            getattr(cfg, prefix)[k] = tuple(v) if isinstance(v, list) else v
    cfg.validate()
    return cfg


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _threads() -> int | None:
    raw = os.environ.get("FORDE_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FORDE_THREADS: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"FORDE_THREADS: expected a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forde", description="Input-gradient repulsive ensembles.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="configuration overrides")
        sp.add_argument("-c", "--config", help="key = value configuration file")

    sp = sub.add_parser("pca", help="eigendecomposition of the training inputs")
    with_config(sp)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--epsilon-pca", type=float, default=1e-8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pca)

    sp = sub.add_parser("train", help="train an ensemble")
    with_config(sp)
    sp.add_argument("--method", choices=parvi.METHODS)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lengthscale", choices=("identity", "pca", "tuned"))
    sp.add_argument("--alpha", help="lengthscale weight, or a comma-separated list for a sweep")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    with_config(sp)
    sp.add_argument("--corrupt", metavar="KIND:SEVERITY")
    sp.add_argument("--sweep", metavar="KIND", help="write sweep.csv over severities 0..5")
    sp.add_argument("--entropy-grid", metavar="XMIN,XMAX,YMIN,YMAX,N")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("repro", help="run a paired comparison protocol")
    sp.add_argument("experiment", choices=experiments.EXPERIMENTS)
    sp.add_argument("overrides", nargs="*", metavar="key=value", help="protocol settings (JSON values)")
    sp.add_argument("--data-dir", help="directory with MNIST IDX files (mnist only)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    # key=value overrides may follow options; argparse stops collecting them at the first option
    args, extra = parser.parse_known_args(argv)
    for item in extra:
        if item.startswith("-") or "=" not in item or not hasattr(args, "overrides"):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides.append(item)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        n = _threads()
        if n is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            return args.func(args)
    except (ConfigError, data.DataFormatError) as exc:
        print(f"forde: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"forde: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # any failure inside the numerics
        print(f"forde: computation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
