"""Toy dataset generators, IDX/CSV loaders and synthetic covariate-shift corruptions."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gradkernel import LengthscaleSpec

__all__ = [
    "Dataset",
    "CorruptionSpec",
    "CORRUPTIONS",
    "DataFormatError",
    "fit_normalizer",
    "gen_regression_1d",
    "regression_features",
    "gen_classification_2d",
    "gen_anisotropic",
    "load_idx",
    "write_idx",
    "load_csv",
    "write_csv",
    "corrupt",
]

CORRUPTIONS = ("iso_noise", "lowvar_noise", "highvar_noise", "rotation2d")


class DataFormatError(ValueError):
    """Malformed IDX or CSV input."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    x_raw: np.ndarray | None = None  # scalar coordinate for 1D regression
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or len(self.X) < 1:
            raise ValueError("X must have shape (N, D) with N >= 1")
        if len(self.y) != len(self.X):
            raise ValueError("X and y lengths differ")

    def __len__(self):
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def normalized(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        """Standardize raw features with the given statistics.

        Idempotent: a dataset already carrying these statistics is returned
        unchanged.
        """
        if self.mean is not None:
            if np.array_equal(self.mean, mean) and np.array_equal(self.std, std):
                return self
            raise ValueError("dataset is already normalized with different statistics")
        return replace(self, X=(self.X - mean) / std, mean=np.asarray(mean), std=np.asarray(std))

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx], x_raw=None if self.x_raw is None else self.x_raw[idx])


def fit_normalizer(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std of the training inputs (std floored at 1e-12)."""
    return train.X.mean(axis=0), np.maximum(train.X.std(axis=0), 1e-12)


# ------------------------------------------------------------------ toy data
def regression_features(x: np.ndarray) -> np.ndarray:
    """Lift scalar inputs to ``(x/2, (x/2)^2)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1) / 2.0
    return np.stack([x, x * x], axis=1)


def _reg_target(x):
    return np.sin(3.0 * x) + 0.3 * x


def gen_regression_1d(
    n_train: int,
    seed: int,
    noise_std: float = 0.1,
    clusters: tuple = ((-1.0, -0.3), (0.3, 1.0)),
    split: str = "train",
) -> Dataset:
    """Two input clusters with an empty gap between them.

    ``x_raw`` holds the scalar coordinate, ``X`` its two polynomial
    features and ``y`` a smooth target plus Gaussian noise.
    """
    if n_train < 2:
        raise ValueError("need at least two training points")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    sizes = [n_train // len(clusters)] * len(clusters)
    sizes[-1] += n_train - sum(sizes)
    x = np.concatenate([rng.uniform(lo, hi, size=n) for (lo, hi), n in zip(clusters, sizes)])
    y = _reg_target(x) + noise_std * rng.standard_normal(len(x))
    return Dataset(regression_features(x), y, split=split, x_raw=x, meta={"noise_std": noise_std, "clusters": clusters})


def gen_classification_2d(n_per_class: int, seed: int, noise: float = 0.1, split: str = "train") -> Dataset:
    """Two interleaved half-moons with isotropic Gaussian jitter, labels 0/1."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    t0 = rng.uniform(0.0, math.pi, n_per_class)
    t1 = rng.uniform(0.0, math.pi, n_per_class)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    X = np.concatenate([upper, lower]) + noise * rng.standard_normal((2 * n_per_class, 2))
    # center the pair of moons on the origin
    X -= np.array([0.5, 0.25])
    y = np.repeat([0, 1], n_per_class)
    return Dataset(X, y, split=split, meta={"noise": noise})


def random_basis(D: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    Q, R = np.linalg.qr(rng.standard_normal((D, D)))
    return Q * np.sign(np.diag(R))


def gen_anisotropic(
    n: int,
    D: int,
    eigvals,
    seed: int,
    n_informative: int = 2,
    basis_seed: int | None = None,
    split: str = "train",
) -> Dataset:
    """Zero-mean Gaussian inputs with population covariance ``Q diag(eigvals) Q^T``.

    ``Q`` is a random orthonormal basis (drawn from ``basis_seed``, default
    ``seed``). The binary label depends only on the latent coordinates
    along the ``n_informative`` highest-variance directions.
    """
    eigvals = np.asarray(eigvals, dtype=np.float64)
    if len(eigvals) != D:
        raise ValueError("need one eigenvalue per dimension")
    if np.any(eigvals < 0):
        raise ValueError("eigenvalues must be nonnegative")
    order = np.argsort(eigvals)[::-1]
    Q = random_basis(D, seed if basis_seed is None else basis_seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    Z = rng.standard_normal((n, D)) * np.sqrt(eigvals)
    X = Z @ Q.T
    top = order[:n_informative]
    w = np.ones(n_informative) / np.sqrt(eigvals[top].clip(1e-12))
    score = Z[:, top] @ w
    if n_informative >= 2:
        # XOR-like interaction keeps the task nonlinear
        a = Z[:, top[0]] / np.sqrt(eigvals[top[0]])
        b = Z[:, top[1]] / np.sqrt(eigvals[top[1]])
        score = a * b + 0.5 * score
    y = (score > 0).astype(np.int64)
    return Dataset(X, y, split=split, meta={"basis": Q, "eigvals": eigvals, "informative": top})


# ------------------------------------------------------------------- file I/O
_IDX_DTYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header: expected at least 4 bytes, got {len(raw)}")
    zero, code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or code not in _IDX_DTYPES or ndim < 1:
        raise DataFormatError(f"{path}: bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x} at byte 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated header: expected {head} bytes, got {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    dtype, size = _IDX_DTYPES[code]
    expected = head + size * int(np.prod(shape))
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for shape {shape}, got {len(raw)} (data starts at byte {head})")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (magic 0x0000080N)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_idx supports uint8 arrays only")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """MNIST-style image/label IDX pair; pixels flattened and scaled to [0, 1]."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected a 3D image array (magic 0x00000803), got ndim={images.ndim}")
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected a 1D label array (magic 0x00000801), got ndim={labels.ndim}")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), split=split)


def load_csv(path, label_col: str, split: str = "train", label_dtype=np.int64) -> Dataset:
    """CSV with a header row; every non-label column is a float feature."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if label_col not in header:
            raise DataFormatError(f"{path}: label column {label_col!r} not in header {header}")
        li = header.index(label_col)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(k for k, c in enumerate(row) if not _is_float(c))
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell {row[bad]!r} in column {header[bad]!r}") from None
            labels.append(vals.pop(li))
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    y = np.asarray(labels)
    if np.issubdtype(label_dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise DataFormatError(f"{path}: non-integer class label")
        y = y.astype(label_dtype)
    features = [h for k, h in enumerate(header) if k != li]
    return Dataset(np.asarray(rows), y, split=split, meta={"columns": features})


def _is_float(c: str) -> bool:
    try:
        float(c)
    except ValueError:
        return False
    return True


def write_csv(path, ds: Dataset, label_col: str = "label", columns=None) -> None:
    """Write features and labels; floats use shortest round-trip repr."""
    columns = columns or ds.meta.get("columns") or [f"x{k}" for k in range(ds.dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*columns, label_col])
        for row, lab in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [repr(lab.item())])


# ---------------------------------------------------------------- corruption
@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0
    sigma: float = 0.1  # noise std per severity unit
    k: int | None = None  # eigenvectors affected by lowvar/highvar noise; default D // 2
    degrees: float = 5.0  # rotation per severity unit

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 0 <= int(self.severity) <= 5 or int(self.severity) != self.severity:
            raise ValueError("severity must be an integer in 0..5")

    @classmethod
    def parse(cls, text: str, **kw) -> "CorruptionSpec":
        """From ``"kind:severity"``."""
        kind, _, sev = text.partition(":")
        return cls(kind, int(sev or 0), **kw)


def corrupt(ds: Dataset, spec: CorruptionSpec, pca: LengthscaleSpec | None = None) -> Dataset:
    """Return a corrupted copy of ``ds``; the input is never modified."""
    if spec.severity == 0:
        return replace(ds, X=ds.X.copy(), split=ds.split)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 505, CORRUPTIONS.index(spec.kind), spec.severity]))
    N, D = ds.X.shape
    std = spec.sigma * spec.severity
    if spec.kind == "iso_noise":
        X = ds.X + std * rng.standard_normal((N, D))
    elif spec.kind in ("lowvar_noise", "highvar_noise"):
        if pca is None:
            raise ValueError(f"{spec.kind} needs a PCA basis")
        k = spec.k if spec.k is not None else max(1, D // 2)
        U = pca.basis[:, -k:] if spec.kind == "lowvar_noise" else pca.basis[:, :k]
        X = ds.X + (std * rng.standard_normal((N, k))) @ U.T
    else:
        if D != 2:
            raise ValueError("rotation2d needs 2D inputs")
        a = math.radians(spec.degrees * spec.severity)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        X = ds.X @ R.T
    return replace(ds, X=X, split="test", meta={**ds.meta, "corruption": f"{spec.kind}:{spec.severity}"})
