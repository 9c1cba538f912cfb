"""Flat ``key = value`` run configuration with dotted keys.

Example file::

    name = moons-forde
    seed = 3
    data.kind = moons
    data.n = 100
    model.hidden = 32,32
    train.method = forde
    train.epochs = 50

``#`` starts a comment. Later assignments (including command-line
overrides) replace earlier ones. Unknown keys and badly typed values are
rejected with the key path in the message.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from . import nn, parvi

__all__ = ["ConfigError", "RunConfig", "DATA_KINDS", "parse_lines", "load", "schema"]

DATA_KINDS = ("moons", "reg1d", "aniso", "csv", "idx")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _opt_str(text: str):
    return text or None


# key -> (parser, default)
_DATA = {
    "kind": (str, "moons"),
    "n": (int, 100),  # per class for moons, total otherwise
    "n_test": (int, 500),
    "noise": (float, 0.1),
    "gap": (float, 0.3),
    "dim": (int, 10),
    "eigvals": (_floats, (4.0, 3.0, 2.0, 1.0, 0.5, 0.05, 0.02, 0.01, 0.005, 0.001)),
    "path": (_opt_str, None),
    "test_path": (_opt_str, None),
    "label_col": (str, "label"),
    "images": (_opt_str, None),
    "labels": (_opt_str, None),
    "test_images": (_opt_str, None),
    "test_labels": (_opt_str, None),
    "limit": (int, 0),  # keep only the first `limit` training rows when > 0
    "normalize": (_bool, False),
}
_MODEL = {
    "hidden": (_ints, (64, 64)),
    "activation": (str, "relu"),
    "obs_noise": (float, 0.1),
}
_TOP = {
    "name": (str, "run"),
    "seed": (int, 0),
    "pca": (_opt_str, None),  # lengthscale JSON written by `forde pca`
}


def _train_schema():
    conv = {bool: _bool, int: int, float: float, str: str}
    out = {}
    for f in fields(parvi.TrainConfig):
        if f.name == "seed":
            continue
        out[f.name] = (conv[type(f.default)], f.default)
    return out


def schema() -> dict:
    """Every accepted dotted key with its default."""
    out = {k: d for k, (_, d) in _TOP.items()}
    for prefix, table in (("data", _DATA), ("model", _MODEL), ("train", _train_schema())):
        out.update({f"{prefix}.{k}": d for k, (_, d) in table.items()})
    return out


def _parser_for(key: str):
    if key in _TOP:
        return _TOP[key][0]
    prefix, _, rest = key.partition(".")
    table = {"data": _DATA, "model": _MODEL, "train": _train_schema()}.get(prefix)
    if table is None or rest not in table:
        raise ConfigError(f"{key}: unknown key")
    return table[rest][0]


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    pca: str | None = None
    data: dict = field(default_factory=lambda: {k: d for k, (_, d) in _DATA.items()})
    model: dict = field(default_factory=lambda: {k: d for k, (_, d) in _MODEL.items()})
    train: dict = field(default_factory=lambda: {k: d for k, (_, d) in _train_schema().items()})
    explicit: set = field(default_factory=set)  # keys set by the user

    def set(self, key: str, text: str) -> None:
        parse = _parser_for(key)
        try:
            value = parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        self.explicit.add(key)
        if key in _TOP:
            setattr(self, key, value)
        else:
            prefix, _, rest = key.partition(".")
            getattr(self, prefix)[rest] = value

    def train_config(self) -> parvi.TrainConfig:
        try:
            return parvi.TrainConfig(**self.train, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def model_config(self, input_dim: int, output_dim: int, task: str) -> nn.MLPConfig:
        try:
            return nn.MLPConfig(input_dim, self.model["hidden"], output_dim, self.model["activation"], task, self.model["obs_noise"], self.seed)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def validate(self) -> None:
        """Check everything that can be checked before loading data."""
        if self.data["kind"] not in DATA_KINDS:
            raise ConfigError(f"data.kind: expected one of {DATA_KINDS}, got {self.data['kind']!r}")
        if self.data["kind"] == "csv" and not self.data["path"]:
            raise ConfigError("data.path: required for data.kind=csv")
        if self.data["kind"] == "idx" and not (self.data["images"] and self.data["labels"]):
            raise ConfigError("data.images: data.images and data.labels are required for data.kind=idx")
        if self.data["kind"] == "aniso" and len(self.data["eigvals"]) != self.data["dim"]:
            raise ConfigError("data.eigvals: need one eigenvalue per data.dim")
        for key in ("n", "n_test"):
            if self.data[key] < 1:
                raise ConfigError(f"data.{key}: must be >= 1")
        if self.data["limit"] < 0:
            raise ConfigError("data.limit: must be >= 0")
        self.train_config()
        self.model_config(1, 1 if self.data["kind"] == "reg1d" else 2, "regression" if self.data["kind"] == "reg1d" else "classification")

    def to_lines(self) -> list[str]:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            if v is None:
                return ""
            return repr(v) if isinstance(v, float) else str(v)

        lines = [f"{k} = {fmt(getattr(self, k))}" for k in _TOP]
        for prefix in ("data", "model", "train"):
            lines += [f"{prefix}.{k} = {fmt(v)}" for k, v in getattr(self, prefix).items()]
        return lines

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "pca": self.pca, "data": dict(self.data), "model": dict(self.model), "train": dict(self.train)}


def parse_lines(lines, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{exc} ({source}:{lineno})") from None
    return cfg


def load(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides in order."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        parse_lines(text.splitlines(), cfg, str(path))
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"{item}: overrides must look like key=value")
        cfg.set(key.strip(), value)
    return cfg
