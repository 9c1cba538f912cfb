import pytest

from forde import config
from forde.config import ConfigError, RunConfig


def test_defaults_cover_every_train_field():
    cfg = RunConfig()
    t = cfg.train_config()
    assert t.seed == cfg.seed and t.method == cfg.train["method"]
    assert "train.seed" not in config.schema()


def test_parse_lines_and_overrides(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# moons run\nseed = 4\nmodel.hidden = 8, 8  # two layers\ntrain.epochs=3\ndata.normalize = yes\n")
    cfg = config.load(p, ["train.epochs=7", "train.alpha=0.25"])
    assert cfg.seed == 4 and cfg.model["hidden"] == (8, 8)
    assert cfg.train["epochs"] == 7 and cfg.train["alpha"] == 0.25 and cfg.data["normalize"] is True
    assert {"seed", "model.hidden", "train.epochs", "train.alpha"} <= cfg.explicit


def test_roundtrip_through_lines():
    cfg = config.load(None, ["data.eigvals=1,0.1", "data.dim=2", "data.kind=aniso", "train.lr_init=0.123456789"])
    back = config.parse_lines(cfg.to_lines())
    assert back.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "lines, pattern",
    [
        (["bogus = 1"], r"bogus: unknown key \(<config>:1\)"),
        (["train.epochs = many"], r"train.epochs: .*\(<config>:1\)"),
        (["", "seed 3"], r"<config>:2: expected 'key = value'"),
        (["data.normalize = maybe"], "expected a boolean"),
        (["train.nope = 1"], "train.nope: unknown key"),
    ],
)
def test_parse_errors_name_the_key(lines, pattern):
    with pytest.raises(ConfigError, match=pattern):
        config.parse_lines(lines)


def test_validate():
    for overrides, key in [
        (["data.kind=parquet"], "data.kind"),
        (["data.kind=csv"], "data.path"),
        (["data.kind=idx"], "data.images"),
        (["data.kind=aniso", "data.dim=3"], "data.eigvals"),
        (["data.n=0"], "data.n"),
        (["train.method=svgd"], "train"),
        (["model.activation=gelu"], "model"),
    ]:
        with pytest.raises(ConfigError, match=key):
            config.load(None, overrides).validate()
    with pytest.raises(ConfigError, match="key=value"):
        config.load(None, ["seed"])
