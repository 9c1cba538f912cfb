import math

import numpy as np
import pytest

from forde import data
from forde.gradkernel import pca_spec


def test_regression_gap_and_determinism():
    ds = data.gen_regression_1d(200, 0, clusters=((-1.0, -0.2), (0.2, 1.0)))
    assert not np.any((ds.x_raw > -0.2) & (ds.x_raw < 0.2))
    again = data.gen_regression_1d(200, 0, clusters=((-1.0, -0.2), (0.2, 1.0)))
    assert ds.X.tobytes() == again.X.tobytes() and ds.y.tobytes() == again.y.tobytes()
    np.testing.assert_allclose(ds.X, data.regression_features(ds.x_raw))
    with pytest.raises(ValueError):
        data.gen_regression_1d(1, 0)


def test_regression_noise_level():
    ds = data.gen_regression_1d(10_000, 1, noise_std=0.1)
    resid = ds.y - (np.sin(3 * ds.x_raw) + 0.3 * ds.x_raw)
    assert abs(resid.std() - 0.1) < 0.005


def test_moons_balance_and_separation():
    ds = data.gen_classification_2d(100, 0, noise=0.1)
    assert np.sum(ds.y == 0) == np.sum(ds.y == 1) == 100
    c0, c1 = ds.X[ds.y == 0].mean(0), ds.X[ds.y == 1].mean(0)
    assert np.linalg.norm(c0 - c1) > 4 * 0.1
    spec = data.CorruptionSpec("rotation2d", 0)
    assert data.corrupt(ds, spec).X.tobytes() == ds.X.tobytes()


def test_anisotropic_spectrum_and_basis():
    eig = np.array([4.0, 2.0, 1.0, 0.25, 0.0])
    ds = data.gen_anisotropic(100_000, 5, eig, 0)
    C = np.cov(ds.X.T)
    lam = np.sort(np.linalg.eigvalsh(C))[::-1]
    np.testing.assert_allclose(lam[:4], eig[:4], rtol=0.1)
    small = data.gen_anisotropic(10_000, 5, eig, 0)
    spec = pca_spec(small.X)
    Q = small.meta["basis"]
    for k in range(4):
        cos = abs(spec.basis[:, k] @ Q[:, k])
        assert math.degrees(math.acos(min(1.0, cos))) < 5


def test_anisotropic_labels_ignore_null_directions():
    eig = np.array([3.0, 2.0, 1.0, 0.0])
    ds = data.gen_anisotropic(500, 4, eig, 2)
    Q = ds.meta["basis"]
    Z = ds.X @ Q
    assert np.allclose(Z[:, 3], 0.0)
    # labels are a function of the top two latent coordinates only
    a, b = Z[:, 0] / math.sqrt(3), Z[:, 1] / math.sqrt(2)
    np.testing.assert_array_equal(ds.y, (a * b + 0.5 * (a + b) > 0).astype(int))
    assert 0.3 < ds.y.mean() < 0.7


def test_normalization_uses_train_stats_and_is_idempotent():
    tr = data.gen_classification_2d(50, 0)
    te = data.gen_classification_2d(20, 1, split="test")
    mean, std = data.fit_normalizer(tr)
    ntr, nte = tr.normalized(mean, std), te.normalized(mean, std)
    np.testing.assert_allclose(ntr.X.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(nte.X, (te.X - mean) / std)
    assert nte.normalized(mean, std) is nte
    with pytest.raises(ValueError):
        nte.normalized(mean + 1, std)


def test_idx_fixture_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (4, 28, 28), dtype=np.uint8)
    labs = np.array([3, 1, 4, 1], dtype=np.uint8)
    data.write_idx(tmp_path / "x.idx", imgs)
    data.write_idx(tmp_path / "y.idx", labs)
    assert (tmp_path / "x.idx").read_bytes()[:4] == b"\x00\x00\x08\x03"
    ds = data.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.X.shape == (4, 784) and len(ds.y) == 4
    np.testing.assert_array_equal(ds.X[0], imgs[0].ravel() / 255.0)
    np.testing.assert_array_equal(ds.y, labs)


def test_idx_errors(tmp_path):
    imgs = np.zeros((4, 28, 28), dtype=np.uint8)
    data.write_idx(tmp_path / "x.idx", imgs)
    data.write_idx(tmp_path / "y.idx", np.zeros(4, np.uint8))
    raw = (tmp_path / "x.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-10])
    with pytest.raises(data.DataFormatError, match=r"expected 3152 bytes.*got 3142"):
        data.load_idx(tmp_path / "short.idx", tmp_path / "y.idx")
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02" + raw[2:])
    with pytest.raises(data.DataFormatError, match="magic"):
        data.load_idx(tmp_path / "bad.idx", tmp_path / "y.idx")
    data.write_idx(tmp_path / "y3.idx", np.zeros(3, np.uint8))
    with pytest.raises(data.DataFormatError):
        data.load_idx(tmp_path / "x.idx", tmp_path / "y3.idx")


def test_csv_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(1)
    ds = data.Dataset(rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-8, 8, (20, 3)), rng.integers(0, 3, 20))
    data.write_csv(tmp_path / "d.csv", ds)
    back = data.load_csv(tmp_path / "d.csv", "label")
    assert back.X.tobytes() == ds.X.tobytes()
    np.testing.assert_array_equal(back.y, ds.y)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n1.0,2.0,0\n1.0,oops,1\n")
    with pytest.raises(data.DataFormatError, match=r"bad.csv:3: non-numeric cell 'oops'"):
        data.load_csv(p, "label")
    p.write_text("a,label\n1.0\n")
    with pytest.raises(data.DataFormatError, match=":2:"):
        data.load_csv(p, "label")
    p.write_text("a,b\n1,2\n")
    with pytest.raises(data.DataFormatError, match="label column"):
        data.load_csv(p, "label")


def test_corruption_properties():
    eig = np.array([4.0, 2.0, 0.5, 0.1])
    ds = data.gen_anisotropic(2000, 4, eig, 3, split="test")
    spec = pca_spec(ds.X)
    before = ds.X.copy()
    low = data.corrupt(ds, data.CorruptionSpec("lowvar_noise", 3, k=2), spec)
    np.testing.assert_allclose(low.X @ spec.basis[:, :2], ds.X @ spec.basis[:, :2], atol=1e-10)
    assert not np.allclose(low.X, ds.X)
    high = data.corrupt(ds, data.CorruptionSpec("highvar_noise", 3, k=2), spec)
    np.testing.assert_allclose(high.X @ spec.basis[:, 2:], ds.X @ spec.basis[:, 2:], atol=1e-10)
    np.testing.assert_array_equal(ds.X, before)
    for kind in data.CORRUPTIONS[:3]:
        assert data.corrupt(ds, data.CorruptionSpec(kind, 0), spec).X.tobytes() == ds.X.tobytes()
    with pytest.raises(ValueError):
        data.corrupt(ds, data.CorruptionSpec("lowvar_noise", 1))
    with pytest.raises(ValueError):
        data.CorruptionSpec("iso_noise", 6)


def test_iso_noise_variance_scales_with_severity_squared():
    ds = data.Dataset(np.zeros((50_000, 2)), np.zeros(50_000, int))
    added = [data.corrupt(ds, data.CorruptionSpec("iso_noise", s, sigma=0.1)).X.var() for s in (1, 2, 4)]
    np.testing.assert_allclose(np.array(added) / added[0], [1, 4, 16], rtol=0.05)


def test_rotation_and_parse():
    ds = data.Dataset(np.array([[1.0, 0.0]]), np.array([0]))
    out = data.corrupt(ds, data.CorruptionSpec.parse("rotation2d:2"))
    a = math.radians(10)
    np.testing.assert_allclose(out.X, [[math.cos(a), math.sin(a)]], atol=1e-15)
    assert data.CorruptionSpec.parse("iso_noise:4").severity == 4
