import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forde.autodiff import Graph
from forde.gradkernel import (
    H_FLOOR,
    LengthscaleSpec,
    batch_kernel,
    identity_spec,
    median_bandwidths,
    normalize_grads,
    pair_sq_dist,
    pairwise_sq_dists,
    pca_spec,
)
from forde.data import random_basis


def run(node):
    return node.graph.forward([node], {})[0]


def kernel_of(S, spec, **kw):
    g = Graph()
    return run(batch_kernel(g.const(S), spec, **kw).K)


def test_normalize_examples():
    g = Graph()
    out = run(normalize_grads(g.const(np.array([[3.0, 4.0], [0.0, 0.0]]))))
    np.testing.assert_allclose(out[0], [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])
    raw = np.random.default_rng(0).normal(size=5)
    raw *= 1e-13 / np.linalg.norm(raw)
    n = np.linalg.norm(run(normalize_grads(g.const(raw))))
    assert n == pytest.approx(1e-13 / math.sqrt(1e-26 + 1e-24), rel=1e-12)
    assert n == pytest.approx(0.0995, abs=1e-4)
    with pytest.raises(ValueError):
        normalize_grads(g.const(raw), eps=0.0)


def test_normalize_unit_rows():
    g = Graph()
    raw = np.random.default_rng(1).normal(size=(3, 4, 6))
    norms = np.linalg.norm(run(normalize_grads(g.const(raw))), axis=-1)
    assert np.all(norms <= 1 + 1e-9)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_pca_axis_aligned():
    X = np.zeros((6, 3))
    X[:, 0] = np.arange(6.0)
    spec = pca_spec(X)
    np.testing.assert_allclose(np.abs(spec.basis[:, 0]), [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(spec.eigvals[1:], 0.0, atol=1e-12)
    assert spec.eigvals[0] == pytest.approx(np.var(np.arange(6.0), ddof=1))


def test_pca_exact_constructed_covariance():
    # four points whose sample covariance is exactly diag(4, 1)
    a, b = math.sqrt(4 * 3 / 2), math.sqrt(3 / 2)
    X = np.array([[a, 0], [-a, 0], [0, b], [0, -b]]) + [2.0, -1.0]
    spec = pca_spec(X)
    np.testing.assert_allclose(spec.eigvals, [4.0, 1.0], rtol=1e-12)


def test_pca_reconstruction_and_sign():
    X = np.random.default_rng(2).normal(size=(50, 4)) @ np.diag([3, 2, 1, 0.5])
    spec = pca_spec(X)
    Xc = X - X.mean(0)
    C = Xc.T @ Xc / 49
    R = spec.basis @ np.diag(spec.eigvals) @ spec.basis.T
    assert np.max(np.abs(R - C)) <= 1e-8 * np.max(np.abs(C))
    assert np.all(np.diff(spec.eigvals) <= 0)
    piv = np.argmax(np.abs(spec.basis), axis=0)
    assert np.all(spec.basis[piv, range(4)] > 0)
    with pytest.raises(ValueError):
        pca_spec(X[:1])


def test_metric_endpoints():
    lam = np.array([5.0, 0.3, 0.0])
    U = random_basis(3, 0)
    np.testing.assert_array_equal(LengthscaleSpec(U, lam, alpha=0.0).metric(), 1.0)
    np.testing.assert_allclose(LengthscaleSpec(U, lam, alpha=1.0).metric(), lam)
    mid = LengthscaleSpec(U, lam, alpha=0.5).metric()
    np.testing.assert_allclose(mid, [1 / (0.1 + 0.5), 1 / (0.5 / 0.3 + 0.5), 0.0])
    assert np.all(np.isfinite(mid)) and np.all(mid >= 0)


def test_metric_monotone_in_alpha_along_large_eigvals():
    lam = np.array([10.0, 1.0, 0.1])
    vals = [LengthscaleSpec(np.eye(3), lam, alpha=a).metric() for a in (0, 0.2, 0.4, 0.8, 1.0)]
    first = [v[0] for v in vals]
    last = [v[2] for v in vals]
    assert first == sorted(first) and last == sorted(last, reverse=True)


def test_spec_validation():
    with pytest.raises(ValueError):
        LengthscaleSpec(np.ones((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        LengthscaleSpec(np.eye(2), np.ones(2), alpha=1.5)
    with pytest.raises(ValueError):
        LengthscaleSpec(np.eye(2), np.array([1.0, -1.0]))


def test_spec_json_roundtrip(tmp_path):
    spec = pca_spec(np.random.default_rng(3).normal(size=(20, 3)), alpha=0.4)
    spec.save(tmp_path / "s.json")
    back = LengthscaleSpec.load(tmp_path / "s.json")
    assert back.alpha == 0.4
    np.testing.assert_array_equal(back.basis, spec.basis)
    np.testing.assert_array_equal(back.eigvals, spec.eigvals)


def test_pair_sq_dist_examples():
    g = Graph()
    s = g.const(np.array([1.0, 0.0]))
    t = g.const(np.array([0.0, 1.0]))
    assert run(pair_sq_dist(s, s, identity_spec(2))) == 0.0
    assert run(pair_sq_dist(s, t, identity_spec(2))) == pytest.approx(1.0, abs=1e-15)
    spec = LengthscaleSpec(np.eye(2), np.array([2.0, 0.0]), alpha=1.0)
    assert run(pair_sq_dist(s, t, spec)) == pytest.approx(1.0, abs=1e-15)


def test_null_space_directions_ignored():
    U = random_basis(3, 1)
    spec = LengthscaleSpec(U, np.array([2.0, 1.0, 0.0]), alpha=1.0)
    g = Graph()
    s = np.array([0.3, -0.2, 0.5])
    assert run(pair_sq_dist(g.const(s), g.const(s + 0.7 * U[:, 2]), spec)) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_identity_metric_basis_invariant(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=4), rng.normal(size=4)
    g = Graph()
    ref = run(pair_sq_dist(g.const(s), g.const(t), LengthscaleSpec(np.eye(4), rng.uniform(size=4), alpha=0.0)))
    other = LengthscaleSpec(random_basis(4, seed), rng.uniform(size=4), alpha=0.0)
    assert abs(run(pair_sq_dist(g.const(s), g.const(t), other)) - ref) < 1e-10


def test_pairwise_matches_pair_sq_dist():
    rng = np.random.default_rng(5)
    S = rng.normal(size=(3, 2, 4))
    spec = pca_spec(rng.normal(size=(30, 4)))
    g = Graph()
    d = run(pairwise_sq_dists(g.const(S), spec))
    for i in range(3):
        for j in range(3):
            for b in range(2):
                ref = run(pair_sq_dist(g.const(S[i, b]), g.const(S[j, b]), spec))
                assert abs(d[i, j, b] - ref) < 1e-12


def test_median_examples():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])[..., None]
    assert median_bandwidths(d, 2)[0] == pytest.approx(2 / (2 * math.log(2)))
    assert median_bandwidths(np.zeros((3, 3, 2)), 3).tolist() == [H_FLOOR, H_FLOOR]
    with pytest.raises(ValueError):
        median_bandwidths(np.zeros((1, 1, 1)), 1)


def test_median_brute_force():
    rng = np.random.default_rng(6)
    A = rng.uniform(size=(3, 3, 5))
    d = A + A.transpose(1, 0, 2)
    for k in range(3):
        d[k, k] = 0
    h = median_bandwidths(d, 3)
    for b in range(5):
        vals = sorted(d[:, :, b].ravel())
        assert h[b] == vals[len(vals) // 2] / (2 * math.log(3))


def test_kernel_examples():
    S = np.tile(np.random.default_rng(0).normal(size=(1, 3, 2)), (4, 1, 1))
    np.testing.assert_array_equal(kernel_of(S, identity_spec(2)), 1.0)
    # two unit directions with d = 2 under the identity metric: s and -s
    S2 = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    K = kernel_of(S2, identity_spec(2))
    assert K[0, 1] == pytest.approx(0.25, rel=1e-14)


def test_kernel_brute_force_loop():
    rng = np.random.default_rng(7)
    S = rng.normal(size=(3, 4, 5))
    spec = pca_spec(rng.normal(size=(40, 5)) * [3, 2, 1, 1, 0.2], alpha=0.8)
    K = kernel_of(S, spec)
    metric, U = spec.metric(), spec.basis
    d = np.zeros((3, 3, 4))
    for i in range(3):
        for j in range(3):
            for b in range(4):
                z = U.T @ (S[i, b] - S[j, b])
                d[i, j, b] = 0.5 * np.sum(metric * z * z)
    h = [sorted(d[:, :, b].ravel())[4] / (2 * math.log(3)) for b in range(4)]
    for i in range(3):
        for j in range(3):
            ref = np.mean([math.exp(-d[i, j, b] / h[b]) for b in range(4)])
            assert abs(K[i, j] - ref) < 1e-14


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.floats(0.0, 1.0))
def test_kernel_invariants(seed, M, alpha):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(M, 3, 4))
    spec = pca_spec(rng.normal(size=(20, 4)) * [2, 1, 0.5, 0.1], alpha=alpha)
    g = Graph()
    K = run(batch_kernel(normalize_grads(g.const(raw)), spec).K)
    np.testing.assert_allclose(K, K.T, atol=1e-10)
    np.testing.assert_allclose(np.diag(K), 1.0, atol=1e-10)
    assert np.all(K > 0) and np.all(K <= 1.0)
    Kc = run(batch_kernel(normalize_grads(g.const(raw * 123.4)), spec).K)
    assert np.max(np.abs(Kc - K)) < 1e-6
    perm = rng.permutation(M)
    Kp = run(batch_kernel(normalize_grads(g.const(raw[perm])), spec).K)
    np.testing.assert_array_equal(Kp, K[np.ix_(perm, perm)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dimensionwise_repulsion_identity(seed):
    # with h = 1 and U = I, d kappa / d s_d = -(s_d - s'_d) * metric_d * kappa
    rng = np.random.default_rng(seed)
    D = int(rng.integers(2, 6))
    spec = LengthscaleSpec(np.eye(D), rng.uniform(0.1, 3.0, D), alpha=1.0)
    s0, t0 = rng.normal(size=D), rng.normal(size=D)
    g = Graph()
    s = g.input((D,))
    kappa = g.exp(g.neg(pair_sq_dist(s, g.const(t0), spec)))
    (gs,) = g.backward(kappa, [s])
    k, grad = g.forward([kappa, gs], {s: s0})
    np.testing.assert_allclose(grad, -(s0 - t0) * spec.metric() * k, rtol=1e-8, atol=0)


def test_bandwidth_has_no_gradient():
    rng = np.random.default_rng(8)
    S0 = rng.normal(size=(3, 2, 3))
    g = Graph()
    S = g.input(S0.shape)
    km = batch_kernel(S, identity_spec(3))
    h0 = g.forward([km.bandwidths], {S: S0})[0]
    (auto,) = g.backward(g.sum(km.K), [S])
    fixed = batch_kernel(S, identity_spec(3), bandwidths=h0)
    (ref,) = g.backward(g.sum(fixed.K), [S])
    a, r = g.forward([auto, ref], {S: S0})
    np.testing.assert_array_equal(a, r)
