import math

import numpy as np
import pytest

from implicit_lra.cluster import Cluster
from implicit_lra.linalg import DimensionError, additive_error, frobenius_sq
from implicit_lra.rff import RffSpec, default_features, rff_expand, uniform_row_pca, uniform_row_run


def forest_like(n=5000, m=10, seed=0):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, m)) @ np.diag(np.linspace(0.1, 0.6, m))
    return X


def test_default_features():
    assert default_features(10) == 512
    assert default_features(10 ** 40) == math.ceil(8 * math.log(10 ** 40))


def test_spec_reconstructible_from_seed():
    a, b = RffSpec(3, 16, 5), RffSpec(3, 16, 5)
    np.testing.assert_array_equal(a.Z, b.Z)
    np.testing.assert_array_equal(a.b, b.b)
    assert not np.array_equal(a.Z, RffSpec(3, 16, 6).Z)
    assert np.all((a.b >= 0) & (a.b < 2 * np.pi))
    with pytest.raises(ValueError):
        RffSpec(0, 4, 1)


def test_zero_row_and_bounds():
    spec = RffSpec(4, 600, 2)
    np.testing.assert_allclose(rff_expand(np.zeros(4), spec), math.sqrt(2) * np.cos(spec.b))
    F = rff_expand(np.random.default_rng(1).standard_normal((50, 4)) * 5, spec)
    assert np.all(np.abs(F) <= math.sqrt(2))
    assert abs(np.mean(F ** 2) - 1) <= 0.05
    with pytest.raises(DimensionError):
        rff_expand(np.zeros(3), spec)


def test_kernel_fidelity():
    # per feature, 2 cos(u) cos(v) has mean K(x, y) and variance
    # (1 + K(2x, 2y)) / 2 - K(x, y)^2 + 1/2; compare each pair to its own error bar
    m, d = 5, 2048
    spec = RffSpec(m, d, 3)
    r = np.random.default_rng(2)
    devs = []
    for _ in range(100):
        x = r.standard_normal(m)
        step = r.standard_normal(m)
        y = x + step / np.linalg.norm(step) * r.uniform(0, 3)
        dist2 = float(np.sum((x - y) ** 2))
        K = math.exp(-dist2 / 2)
        sd = math.sqrt(((1 + math.exp(-2 * dist2)) / 2 - K * K + 0.5) / d)
        est = rff_expand(x, spec) @ rff_expand(y, spec) / d
        devs.append((est - K) / sd)
    devs = np.array(devs)
    assert np.max(np.abs(devs)) <= 4.5
    assert abs(np.mean(devs)) <= 4.5 / math.sqrt(100)
    assert 0.5 <= np.std(devs) <= 1.5


def test_row_norm_concentration():
    spec = RffSpec(6, 512, 4)
    F = rff_expand(np.random.default_rng(3).standard_normal((1000, 6)) * 2, spec)
    sq = np.sum(F ** 2, axis=1)
    assert np.all((sq >= 0.8 * 512) & (sq <= 1.2 * 512))


def test_single_row_is_exact():
    X = np.random.default_rng(4).standard_normal((1, 3))
    spec = RffSpec(3, 64, 1)
    P = uniform_row_pca(Cluster([X]), spec, 1, 5)
    assert abs(additive_error(rff_expand(X, spec), P)) <= 1e-9


def test_uniform_sampling_pca_forest_style():
    X = forest_like()
    r = np.random.default_rng(5)
    shares = [r.standard_normal(X.shape), None]
    shares[1] = X - shares[0]
    c = Cluster(shares)
    spec = RffSpec(10, 512, 7)
    k, rr = 10, 1000
    run = uniform_row_run(c, spec, k, rr, seed=3)
    A = rff_expand(c.aggregate(), spec)
    assert additive_error(A, run.projection) <= k * k / rr
    norms = np.sum(A ** 2, axis=1)
    assert np.min(A.shape[0] * norms / frobenius_sq(A)) >= 0.8
    assert c.total_words() == rr + 2 * rr * 10
    np.testing.assert_allclose(run.samples.q_hat, 1 / 5000)


def test_uniform_run_checks_inputs():
    c = Cluster([np.zeros((5, 3))])
    with pytest.raises(DimensionError):
        uniform_row_run(c, RffSpec(4, 8, 0), 1, 2)
    with pytest.raises(ValueError):
        uniform_row_run(c, RffSpec(3, 8, 0), 3, 2)
