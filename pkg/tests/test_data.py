import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from divforge.data import (
    CorrelatedPairSpec,
    GaussianSpec,
    analytic_kl,
    analytic_mi,
    gaussian_pair_for_kl,
    log_density,
    make_rng,
    rho_for_mi,
    sample_gaussian,
)


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def test_spec_rejects_bad_covariances():
    with pytest.raises(ValueError):
        GaussianSpec(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianSpec(np.zeros(3), np.eye(2))
    with pytest.raises(ValueError):
        CorrelatedPairSpec(4, 1.0)


def test_same_seed_same_stream_and_streams_differ():
    a = make_rng(7, 1).standard_normal(5)
    b = make_rng(7, 1).standard_normal(5)
    c = make_rng(7, 2).standard_normal(5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_sample_mean_standard_normal():
    x = sample_gaussian(GaussianSpec.standard(2), 10**6, make_rng(0))
    assert np.all(np.abs(x.mean(axis=0)) <= 4 / math.sqrt(10**6))


def test_sample_variances_diagonal():
    x = sample_gaussian(GaussianSpec(np.zeros(2), np.diag([4.0, 1.0])), 10**6, make_rng(1))
    np.testing.assert_allclose(x.var(axis=0), [4.0, 1.0], rtol=0.02)


def test_sampling_deterministic():
    spec = GaussianSpec([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    assert sample_gaussian(spec, 10, make_rng(3)).tobytes() == sample_gaussian(spec, 10, make_rng(3)).tobytes()


def test_analytic_kl_examples():
    p = GaussianSpec.standard(2)
    assert analytic_kl(p, p) == 0.0
    assert analytic_kl(GaussianSpec.standard(1), GaussianSpec.standard(1, [1.0])) == pytest.approx(0.5, abs=1e-15)
    for target in (1.3, 13.8, 38.29):
        p, q = gaussian_pair_for_kl(target)
        assert analytic_kl(p, q) == pytest.approx(target, abs=1e-12)


def test_analytic_kl_matches_dense_inverse_formula():
    rng = np.random.default_rng(4)
    n = 4
    p = GaussianSpec(rng.standard_normal(n), random_spd(rng, n))
    q = GaussianSpec(rng.standard_normal(n), random_spd(rng, n))
    qi = np.linalg.inv(q.covariance)
    dm = q.mean - p.mean
    expected = 0.5 * (np.trace(qi @ p.covariance) + dm @ qi @ dm - n
                      + np.log(np.linalg.det(q.covariance) / np.linalg.det(p.covariance)))
    assert analytic_kl(p, q) == pytest.approx(expected, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_analytic_kl_non_negative_and_rotation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    p = GaussianSpec(rng.standard_normal(n), random_spd(rng, n))
    q = GaussianSpec(rng.standard_normal(n), random_spd(rng, n))
    kl = analytic_kl(p, q)
    assert kl > 0
    r = ortho_group.rvs(n, random_state=seed) if n > 1 else np.array([[-1.0]])
    rot = lambda s: GaussianSpec(r @ s.mean, r @ s.covariance @ r.T)
    assert analytic_kl(rot(p), rot(q)) == pytest.approx(kl, abs=1e-10)


def test_analytic_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        analytic_kl(GaussianSpec.standard(2), GaussianSpec.standard(3))


def test_analytic_mi_and_rho_examples():
    assert analytic_mi(CorrelatedPairSpec(20, 0.0)) == 0.0
    assert analytic_mi(CorrelatedPairSpec(20, 0.5)) == pytest.approx(-10 * math.log(0.75), abs=1e-12)
    assert analytic_mi(CorrelatedPairSpec(20, 0.5)) == pytest.approx(2.8768, abs=1e-4)
    assert rho_for_mi(20, 0.0) == 0.0
    assert rho_for_mi(20, 2.0) == pytest.approx(0.425757, abs=1e-6)
    assert rho_for_mi(20, 10.0) == pytest.approx(0.79506, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(0.0, 1.0))
def test_mi_round_trip(d, per_dim):
    # beyond ~1 nat per dimension rho rounds so close to 1 that 1 - rho^2 loses digits
    target = per_dim * d
    assert analytic_mi(CorrelatedPairSpec(d, rho_for_mi(d, target))) == pytest.approx(target, abs=1e-12)


def test_correlated_pairs_have_requested_correlation():
    spec = CorrelatedPairSpec(3, 0.6)
    x, y = spec.sample(200_000, make_rng(5))
    for i in range(3):
        assert np.corrcoef(x[:, i], y[:, i])[0, 1] == pytest.approx(0.6, abs=0.01)
    assert abs(np.corrcoef(x[:, 0], y[:, 1])[0, 1]) < 0.01


def test_log_density_examples():
    assert log_density(GaussianSpec.standard(1), [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_density(GaussianSpec.standard(2), [0.0, 0.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_log_density_matches_dense_inverse():
    rng = np.random.default_rng(6)
    n = 3
    spec = GaussianSpec(rng.standard_normal(n), random_spd(rng, n))
    xs = rng.standard_normal((5, n))
    inv = np.linalg.inv(spec.covariance)
    det = np.linalg.det(spec.covariance)
    expected = [-0.5 * (n * math.log(2 * math.pi) + math.log(det) + (x - spec.mean) @ inv @ (x - spec.mean)) for x in xs]
    np.testing.assert_allclose(log_density(spec, xs), expected, atol=1e-10, rtol=0)


def test_mean_log_density_is_negative_entropy():
    spec = GaussianSpec([0.5, -1.0], [[2.0, 0.4], [0.4, 0.5]])
    x = sample_gaussian(spec, 10**6, make_rng(8))
    ld = log_density(spec, x)
    neg_entropy = -0.5 * (2 * math.log(2 * math.pi * math.e) + spec.log_det())
    assert abs(ld.mean() - neg_entropy) <= 3 * ld.std() / math.sqrt(ld.size)
