import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridls.basis import discretize_basis, tensor_legendre_basis
from hybridls.domain import HyperRectangle, PointStream
from hybridls.sampler import (BoostingPolicy, adaptive_boost, boost, induced_cdf, induced_quantile,
                              leverage_probabilities, sample_induced_continuous, sample_induced_discrete,
                              write_design_csv)

from oracle_values import INDUCED_QUANTILE_D1


def line():
    return HyperRectangle((-1.0,), (1.0,))


def test_degree_zero_is_identity_map():
    assert induced_quantile(0.5, 0) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(induced_quantile([0.1, 0.7], 0), [-0.8, 0.4], atol=1e-12)


def test_degree_one_symmetric_median():
    assert induced_quantile(0.5, 1) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("u", sorted(INDUCED_QUANTILE_D1))
def test_degree_one_quantiles_match_oracle(u):
    assert induced_quantile(u, 1) == pytest.approx(INDUCED_QUANTILE_D1[u], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.floats(0.0, 1.0))
def test_quantile_inverts_cdf(D, u):
    t = induced_quantile(u, D)
    assert -1.0 <= t <= 1.0
    assert induced_cdf(t, D) == pytest.approx(u, abs=1e-12)


def test_cdf_matches_density_integral():
    # numerical integration of (1/(D+1)) sum (2k+1) P_k^2 / 2
    D = 4
    from hybridls.basis import legendre_normalized
    t, w = np.polynomial.legendre.leggauss(10)
    z = -0.35 + 0.65 * t
    dens = np.sum(legendre_normalized(z, D) ** 2, axis=1) / (D + 1) / 2
    assert induced_cdf(0.3, D) == pytest.approx(0.65 * np.sum(w * dens), abs=1e-12)


def test_unit_midpoint_degree_zero_design():
    b = tensor_legendre_basis(line(), 0)

    class Half(PointStream):
        def random(self, count):
            return np.full((count, 1), 0.5)

    d = sample_induced_continuous(b, 1, Half("iid", 1, seed=0))
    assert d.points[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_synthetic_design(square):
    b = tensor_legendre_basis(square, 6)
    d = sample_induced_continuous(b, 3 * b.n, PointStream.halton([2, 3]))
    assert d.m == 147 and d.n == 49
    assert d.V.shape == (147, 49)
    np.testing.assert_allclose(np.linalg.svd(d.weighted_matrix, compute_uv=False), d.singular_values, atol=1e-10)
    np.testing.assert_allclose(d.weights, 49 / d.phi)
    assert square.contains(d.points).all()


def test_continuous_rejects_non_tensor(rng):
    b = discretize_basis([lambda x: np.ones(len(x))], rng.random((4, 1)))
    with pytest.raises(ValueError):
        sample_induced_continuous(b, 3, PointStream.iid(1, 0))


def two_point_basis():
    grid = np.array([[0.0], [1.0]])
    return discretize_basis(lambda x: np.sqrt(np.where(x[:, :1] < 0.5, 1.5, 0.5)), grid)


def test_discrete_leverage_frequency():
    b = two_point_basis()
    p = leverage_probabilities(b)
    np.testing.assert_allclose(p, [0.75, 0.25])
    d = sample_induced_discrete(b, 100_000, PointStream.iid(1, 4))
    assert abs(np.mean(d.grid_indices == 0) - 0.75) < 0.01


def test_constant_basis_samples_uniformly(rng):
    grid = rng.random((10, 2))
    b = discretize_basis([lambda x: np.ones(len(x))], grid)
    np.testing.assert_allclose(leverage_probabilities(b), np.full(10, 0.1))
    assert leverage_probabilities(b).sum() == 1.0


def test_discrete_duplicates_kept():
    d = sample_induced_discrete(two_point_basis(), 50, PointStream.iid(1, 0))
    assert d.m == 50 and len(np.unique(d.grid_indices)) == 2


def test_weighted_quadrature_unbiased(square, rng):
    b = tensor_legendre_basis(square, 3)
    d = sample_induced_continuous(b, 10_000, PointStream.iid(2, 8))
    vals = d.V * np.sqrt(d.m)
    for _ in range(10):
        c = rng.standard_normal(b.n)
        est = np.mean(d.weights * (vals @ c) ** 2)
        assert abs(est / (c @ c) - 1) < 0.05


def test_embedding_implies_condition_bound(square):
    b = tensor_legendre_basis(square, 2)
    for seed in range(20):
        d = sample_induced_continuous(b, 20 * b.n, PointStream.sobol(2, seed))
        if d.in_embedding_event():
            A = d.weighted_matrix
            assert np.linalg.cond(A.T @ A) <= (1.1 / 0.9) ** 2 + 1e-12


def test_boost_single_trial_equals_plain_call(square):
    b = tensor_legendre_basis(square, 2)
    s = PointStream.iid(2, 3)
    plain = sample_induced_continuous(b, 20, s.replay())
    boosted = boost(lambda st_: sample_induced_continuous(b, 20, st_), BoostingPolicy(trials=1), s)
    assert np.array_equal(plain.points, boosted.points)
    assert boosted.trials == 1


def test_boost_rules(square):
    b = tensor_legendre_basis(square, 3)
    call = lambda st_: sample_induced_continuous(b, 40, st_)
    s = PointStream.iid(2, 21)
    best = boost(call, BoostingPolicy(10, 1.5, "min-cond"), s)
    conds = [call(s.replay() if t == 0 else s.spawn(t)).cond for t in range(10)]
    assert best.cond == pytest.approx(min(conds))
    first = boost(call, BoostingPolicy(10, 2.5), s)
    idx = next(i for i, c in enumerate(conds) if c < 2.5)
    assert first.trials == idx + 1 and first.cond == pytest.approx(conds[idx])
    missed = boost(call, BoostingPolicy(3, 1.0001), s)
    assert missed.threshold_missed and missed.cond == pytest.approx(min(conds[:3]))


def test_boosting_policy_validation():
    with pytest.raises(ValueError):
        BoostingPolicy(trials=0)
    with pytest.raises(ValueError):
        BoostingPolicy(cond_threshold=1.0)
    with pytest.raises(ValueError):
        BoostingPolicy(accept_rule="best")


def test_adaptive_boost_grows_until_success(square):
    b = tensor_legendre_basis(square, 3)
    d = adaptive_boost(lambda m, s: sample_induced_continuous(b, m, s), BoostingPolicy(5, 1.6),
                       PointStream.iid(2, 2), m0=b.n)
    assert d.cond < 1.6 and d.m >= b.n and not d.threshold_missed


def test_design_csv(tmp_path, square):
    b = tensor_legendre_basis(square, 1)
    d = sample_induced_continuous(b, 6, PointStream.iid(2, 0))
    path = tmp_path / "design.csv"
    write_design_csv(path, d)
    lines = open(path).read().splitlines()
    assert lines[0] == "x1,x2,weight" and len(lines) == 7
    side = json.load(open(str(path) + ".json"))
    assert side["cond"] == pytest.approx(d.cond)
