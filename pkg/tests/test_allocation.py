import json

import numpy as np
import pytest

from hybridls.allocation import (Allocation, NoiseProfile, a_optimal_allocation, allocate, condition_J,
                                 gradient_H, hessian_H, integer_counts, kkt_residual, neyman_allocation,
                                 objective_G, objective_H, project_shifted_simplex, support_sparsity,
                                 uniform_allocation, write_allocation_csv)
from hybridls.basis import christoffel, tensor_legendre_basis
from hybridls.domain import PointStream, quadrature_integral
from hybridls.errors import RankDeficiencyError
from hybridls.harness import synthetic_noise_std
from hybridls.sampler import SampleDesign, sample_induced_continuous

from conftest import orthonormal_design


def plain(w, phi, sigma):
    return SampleDesign.from_arrays(w, phi), NoiseProfile(np.asarray(sigma, float) ** 2)


def test_neyman_examples():
    d, nz = plain([1, 1], [1, 1], [1, 2])
    np.testing.assert_allclose(neyman_allocation(d, nz).p, [1 / 3, 2 / 3])
    d, nz = plain([1, 1, 1], [1, 1, 1], [1, 1, 4])
    np.testing.assert_allclose(neyman_allocation(d, nz).p, [1 / 6, 1 / 6, 2 / 3])
    d, nz = plain([4, 1, 0.25], [0.25, 4, 64], [3, 3, 3])
    np.testing.assert_allclose(neyman_allocation(d, nz).p, np.full(3, 1 / 3))


def test_objective_G_examples():
    d, nz = plain([1, 1], [1, 1], [1, 2])
    assert objective_G([0.5, 0.5], d, nz) == pytest.approx(2.5)
    ney = neyman_allocation(d, nz)
    assert ney.objective_value == pytest.approx(2.25)
    assert objective_G([1.0, 0.0], d, nz) == np.inf
    assert objective_G([0.5, 0.5], d, nz, L=10) == pytest.approx(0.25)


def test_noise_profile_validation():
    with pytest.raises(ValueError):
        NoiseProfile([1.0, 0.0])
    with pytest.raises(ValueError):
        NoiseProfile([1.0, np.nan])
    with pytest.raises(ValueError):
        neyman_allocation(SampleDesign.from_arrays([1, 1], [1, 1]), NoiseProfile([1.0]))


def toy():
    return plain([1, 1], [1, 1], [1, 2])


def test_toy_a_optimal():
    d, nz = toy()
    q = a_optimal_allocation(d, nz, 1, 0.1)
    np.testing.assert_allclose(q.p, [0.9, 0.1], atol=1e-12)
    assert q.objective_value == pytest.approx(1 / 0.925, rel=1e-12)
    assert q.kind == "a-optimal" and not q.tolerance_missed
    assert support_sparsity(q)[0] == 1


def test_a_optimal_symmetric_instance_is_uniform():
    # rows of equal leverage: vertices of a regular octagon
    t = 2 * np.pi * np.arange(8) / 8
    R = np.column_stack([np.cos(t), np.sin(t)]) / 2
    d = SampleDesign.from_arrays(np.ones(8), 8 * np.sum(R ** 2, 1), R)
    q = a_optimal_allocation(d, NoiseProfile(np.ones(8)), 100, 0.01)
    np.testing.assert_allclose(q.p, np.full(8, 1 / 8), atol=1e-8)


def test_a_optimal_rejects_bad_inputs(rng):
    d, nz = toy()
    with pytest.raises(ValueError):
        a_optimal_allocation(d, nz, 1, 0.6)
    with pytest.raises(ValueError):
        a_optimal_allocation(d, nz, 1, 0.0)
    V = np.ones((3, 2))
    dd = SampleDesign.from_arrays(np.ones(3), np.full(3, 2.0), V)
    with pytest.raises(RankDeficiencyError):
        a_optimal_allocation(dd, NoiseProfile(np.ones(3)), 1, 0.1)


def test_allocation_independent_of_budget(rng):
    d = orthonormal_design(rng, 15, 3)
    nz = NoiseProfile(rng.uniform(0.5, 2, 15))
    a = a_optimal_allocation(d, nz, 10, 0.01 / 15)
    b = a_optimal_allocation(d, nz, 10_000, 0.01 / 15)
    np.testing.assert_allclose(a.p, b.p, atol=1e-7)
    assert b.objective_value == pytest.approx(a.objective_value / 1000, rel=1e-9)


def test_support_sparsity_examples():
    assert support_sparsity(Allocation(np.full(4, 0.25), 0.25, "uniform")) == (0, 0)
    assert support_sparsity(Allocation(np.array([0.5, 0.3, 0.2 - 1e-8, 1e-8]), 0.0, "x")) == (4, 1)
    # one ulp above the bound after projection still counts as on the bound
    on_bound = np.array([0.1 + 1.4e-17, 0.1, 0.8 - 1.4e-17])
    assert support_sparsity(Allocation(on_bound, 0.1, "x")) == (1, 0)


def test_condition_J_examples():
    assert condition_J(*plain([2, 2], [1, 1], [1.5, 1.5])) == pytest.approx(1.0)
    assert condition_J(*plain([1, 4], [1, 1], [1, 1])) == pytest.approx(4.0)
    assert condition_J(*plain([0.5, 2], [1, 1], [1, 1])) == pytest.approx(4.0)


def test_gradient_matches_central_differences(rng):
    for _ in range(5):
        d = orthonormal_design(rng, 10, 3)
        nz = NoiseProfile(rng.uniform(0.3, 2, 10))
        p = rng.dirichlet(np.ones(10))
        g = gradient_H(p, d, nz, 7)
        h = 1e-6
        fd = np.empty(10)
        for i in range(10):
            e = np.zeros(10)
            e[i] = h
            fd[i] = (objective_H(p + e, d, nz, 7) - objective_H(p - e, d, nz, 7)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_hessian_matches_gradient_differences(rng):
    d = orthonormal_design(rng, 8, 2)
    nz = NoiseProfile(rng.uniform(0.3, 2, 8))
    p = rng.dirichlet(np.ones(8))
    Hm = hessian_H(p, d, nz)
    h = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = h
        col = (gradient_H(p + e, d, nz) - gradient_H(p - e, d, nz)) / (2 * h)
        np.testing.assert_allclose(Hm[:, i], col, rtol=1e-5, atol=1e-8 * np.abs(Hm).max())
    assert np.all(np.linalg.eigvalsh(Hm) > -1e-10 * np.abs(Hm).max())


def test_euler_identity_for_H(rng):
    # H is homogeneous of degree -1 in p
    d = orthonormal_design(rng, 9, 3)
    nz = NoiseProfile(rng.uniform(0.3, 2, 9))
    p = rng.dirichlet(np.ones(9))
    assert p @ gradient_H(p, d, nz) == pytest.approx(-objective_H(p, d, nz), rel=1e-10)


def test_projection_properties(rng):
    for _ in range(50):
        m = int(rng.integers(2, 30))
        delta = rng.uniform(0, 1 / m)
        v = rng.standard_normal(m) * 3
        p = project_shifted_simplex(v, delta)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert p.min() >= delta - 1e-15
        np.testing.assert_allclose(project_shifted_simplex(p, delta), p, atol=1e-14)
        # variational inequality against random feasible points
        q = delta + (1 - m * delta) * rng.dirichlet(np.ones(m))
        assert (v - p) @ (q - p) <= 1e-10
    np.testing.assert_allclose(project_shifted_simplex(np.arange(4.0), 0.25), np.full(4, 0.25))
    with pytest.raises(ValueError):
        project_shifted_simplex(np.ones(3), 0.5)


def test_kkt_residual_zero_at_toy_optimum():
    d, nz = toy()
    p = np.array([0.9, 0.1])
    H, g = objective_H(p, d, nz), gradient_H(p, d, nz)
    assert kkt_residual(p, g, H, 0.1) < 1e-15
    assert kkt_residual(np.array([0.5, 0.5]), gradient_H([0.5, 0.5], d, nz), H, 0.1) > 0.1


def test_integer_counts():
    c = integer_counts([1 / 3, 1 / 3, 1 / 3], 10)
    assert c.sum() == 10 and sorted(c) == [3, 3, 4]
    c = integer_counts([0.999, 0.001, 0.0], 50)
    np.testing.assert_array_equal(c, [49, 1, 0])
    assert integer_counts(np.full(7, 1 / 7), 7).tolist() == [1] * 7
    with pytest.raises(ValueError):
        integer_counts([0.5, 0.5], 1)


def test_allocate_dispatch():
    d, nz = toy()
    assert allocate("uniform", d, nz, 10).kind == "uniform"
    assert allocate("neyman", d, nz, 10).kind == "neyman"
    assert allocate("aopt", d, nz, 10, 0.1).kind == "a-optimal"
    with pytest.raises(ValueError):
        allocate("sdp", d, nz, 10)
    assert uniform_allocation(4).counts(8).tolist() == [2, 2, 2, 2]


def test_neyman_limit_approaches_l1_norm(square):
    # L G(p*) = (mean of w sigma sqrt(Phi))^2 converges to ||sigma sqrt(Phi)||_{L1}^2
    b = tensor_legendre_basis(square, 3)
    sigma = lambda x: 1.0 + x[:, 0] ** 2 + 0.5 * np.sin(3 * x[:, 1])
    target = quadrature_integral(lambda x: sigma(x) * np.sqrt(christoffel(b).phi(x)), b.measure, 64) ** 2
    errs = []
    for m in (1000, 10000):
        d = sample_induced_continuous(b, m, PointStream.sobol(2, 3))
        nz = NoiseProfile(sigma(d.points) ** 2)
        errs.append(abs(neyman_allocation(d, nz, 1).objective_value - target))
    assert errs[1] < errs[0] < 0.05 * target


def test_synthetic_a_optimal_sparsity(square):
    b = tensor_legendre_basis(square, 6)
    d = sample_induced_continuous(b, 3 * b.n, PointStream.halton([2, 3]))
    nz = NoiseProfile(synthetic_noise_std(d.points) ** 2)
    q = a_optimal_allocation(d, nz, 1000 * d.m, 0.01 / d.m)
    assert q.kkt_residual <= 1e-8
    count, slack = support_sparsity(q)
    assert count <= 1225 + slack
    # mass concentrates where the noise is small, near the centre
    centre = np.max(np.abs(d.points), axis=1) < 0.5
    assert q.p[centre].sum() > centre.mean()


def test_allocation_csv(tmp_path):
    d, nz = toy()
    q = a_optimal_allocation(d, nz, 1, 0.1)
    path = tmp_path / "alloc.csv"
    write_allocation_csv(path, q, d, 20)
    lines = open(path).read().splitlines()
    assert lines[0] == "index,x1,p,L_i"
    assert lines[1].endswith(",18") and lines[2].endswith(",2")
    assert json.load(open(str(path) + ".json"))["kind"] == "a-optimal"
