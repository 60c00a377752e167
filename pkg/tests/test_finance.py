import numpy as np
import pytest

from hybridls.domain import PointStream, generate_points
from hybridls.finance import (FINANCE_DOMAIN, STUDY_MATURITIES, STUDY_STRIKES, BSModel, QuoteGrid,
                              calibrate, degeneracy_probe, load_surrogate, margrabe_price, mc_reference,
                              payoff_field, payoff_oracle, read_quotes_csv, save_surrogate, spread_payoff,
                              spread_price_quadrature, synth_market, write_quotes_csv)
from hybridls.random_subspace import build_subspace, mc_average_baseline

from oracle_values import (MARGRABE_02_04_05_T025, MARGRABE_03_01_M03_T1, SPREAD_025_035_04_T120_K11,
                           SPREAD_03_01_M03_T05_K5)


def test_model_validation():
    with pytest.raises(ValueError):
        BSModel(sigma1=-0.1)
    with pytest.raises(ValueError):
        BSModel(rho=1.5)
    with pytest.raises(ValueError):
        BSModel(s0=(100.0, 0.0))


def test_study_grid():
    assert len(STUDY_MATURITIES) == 7 and STUDY_MATURITIES[0] == 10 / 252
    assert STUDY_STRIKES[0] == 1.0 and STUDY_STRIKES[-1] == 49.0 and len(STUDY_STRIKES) == 25
    assert FINANCE_DOMAIN.dim == 5


def test_payoff_at_zero_maturity(rng):
    K = np.array([0.0, 1.5, 4.0, 10.0])
    x = np.column_stack([np.zeros(4), K, np.full(4, 0.3), np.full(4, 0.1), np.full(4, -0.3)])
    np.testing.assert_allclose(spread_payoff(x, rng.standard_normal((4, 2))), np.maximum(4 - K, 0), atol=1e-12)


def test_perfect_correlation_drops_second_normal():
    x = np.array([[0.5, 2.0, 0.2, 0.2, 1.0]] * 2)
    z = np.array([[0.3, -2.0], [0.3, 5.0]])
    vals = spread_payoff(x, z)
    assert vals[0] == vals[1]


def test_field_matrix_matches_diagonal(rng):
    gen = payoff_field()
    x = generate_points(PointStream.iid(5, 1), 6, FINANCE_DOMAIN)
    params, fn = gen.realisations(6, rng)
    M = fn(x)
    assert M.shape == (6, 6) and (M >= 0).all()
    np.testing.assert_allclose(np.diag(M), gen.evaluate_diagonal(x, params))


def test_margrabe_oracle_values():
    assert margrabe_price(BSModel(0.3, 0.1, -0.3), 1.0) == pytest.approx(MARGRABE_03_01_M03_T1, rel=1e-12)
    assert margrabe_price(BSModel(0.2, 0.4, 0.5), 0.25) == pytest.approx(MARGRABE_02_04_05_T025, rel=1e-12)


def test_margrabe_degenerate_cases():
    assert margrabe_price(BSModel(0.2, 0.2, 1.0), 1.0) == pytest.approx(4.0)
    assert margrabe_price(BSModel(), 0.0) == 4.0
    assert margrabe_price(BSModel(), 1e-12) == pytest.approx(4.0, abs=1e-6)


def test_spread_quadrature_oracle_values():
    assert spread_price_quadrature(BSModel(0.3, 0.1, -0.3), 0.5, 5.0) == pytest.approx(SPREAD_03_01_M03_T05_K5, rel=1e-8)
    assert spread_price_quadrature(BSModel(0.25, 0.35, 0.4), 120 / 252, 11.0) == pytest.approx(
        SPREAD_025_035_04_T120_K11, rel=1e-8)


def test_quadrature_reduces_to_margrabe_at_zero_strike():
    for m in (BSModel(0.3, 0.1, -0.3), BSModel(0.45, 0.05, 0.8)):
        assert spread_price_quadrature(m, 0.7, 0.0) == pytest.approx(margrabe_price(m, 0.7), rel=1e-9)


def test_zero_strike_mc_matches_margrabe(rng):
    for _ in range(5):
        m = BSModel(*rng.uniform(0.05, 0.5, 2), rng.uniform(-1, 1))
        T = rng.uniform(0.05, 1.0)
        q = synth_market(m, [T], [0.0], 100_000, rng=rng)
        assert abs(q.prices[0, 0] - margrabe_price(m, T)) < 4 * q.std_errors[0, 0]


def test_market_properties():
    q = synth_market(BSModel(), mc_samples=50_000, seed=3)
    assert q.prices.shape == (7, 25) and (q.prices >= 0).all()
    steps = np.diff(q.prices, axis=1)
    assert np.all(steps <= 4 * np.hypot(q.std_errors[:, 1:], q.std_errors[:, :-1]))
    far = synth_market(BSModel(), [10 / 252], [1000.0], 10_000, seed=0)
    assert far.prices[0, 0] == 0.0
    again = synth_market(BSModel(), mc_samples=50_000, seed=3)
    assert np.array_equal(q.prices, again.prices)
    with pytest.raises(ValueError):
        synth_market(BSModel(), mc_samples=0)


def test_market_agrees_with_quadrature():
    m = BSModel(0.3, 0.1, -0.3)
    q = synth_market(m, [0.5], [5.0], 200_000, seed=9)
    assert abs(q.prices[0, 0] - SPREAD_03_01_M03_T05_K5) < 4 * q.std_errors[0, 0]


def test_doubling_samples_halves_variance():
    m = BSModel(0.3, 0.1, -0.3)
    exact = margrabe_price(m, 0.5)
    est_var, sq_err = {}, {}
    for n in (2000, 4000):
        qs = [synth_market(m, [0.5], [0.0], n, rng=r) for r in np.random.default_rng(n).spawn(400)]
        est_var[n] = np.mean([q.std_errors[0, 0] ** 2 for q in qs[:20]])
        sq_err[n] = np.mean([(q.prices[0, 0] - exact) ** 2 for q in qs])
    # the estimated variance over 20 replicates and the squared error against the
    # closed form over 400 replicates (20 replicates of a squared error are too noisy)
    assert 0.35 <= est_var[4000] / est_var[2000] <= 0.7
    assert 0.35 <= sq_err[4000] / sq_err[2000] <= 0.7


def test_mc_reference_points(rng):
    m = BSModel()
    x = np.array([m.point(0.5, 0.0), m.point(0.5, 5.0)])
    ref = mc_reference(x, 100_000, rng, m)
    assert ref[0] == pytest.approx(margrabe_price(m, 0.5), rel=0.02)
    assert ref[1] == pytest.approx(SPREAD_03_01_M03_T05_K5, rel=0.02)


def test_oracle_is_unbiased(rng):
    m = BSModel()
    pts = np.repeat(m.point(1.0, 0.0)[None, :], 100_000, axis=0)
    draws = payoff_oracle(m).draw(pts, rng)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - MARGRABE_03_01_M03_T1) < 4 * se


@pytest.fixture(scope="module")
def small_surrogate():
    rng = np.random.default_rng(0)
    grid = generate_points(PointStream.sobol(5, 1), 2 ** 12, FINANCE_DOMAIN)
    basis, cone, snaps = build_subspace(payoff_field(), 60, grid, rng)
    return mc_average_baseline(basis, 60), snaps


def self_quotes(sur, s1, s2, rho=-0.3):
    mats, ks = np.array(STUDY_MATURITIES), np.array(STUDY_STRIKES)
    q = QuoteGrid(mats, ks, np.zeros((7, 25)))
    q.prices = sur(q.points(s1, s2, rho)).reshape(7, 25)
    return q


@pytest.mark.parametrize("truth", [(0.3, 0.1), (0.22, 0.31), (0.41, 0.18)])
def test_self_calibration_recovers_parameters(small_surrogate, truth):
    sur, _ = small_surrogate
    res = calibrate(sur, self_quotes(sur, *truth))
    assert abs(res.sigma1 - truth[0]) <= 1e-4 and abs(res.sigma2 - truth[1]) <= 1e-4
    assert not res.tolerance_missed


def test_calibration_respects_bounds(small_surrogate):
    sur, _ = small_surrogate
    q = self_quotes(sur, 0.3, 0.1)
    q.prices = q.prices * 3.0
    res = calibrate(sur, q)
    assert 0.0 <= res.sigma1 <= 0.5 and 0.0 <= res.sigma2 <= 0.5


def test_truth_beats_initial_guess_for_accurate_surrogate(small_surrogate):
    sur, _ = small_surrogate
    q = synth_market(BSModel(), mc_samples=100_000, seed=1)

    def loss(s1, s2):
        r = sur(q.points(s1, s2, -0.3)) - q.prices.ravel()
        return float(r @ r) / r.size

    assert loss(0.3, 0.1) <= loss(0.2, 0.2)


def test_degeneracy_probe():
    m = BSModel()
    same = degeneracy_probe(m, (0.3, 0.1, -0.3), mc_samples=100_000, rng=np.random.default_rng(0))
    far = degeneracy_probe(m, (0.5, 0.5, -1.0), mc_samples=100_000, rng=np.random.default_rng(1))
    alt = degeneracy_probe(m, (0.32, 0.18, 0.14), mc_samples=100_000, rng=np.random.default_rng(2))
    assert far.max_difference > 4 * far.standard_error and far.max_difference > 1.0
    assert alt.max_difference < far.max_difference / 5
    assert same.differences.shape == (7, 25)
    # with independent samples the gap of identical models is pure noise
    assert same.max_difference < 5 * same.standard_error


def test_quotes_csv_round_trip(tmp_path):
    q = synth_market(BSModel(), [0.1, 0.5], [1.0, 3.0, 5.0], 1000, seed=4)
    write_quotes_csv(tmp_path / "q.csv", q)
    assert open(tmp_path / "q.csv").readline().strip() == "T,K,price,mc_samples,seed"
    back = read_quotes_csv(tmp_path / "q.csv")
    assert np.array_equal(back.prices, q.prices) and back.mc_samples == 1000 and back.seed == "4"
    np.testing.assert_array_equal(back.maturities, [0.1, 0.5])


def test_incomplete_quotes_rejected(tmp_path):
    path = tmp_path / "q.csv"
    path.write_text("T,K,price,mc_samples,seed\n0.1,1,2.0,10,0\n0.2,3,1.0,10,0\n")
    with pytest.raises(ValueError):
        read_quotes_csv(path)


def test_surrogate_persistence(tmp_path, small_surrogate, rng):
    sur, snaps = small_surrogate
    save_surrogate(sur, tmp_path, snaps.params, seed=0)
    back = load_surrogate(tmp_path)
    x = generate_points(PointStream.iid(5, 3), 20, FINANCE_DOMAIN)
    np.testing.assert_allclose(back(x), sur(x), rtol=1e-12, atol=1e-12)
    assert back.pipeline == "AVG" and not back.projected
