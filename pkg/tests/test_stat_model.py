import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracetime.delta_engine import ProbePair
from tracetime.errors import NotEnoughData
from tracetime.stat_model import (
    PairModel,
    QuantileVector,
    chi2_sf,
    fit_pair_model,
    load_models,
    mahalanobis_sq,
    pair_pvalue,
    quantile_levels,
    quantile_vector,
    save_models,
)

# chi2 survival of 16.919 with 9 dof, mpmath quadrature of the density at 30 digits
CHI2_9_AT_16_919 = 0.0499996408483498


def chi2_sf_quadrature(d2: float, k: int) -> float:
    mpmath.mp.dps = 30
    half = mpmath.mpf(k) / 2
    dens = lambda x: x ** (half - 1) * mpmath.e ** (-x / 2) / (2**half * mpmath.gamma(half))
    if d2 == 0:
        return 1.0
    if d2 < k + 10:
        return float(1 - mpmath.quad(dens, [0, d2]))
    return float(mpmath.quad(dens, [d2, mpmath.inf]))


def test_levels():
    assert quantile_levels(4) == pytest.approx([0.2, 0.4, 0.6, 0.8])
    assert quantile_levels(1) == pytest.approx([0.5])
    with pytest.raises(ValueError):
        quantile_levels(0)


def test_quantile_vector_examples():
    assert quantile_vector([5, 1, 9], 1).values.tolist() == [5.0]
    assert quantile_vector([7] * 20, 9).values.tolist() == [7.0] * 9
    with pytest.raises(NotEnoughData):
        quantile_vector([1, 2], 3)


@settings(max_examples=100, deadline=None)
@given(data=st.lists(st.integers(0, 10**9), min_size=9, max_size=200), q=st.integers(1, 9), seed=st.integers(0, 999))
def test_quantile_monotone_and_permutation_invariant(data, q, seed):
    v = quantile_vector(data, q).values
    assert np.all(np.diff(v) >= 0)
    shuffled = np.random.default_rng(seed).permutation(data)
    assert np.array_equal(quantile_vector(shuffled, q).values, v)


def test_fit_identical_vectors_degenerates_to_ridge():
    v = QuantileVector(np.array([1.0, 2.0, 3.0]))
    model = fit_pair_model([v, v])
    assert np.all(model.covariance == 0)
    assert model.ridge_used == 1e-12
    assert np.allclose(model.precision, np.eye(3) * 1e12)


def test_fit_needs_two_vectors():
    with pytest.raises(NotEnoughData):
        fit_pair_model([QuantileVector(np.zeros(3))])


def test_fit_rejects_mixed_pairs():
    a = QuantileVector(np.zeros(2), ProbePair.function("a"))
    b = QuantileVector(np.ones(2), ProbePair.function("b"))
    with pytest.raises(ValueError):
        fit_pair_model([a, b])


def test_fit_monte_carlo_diagonal_gaussian():
    rng = np.random.default_rng(5)
    sd = np.array([2.0, 5.0, 11.0])
    samples = rng.normal([10.0, 20.0, 30.0], sd, size=(10000, 3))
    model = fit_pair_model(samples)
    assert np.allclose(np.diag(model.covariance), sd**2, rtol=0.05)
    off = model.covariance[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) < 0.05 * np.outer(sd, sd)[~np.eye(3, dtype=bool)])
    assert model.n == 10000
    assert np.allclose(model.covariance, model.covariance.T)
    assert np.all(np.linalg.eigvalsh(model.precision) > 0)


def test_fit_is_order_invariant(rng):
    rows = rng.normal(size=(30, 4))
    a = fit_pair_model(rows)
    b = fit_pair_model(rows[::-1])
    assert np.allclose(a.mean, b.mean) and np.allclose(a.covariance, b.covariance)


def test_mahalanobis_examples():
    model = PairModel.from_covariance([1.0, 2.0], np.eye(2))
    assert mahalanobis_sq(np.array([1.0, 2.0]), model) == 0
    assert mahalanobis_sq(np.array([4.0, 6.0]), model) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        mahalanobis_sq(np.zeros(3), model)


def random_spd(rng, q):
    a = rng.normal(size=(q, q))
    return a @ a.T + q * np.eye(q) * rng.uniform(0.1, 1.0)


def test_mahalanobis_matches_linear_solve(rng):
    for _ in range(200):
        q = 3
        cov = random_spd(rng, q)
        mu = rng.normal(size=q)
        x = rng.normal(size=q) * 3
        model = PairModel.from_covariance(mu, cov)
        diff = x - mu
        oracle = diff @ np.linalg.solve(cov, diff)
        assert mahalanobis_sq(x, model) == pytest.approx(oracle, rel=1e-9)


def test_scale_equivariance_without_ridge(rng):
    rows = rng.gamma(5.0, 100.0, size=(40, 5))
    x = rng.gamma(5.0, 100.0, size=5)
    d = mahalanobis_sq(x, fit_pair_model(rows, ridge_abs=0, ridge_rel=0))
    scaled = mahalanobis_sq(x * 7.5, fit_pair_model(rows * 7.5, ridge_abs=0, ridge_rel=0))
    assert scaled == pytest.approx(d, rel=1e-9)


def test_chi2_sf_examples():
    assert chi2_sf(0.0, 5) == 1.0
    assert chi2_sf(2 * math.log(2), 2) == pytest.approx(0.5, abs=1e-15)
    assert chi2_sf(16.919, 9) == pytest.approx(CHI2_9_AT_16_919, abs=1e-8)
    assert chi2_sf(1e5, 9) == 0.0
    with pytest.raises(ValueError):
        chi2_sf(-1.0, 3)
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)


@pytest.mark.parametrize("q", [1, 2, 3, 7, 9, 16])
def test_chi2_sf_vs_quadrature(q):
    for d2 in [0.0, 0.3, 1.0, 4.5, 12.0, 33.3, 80.0, 100.0]:
        assert chi2_sf(d2, q) == pytest.approx(chi2_sf_quadrature(d2, q), abs=1e-8)


def test_chi2_sf_monotone():
    grid = np.linspace(0, 100, 2001)
    for q in (1, 4, 9, 16):
        assert np.all(np.diff(chi2_sf(grid, q)) <= 0)


def _train_model(rng, n=50, size=300, q=9):
    rows = [quantile_vector(rng.lognormal(7.0, 0.2, size), q).values for _ in range(n)]
    return fit_pair_model(rows)


def test_pair_pvalue_null_rarely_fires():
    rng = np.random.default_rng(17)
    model = _train_model(rng)
    p = np.array([pair_pvalue(rng.lognormal(7.0, 0.2, 300), model) for _ in range(1000)])
    assert np.mean(p > 1e-10) >= 0.99


def test_pair_pvalue_shift_detected():
    rng = np.random.default_rng(18)
    model = _train_model(rng)
    sigma = math.exp(7.0) * math.sqrt((math.exp(0.04) - 1) * math.exp(0.04))
    p = [pair_pvalue(rng.lognormal(7.0, 0.2, 300) + 10 * sigma, model) for _ in range(100)]
    assert max(p) < 1e-10


def test_pair_pvalue_short_input():
    model = PairModel.from_covariance(np.zeros(9), np.eye(9))
    with pytest.raises(NotEnoughData):
        pair_pvalue([1, 2, 3], model)


def test_model_json_round_trip(tmp_path, rng):
    pair = ProbePair.parse("iterate_dir-enter:iterate_dir-return")
    model = fit_pair_model([QuantileVector(r, pair) for r in rng.normal(size=(20, 9))])
    save_models({pair: model}, tmp_path / "m.json", q=9)
    loaded, meta = load_models(tmp_path / "m.json")
    m2 = loaded[pair]
    assert meta == {"q": 9}
    assert m2.n == 20 and m2.ridge_used == model.ridge_used
    assert np.array_equal(m2.covariance, model.covariance)
    assert np.allclose(m2.precision, model.precision, rtol=1e-12)
