import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from duq.errors import DegenerateInputError, DomainError, EmptyInputError, InsufficientDataError
from duq.metrics import (
    auce,
    ause_rmse,
    calibration_levels,
    depth_metrics,
    interval_halfwidth_z,
    norm_ppf,
)
from duq.predictive import DepthRaster, GaussianPrediction


def gaussian(mean, sigma):
    mean = np.asarray(mean, dtype=np.float64)
    return GaussianPrediction.from_parts(mean, np.zeros_like(mean), np.broadcast_to(np.square(sigma), mean.shape))


# depth metrics

def test_identity_prediction():
    gt = np.array([[1.0, 2.5], [7.0, 0.3]])
    m = depth_metrics(gt, gt)
    assert (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) == (0.0, 0.0, 0.0, 0.0)
    assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)


def test_hand_evaluated():
    m = depth_metrics([1.0, 5.0], [2.0, 4.0])
    assert m.abs_rel == pytest.approx((1 / 2 + 1 / 4) / 2) == pytest.approx(0.375)
    assert m.sq_rel == pytest.approx((1 / 2 + 1 / 4) / 2)
    assert m.rmse == pytest.approx(1.0)
    assert m.rmse_log == pytest.approx(math.sqrt((math.log(2) ** 2 + math.log(1.25) ** 2) / 2))
    assert m.delta1 == 0.0  # ratios 2.0 and exactly 1.25 both fail the strict test
    assert m.delta2 == m.delta3 == 0.5  # 2.0 > 1.25**3


def test_delta_close_prediction():
    assert depth_metrics([1.9, 4.2], [2.0, 4.0]).delta1 == 1.0


def test_mask_and_errors():
    gt = DepthRaster(np.array([[2.0, 4.0]]), np.array([[True, False]]))
    assert depth_metrics([[2.0, 1000.0]], gt).rmse == 0.0
    assert depth_metrics([2.0, 9.0], [2.0, 4.0], valid=[True, False]).rmse == 0.0
    with pytest.raises(DomainError):
        depth_metrics([0.0], [1.0])
    with pytest.raises(EmptyInputError):
        depth_metrics([1.0], [np.nan])


# normal quantile

@pytest.mark.parametrize("p", [1e-300, 1e-20, 1e-5, 0.01, 0.02425, 0.1, 0.3, 0.5, 0.77, 0.975, 0.999999])
def test_norm_ppf_against_scipy(p):
    assert norm_ppf(p) == pytest.approx(norm.ppf(p), rel=1e-13, abs=1e-14)


@given(st.floats(1e-300, 1.0, exclude_max=True))
def test_norm_ppf_everywhere(p):
    assert norm_ppf(p) == pytest.approx(norm.ppf(p), rel=1e-12, abs=1e-13)


def test_norm_ppf_domain():
    for p in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(DomainError):
            norm_ppf(p)


def test_halfwidths():
    assert interval_halfwidth_z(0.95) == pytest.approx(1.959963984540054, rel=1e-14)
    assert interval_halfwidth_z(0.5) == pytest.approx(0.6744897501960817, rel=1e-14)
    # the 100% interval uses the smallest positive double as tail mass
    assert interval_halfwidth_z(1.0) == pytest.approx(-norm.ppf(np.finfo(float).tiny), rel=1e-12)


# AUCE

def coverage_loop(err, sigma):
    """Level by level, straight from the definition."""
    out = []
    for k in range(1, 101):
        p = k / 100
        z = -norm.ppf(max((1 - p) / 2, np.finfo(float).tiny))
        out.append(np.mean(np.abs(err) <= z * sigma))
    return np.array(out)


def test_levels():
    lv = calibration_levels()
    assert lv.size == 100 and lv[0] == 0.01 and lv[-1] == 1.0


def test_self_consistent_gaussian_is_calibrated():
    rng = np.random.default_rng(0)
    mu = rng.uniform(1, 10, 100_000)
    sigma = rng.uniform(0.05, 2.0, mu.size)
    gt = mu + sigma * rng.standard_normal(mu.size)
    assert auce(gaussian(mu, sigma), gt).auce < 0.02


def test_huge_sigma():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 5, 1000)
    c = auce(gaussian(gt + rng.normal(0, 1, gt.size), 1e9), gt)
    assert np.all(c.coverage == 1.0)
    assert c.auce == pytest.approx(0.495, abs=1e-12)


def test_tiny_sigma():
    rng = np.random.default_rng(2)
    gt = rng.uniform(1, 5, 1000)
    err = rng.choice([-1, 1], gt.size) * rng.uniform(1e-3, 1, gt.size)
    c = auce(gaussian(gt + err, 1e-12), gt)
    assert np.all(c.coverage == 0.0)
    assert c.auce == pytest.approx(0.505, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 300))
@settings(max_examples=50, deadline=None)
def test_coverage_matches_loop(seed, n):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=n)
    sigma = rng.uniform(0.1, 2, n)
    gt = mu + rng.standard_t(3, n)
    c = auce(gaussian(mu, sigma), gt)
    ref = coverage_loop(gt - mu, sigma)
    np.testing.assert_array_equal(c.coverage, ref)
    assert c.auce == pytest.approx(np.mean(np.abs(ref - calibration_levels())), abs=1e-15)
    assert np.all(np.diff(c.coverage) >= 0)


def test_auce_rejects_zero_variance():
    with pytest.raises(DomainError):
        auce(gaussian([1.0, 2.0], 0.0), [1.0, 2.0])


# AUSE

def sparsification_loop(unc, err):
    """Drop, re-sort and recompute at every fraction; no shared helpers."""
    n = err.size
    full = math.sqrt(sum(e * e for e in err) / n)

    def curve(key):
        order = sorted(range(n), key=lambda i: (-key[i], i))
        vals = []
        for k in range(100):
            drop = k * n // 100
            kept = [err[i] for i in order[drop:]]
            vals.append(math.sqrt(sum(e * e for e in kept) / len(kept)) / full)
        return np.array(vals)

    cu, co = curve(unc), curve(np.abs(err))
    return float(np.mean(cu - co))


def test_perfect_uncertainty():
    rng = np.random.default_rng(3)
    gt = rng.uniform(1, 5, 500)
    pred = gt + rng.normal(0, 0.3, gt.size)
    r = ause_rmse(np.abs(pred - gt), pred, gt)
    assert r.ause == 0.0
    assert np.all(r.error_curve == 0.0)
    assert r.curve_by_uncertainty[0] == r.curve_oracle[0] == 1.0
    np.testing.assert_array_equal(r.fractions, np.arange(100) / 100)


def test_constant_uncertainty():
    rng = np.random.default_rng(4)
    gt = rng.uniform(1, 5, 400)
    pred = gt + rng.normal(0, 0.3, gt.size)
    r = ause_rmse(np.ones(gt.size), pred, gt)
    assert np.all(r.error_curve >= 0)
    assert r.ause > 0


def test_reversed_order_against_loop():
    rng = np.random.default_rng(5)
    gt = rng.uniform(1, 5, 200)
    err = rng.normal(0, 0.5, 200)
    unc = np.empty(200)
    unc[np.argsort(np.abs(err))] = np.arange(200)[::-1]  # most certain where the error is largest
    r = ause_rmse(unc, gt + err, gt)
    assert r.ause == pytest.approx(sparsification_loop(unc, err), rel=1e-12)
    assert r.ause > 0.3


@given(st.integers(0, 2**32 - 1), st.integers(100, 400))
@settings(max_examples=60, deadline=None)
def test_ause_matches_loop_and_oracle_is_lower_envelope(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 5, n)
    err = rng.standard_t(2, n)
    unc = np.round(np.abs(err) + rng.normal(0, 0.5, n), 1)  # ties on purpose
    r = ause_rmse(unc, gt + err, gt)
    assert np.all(r.error_curve >= -1e-9)
    assert r.ause == pytest.approx(sparsification_loop(unc, err), rel=1e-9, abs=1e-12)


def test_ause_errors():
    with pytest.raises(InsufficientDataError):
        ause_rmse(np.ones(99), np.ones(99), np.ones(99) * 2)
    with pytest.raises(DegenerateInputError):
        ause_rmse(np.arange(100.0), np.ones(100), np.ones(100))
    with pytest.raises(DomainError):
        ause_rmse(np.full(100, np.inf), np.ones(100), np.ones(100) * 2)


# invariants

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_auce_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 500
    mu, sigma = rng.uniform(1, 5, n), rng.uniform(0.05, 1, n)
    gt = mu + rng.laplace(0, 0.3, n)
    p = rng.permutation(n)
    a, b = auce(gaussian(mu, sigma), gt), auce(gaussian(mu[p], sigma[p]), gt[p])
    assert np.array_equal(a.coverage, b.coverage) and a.auce == b.auce


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_delta_order_and_scale(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, 200)
    pred = gt * rng.lognormal(0, 0.3, 200)
    m, k = depth_metrics(pred, gt), depth_metrics(c * pred, c * gt)
    assert m.delta1 <= m.delta2 <= m.delta3
    assert (k.delta1, k.delta2, k.delta3) == (m.delta1, m.delta2, m.delta3)
    assert k.abs_rel == pytest.approx(m.abs_rel, rel=1e-12)
    assert k.rmse_log == pytest.approx(m.rmse_log, rel=1e-9, abs=1e-12)
    assert k.rmse == pytest.approx(c * m.rmse, rel=1e-12)
    assert k.sq_rel == pytest.approx(c * m.sq_rel, rel=1e-12)
