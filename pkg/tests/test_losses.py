import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duq.errors import DomainError, EmptyInputError, ShapeError
from duq.losses import laplace_nll, laplace_nll_grad
from duq.predictive import DepthRaster


def scalar_nll(d, dhat, sigma):
    """Pixel-by-pixel reference."""
    total = 0.0
    for a, b, s in zip(d, dhat, sigma):
        total += abs(a - b) / s + math.log(s)
    return total / len(d)


def test_perfect_prediction():
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert laplace_nll(d, np.ones_like(d), d) == 0.0


def test_single_pixel():
    assert laplace_nll([1.0], [0.5], [2.0]) == pytest.approx(2 - math.log(2), abs=1e-12)
    assert laplace_nll([1.0], [0.5], [2.0]) == pytest.approx(1.30685, abs=1e-5)


def test_two_pixels():
    v = laplace_nll([1.0, 1.0], [1.0, math.e], [1.0, 2.0])
    assert v == pytest.approx(scalar_nll([1.0, 2.0], [1.0, 1.0], [1.0, math.e]), abs=1e-15)
    assert v == pytest.approx(0.68394, abs=1e-5)


def test_invalid_pixels_ignored():
    gt = DepthRaster(np.array([[2.0, 9.0]]), np.array([[True, False]]))
    assert laplace_nll([[1.0, 100.0]], [[0.5, 1e-9]], gt) == pytest.approx(2 - math.log(2))
    assert laplace_nll([1.0, 100.0], [0.5, 1e-9], [2.0, np.nan]) == pytest.approx(2 - math.log(2))
    gm, gr = laplace_nll_grad([[1.0, 100.0]], [[0.0, 0.0]], gt)
    assert gm[0, 1] == 0.0 and gr[0, 1] == 0.0


def test_errors():
    with pytest.raises(DomainError):
        laplace_nll([1.0], [0.0], [1.0])
    with pytest.raises(ShapeError):
        laplace_nll([1.0, 2.0], [1.0], [1.0, 2.0])
    with pytest.raises(ShapeError):
        laplace_nll([1.0, 2.0], [1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(EmptyInputError):
        laplace_nll([1.0], [1.0], [np.nan])


def test_kink_and_stationary_point():
    gm, gr = laplace_nll_grad([2.0, 1.0], [0.0, math.log(3.0)], [2.0, 4.0])
    assert gm[0] == 0.0  # zero residual
    assert gr[1] == pytest.approx(0.0, abs=1e-15)  # |r| = sigma


def test_gradient_closed_form():
    gm, gr = laplace_nll_grad([1.0, 5.0], [0.0, math.log(2.0)], [3.0, 4.0])
    np.testing.assert_allclose(gm, [-0.5, 0.25])
    np.testing.assert_allclose(gr, [(1 - 2.0) / 2, (1 - 0.5) / 2])


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    gt = rng.uniform(0.5, 5.0, shape)
    mean = gt + rng.choice([-1, 1], shape) * rng.uniform(1e-3, 2.0, shape)
    raw = rng.normal(0, 0.7, shape)
    gm, gr = laplace_nll_grad(mean, raw, gt)
    fm = central_diff(lambda m: laplace_nll(m, np.exp(raw), gt), mean)
    fr = central_diff(lambda r: laplace_nll(mean, np.exp(r), gt), raw)
    np.testing.assert_allclose(gm, fm, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(gr, fr, rtol=1e-5, atol=1e-9)


@given(st.floats(0.1, 10), st.floats(-3, 3))
def test_nll_minimised_at_sigma_equal_abs_residual(r, log_s):
    # for fixed |r| > 0 the per-pixel loss r/s + log s is smallest at s = r
    assert laplace_nll([0.0], [r], [r]) <= laplace_nll([0.0], [math.exp(log_s)], [r]) + 1e-12


def test_layout_invariance():
    rng = np.random.default_rng(7)
    gt = rng.uniform(1, 4, (5, 3))
    mean = gt + rng.normal(0, 0.3, gt.shape)
    sigma = rng.uniform(0.1, 1, gt.shape)
    a = laplace_nll(mean, sigma, gt)
    assert laplace_nll(mean.T, sigma.T, gt.T) == pytest.approx(a, rel=1e-14)
    assert laplace_nll(mean.ravel(), sigma.ravel(), gt.ravel()) == pytest.approx(a, rel=1e-14)


@pytest.mark.parametrize("r", [0.05, 0.7, 3.0])
def test_grid_search_minimum(r):
    grid = np.exp(np.linspace(-6, 3, 20001))
    losses = [laplace_nll([0.0], [s], [r]) for s in grid]
    assert grid[int(np.argmin(losses))] == pytest.approx(r, rel=1e-3)
