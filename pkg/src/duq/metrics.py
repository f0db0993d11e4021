"""Depth error metrics plus calibration (AUCE) and sparsification (AUSE) scores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from duq.errors import DegenerateInputError, DomainError, EmptyInputError, InsufficientDataError, ShapeError
from duq.predictive import DepthRaster, GaussianPrediction

N_LEVELS = 100
N_FRACTIONS = 100

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

# Tail probability standing in for the 100% interval, which would be unbounded.
_MIN_TAIL = np.finfo(np.float64).tiny


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
           (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def norm_ppf(p: float) -> float:
    """Standard normal quantile for 0 < p < 1.

    Acklam's approximation (relative error ~1.2e-9) followed by one Halley
    step against ``erfc``, which brings it to near machine precision.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile probability must lie in (0, 1), got {p}")
    if p > 0.5:
        return -norm_ppf(1.0 - p)
    x = _acklam(p)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def interval_halfwidth_z(level: float) -> float:
    """z such that the central interval mean +/- z*sigma has the given coverage."""
    tail = max((1.0 - level) / 2.0, _MIN_TAIL)
    return -norm_ppf(tail)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationCurve:
    levels: np.ndarray
    coverage: np.ndarray
    auce: float


@dataclass(frozen=True)
class SparsificationResult:
    fractions: np.ndarray
    curve_by_uncertainty: np.ndarray
    curve_oracle: np.ndarray
    error_curve: np.ndarray
    ause: float


def _flatten_valid(gt, *rasters, valid=None):
    if isinstance(gt, DepthRaster):
        d, mask = gt.values, gt.valid
    else:
        d = np.asarray(gt, dtype=np.float64)
        mask = np.isfinite(d)
    if valid is not None:
        mask = mask & np.asarray(valid, dtype=bool).reshape(d.shape)
    out = []
    for r in rasters:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != d.shape:
            if r.size != d.size:
                raise ShapeError(f"raster shape {r.shape} != target shape {d.shape}")
            r = r.reshape(d.shape)
        out.append(r[mask])
    return d[mask], out


def depth_metrics(pred, gt, valid=None) -> DepthMetrics:
    d, (p,) = _flatten_valid(gt, pred, valid=valid)
    if d.size == 0:
        raise EmptyInputError("no valid pixels")
    if np.any(p <= 0) or np.any(d <= 0):
        raise DomainError("depth metrics need positive prediction and target on valid pixels")
    diff = d - p
    ratio = np.maximum(d / p, p / d)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / d)),
        sq_rel=float(np.mean(diff**2 / d)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(p)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def calibration_levels(n: int = N_LEVELS) -> np.ndarray:
    return np.arange(1, n + 1) / n


def auce(pred: GaussianPrediction, gt, valid=None) -> CalibrationCurve:
    """Area under the calibration error curve over 100 central Gaussian intervals.

    ``levels[k] = (k+1)/100``; coverage is the fraction of valid pixels whose
    absolute error is within ``z_k * sigma_total``.
    """
    d, (mu, var) = _flatten_valid(gt, pred.mean, pred.var_total, valid=valid)
    if d.size == 0:
        raise EmptyInputError("no valid pixels")
    if np.any(~(var > 0)):
        raise DomainError("total variance must be > 0 on valid pixels; clamp sigma first")
    return _auce_from_errors(np.abs(d - mu), np.sqrt(var))


def _auce_from_errors(abs_err: np.ndarray, sigma: np.ndarray) -> CalibrationCurve:
    levels = calibration_levels()
    # standardized error: covered at level p iff |e|/sigma <= z_p
    t = np.sort(abs_err / sigma)
    zs = np.array([interval_halfwidth_z(p) for p in levels])
    coverage = np.searchsorted(t, zs, side="right") / t.size
    return CalibrationCurve(levels, coverage, float(np.mean(np.abs(levels - coverage))))


def _removal_order(keys: np.ndarray) -> np.ndarray:
    # descending key, ties by ascending index
    return np.lexsort((np.arange(keys.size), -keys))


def _retained_rmse_curve(sq_err_in_removal_order: np.ndarray, n_steps: int) -> np.ndarray:
    n = sq_err_in_removal_order.size
    # suffix sums: tail[i] = sum of entries i..n-1
    tail = np.concatenate([np.cumsum(sq_err_in_removal_order[::-1])[::-1], [0.0]])
    removed = (np.arange(n_steps) * n) // n_steps
    kept = n - removed
    return np.sqrt(tail[removed] / kept)


def ause_rmse(uncertainty, pred_mean, gt, valid=None) -> SparsificationResult:
    """Sparsification of RMSE by predicted uncertainty against the error oracle.

    For f = 0, 0.01, ..., 0.99 the floor(f*N) most uncertain pixels are
    dropped and the RMSE of the rest is taken; both curves are normalized by
    the full-set RMSE. AUSE is the mean gap between them.
    """
    d, (u, mu) = _flatten_valid(gt, uncertainty, pred_mean, valid=valid)
    n = d.size
    if n < N_FRACTIONS:
        raise InsufficientDataError(f"need at least {N_FRACTIONS} valid pixels, got {n}")
    if not np.all(np.isfinite(u)):
        raise DomainError("uncertainty must be finite")
    err = np.abs(d - mu)
    sq = err**2
    fractions = np.arange(N_FRACTIONS) / N_FRACTIONS
    by_unc = _retained_rmse_curve(sq[_removal_order(u)], N_FRACTIONS)
    by_err = _retained_rmse_curve(sq[_removal_order(err)], N_FRACTIONS)
    if by_unc[0] == 0:
        raise DegenerateInputError("prediction has zero RMSE; sparsification undefined")
    # same full-set RMSE up to summation order; each curve starts at exactly 1
    curve_u = by_unc / by_unc[0]
    curve_o = by_err / by_err[0]
    error_curve = curve_u - curve_o
    return SparsificationResult(fractions, curve_u, curve_o, error_curve, float(np.mean(error_curve)))
