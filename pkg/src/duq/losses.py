"""Heteroscedastic Laplace negative log-likelihood and its gradient."""

from __future__ import annotations

import numpy as np

from duq.errors import DomainError, EmptyInputError, ShapeError
from duq.predictive import DepthRaster


def _unpack_target(gt, shape):
    if isinstance(gt, DepthRaster):
        values, valid = gt.values, gt.valid
    else:
        values = np.asarray(gt, dtype=np.float64)
        valid = np.isfinite(values)
    if values.shape != shape:
        # feature-vector predictions are 1-D while DepthRaster is 2-D
        if values.size == int(np.prod(shape)):
            values, valid = values.reshape(shape), valid.reshape(shape)
        else:
            raise ShapeError(f"target shape {values.shape} != prediction shape {shape}")
    n = int(valid.sum())
    if n == 0:
        raise EmptyInputError("no valid pixels in target")
    return values, valid, n


def laplace_nll(pred_mean, pred_sigma, gt) -> float:
    """Mean over valid pixels of ``|d - d_hat| / sigma + log sigma``."""
    pred_mean = np.asarray(pred_mean, dtype=np.float64)
    pred_sigma = np.asarray(pred_sigma, dtype=np.float64)
    if pred_sigma.shape != pred_mean.shape:
        raise ShapeError(f"sigma shape {pred_sigma.shape} != mean shape {pred_mean.shape}")
    d, valid, n = _unpack_target(gt, pred_mean.shape)
    s = pred_sigma[valid]
    if np.any(s <= 0):
        raise DomainError("sigma must be > 0 on valid pixels")
    r = np.abs(d[valid] - pred_mean[valid])
    return float(np.sum(r / s + np.log(s)) / n)


def laplace_nll_grad(pred_mean, pred_sigma_raw, gt) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`laplace_nll` w.r.t. the mean and raw sigma, sigma = exp(raw).

    Invalid pixels get zero gradient; sign(0) = 0 at the kink.
    """
    pred_mean = np.asarray(pred_mean, dtype=np.float64)
    raw = np.asarray(pred_sigma_raw, dtype=np.float64)
    if raw.shape != pred_mean.shape:
        raise ShapeError(f"raw sigma shape {raw.shape} != mean shape {pred_mean.shape}")
    d, valid, n = _unpack_target(gt, pred_mean.shape)
    sigma = np.exp(raw)
    if np.any(sigma[valid] <= 0):
        raise DomainError("sigma underflowed to 0")
    resid = np.where(valid, d - pred_mean, 0.0)
    g_mean = np.where(valid, -np.sign(resid) / (sigma * n), 0.0)
    g_raw = np.where(valid, (1.0 - np.abs(resid) / sigma) / n, 0.0)
    return g_mean, g_raw
