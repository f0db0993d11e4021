"""Moment-matched Gaussian fusion of sample-based predictions.

Each of the M stochastic forward passes (MC dropout masks or ensemble
members) yields a per-pixel mean and standard deviation. The resulting
Gaussian mixture is collapsed to one Gaussian whose variance splits into
an epistemic part (spread of the sample means) and an aleatoric part
(average predicted noise variance).

Rasters are plain numpy arrays. A sample set stacks its M rasters along
axis 0, so any per-sample shape works: ``(h, w)`` images, or ``(n,)`` for
feature-vector inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from duq.errors import DomainError, EmptyInputError, ShapeError

#: Floor applied to per-sample sigma before fusion, in meters.
SIGMA_MIN = 1e-6


@dataclass(frozen=True)
class DepthRaster:
    """Positive depth grid with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ShapeError(f"depth raster must be a non-empty 2-D array, got shape {values.shape}")
        if valid.shape != values.shape:
            raise ShapeError(f"mask shape {valid.shape} != depth shape {values.shape}")
        v = values[valid]
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError("depth must be finite and > 0 on valid pixels")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def dense(cls, values) -> "DepthRaster":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PredictiveSampleSet:
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if means.ndim == 0 or means.shape[0] == 0:
            raise EmptyInputError("sample set needs at least one sample")
        if means.shape != sigmas.shape:
            raise ShapeError(f"means shape {means.shape} != sigmas shape {sigmas.shape}")
        if np.any(sigmas < 0) or not np.all(np.isfinite(sigmas)):
            raise DomainError("sample sigmas must be finite and non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Sequence, Sequence]]) -> "PredictiveSampleSet":
        pairs = [(np.asarray(m, dtype=np.float64), np.asarray(s, dtype=np.float64)) for m, s in pairs]
        if not pairs:
            raise EmptyInputError("sample set needs at least one sample")
        shape = pairs[0][0].shape
        for i, (m, s) in enumerate(pairs):
            if m.shape != shape or s.shape != shape:
                raise ShapeError(f"sample {i} has shapes {m.shape}/{s.shape}, expected {shape}")
        return cls(np.stack([m for m, _ in pairs]), np.stack([s for _, s in pairs]))

    @property
    def M(self) -> int:
        return self.means.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    def __len__(self) -> int:
        return self.M

    def concat(self, other: "PredictiveSampleSet") -> "PredictiveSampleSet":
        if other.shape != self.shape:
            raise ShapeError(f"cannot concatenate sample sets of shape {self.shape} and {other.shape}")
        return PredictiveSampleSet(
            np.concatenate([self.means, other.means]), np.concatenate([self.sigmas, other.sigmas])
        )


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    var_total: np.ndarray

    @classmethod
    def from_parts(cls, mean, var_epistemic, var_aleatoric) -> "GaussianPrediction":
        mean = np.asarray(mean, dtype=np.float64)
        epi = np.asarray(var_epistemic, dtype=np.float64)
        ale = np.asarray(var_aleatoric, dtype=np.float64)
        if not (mean.shape == epi.shape == ale.shape):
            raise ShapeError("mean and variance rasters must share one shape")
        return cls(mean, epi, ale, epi + ale)

    @property
    def sigma_total(self) -> np.ndarray:
        return np.sqrt(self.var_total)


def fuse_samples(samples: PredictiveSampleSet, sigma_min: float = SIGMA_MIN) -> GaussianPrediction:
    """Collapse the sample mixture into one Gaussian per pixel.

    Population (1/M) statistics: the fused mean is the average of the
    sample means, the epistemic variance is their spread about it and the
    aleatoric variance is the average of the squared sample sigmas, each
    floored at ``sigma_min``.
    """
    sigmas = np.maximum(samples.sigmas, sigma_min)
    # centre on the first sample: identical samples then have exactly zero spread
    ref = samples.means[0]
    dev = samples.means - ref
    shift = dev.mean(axis=0)
    mean = ref + shift
    var_epistemic = ((dev - shift) ** 2).mean(axis=0)
    var_aleatoric = (sigmas**2).mean(axis=0)
    return GaussianPrediction(mean, var_epistemic, var_aleatoric, var_epistemic + var_aleatoric)


def _exact_column(values: np.ndarray) -> tuple[list[int], int]:
    """Integers n_i and a shared exponent b with values[i] == n_i * 2**b exactly."""
    mant, exp = np.frexp(values)
    ints = (mant * 2.0**53).astype(np.int64).tolist()
    exp = (exp - 53).tolist()
    base = min(exp)
    return [n << (e - base) for n, e in zip(ints, exp)], base


def _pow2(n: int, b: int) -> Fraction:
    return Fraction(n << b) if b >= 0 else Fraction(n, 1 << -b)


def mixture_moments_oracle(samples: PredictiveSampleSet, sigma_min: float = SIGMA_MIN) -> GaussianPrediction:
    """Mixture moments, var = E[X^2] - E[X]^2, in exact rational arithmetic.

    Every double is an integer times a power of two, so the raw moment sums
    are exact integers and each output is rounded once at the end. This is
    independent of :func:`fuse_samples` (raw second moments instead of
    centred sums) and slow; meant for verification only.
    """
    M = samples.M
    mu = samples.means.reshape(M, -1)
    s = np.maximum(samples.sigmas, sigma_min).reshape(M, -1)
    out = np.empty((4, mu.shape[1]))
    for j in range(mu.shape[1]):
        n, b = _exact_column(mu[:, j])
        k, c = _exact_column(s[:, j])
        first = _pow2(sum(n), b) / M
        epistemic = _pow2(sum(v * v for v in n), 2 * b) / M - first * first
        aleatoric = _pow2(sum(v * v for v in k), 2 * c) / M
        out[:, j] = float(first), float(epistemic), float(aleatoric), float(epistemic + aleatoric)
    first, epistemic, aleatoric, total = (a.reshape(samples.shape) for a in out)
    return GaussianPrediction(first, epistemic, aleatoric, total)
