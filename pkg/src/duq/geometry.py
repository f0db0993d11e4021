"""Pseudo-RGBD geometry: back-projection, certainty filtering, point-to-point ICP."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from duq.errors import ConfigurationError, DegenerateCorrespondenceError, DomainError, EmptyInputError, ShapeError
from duq.predictive import DepthRaster

DEFAULT_PERCENTILES = (0.30, 0.50, 0.75, 0.90, 0.95, 0.99, 1.00)

# below this many target points nearest neighbours are found by brute force
BRUTE_FORCE_LIMIT = 2000

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")


@dataclass(frozen=True)
class UncertainPointCloud:
    points: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        sig = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if pts.shape[0] != sig.shape[0]:
            raise ShapeError(f"{pts.shape[0]} points but {sig.shape[0]} sigmas")
        if np.any(sig < 0):
            raise DomainError("sigma must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sigma", sig)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        a = np.asarray(axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        R = np.eye(3) + math.sin(angle_rad) * K + (1 - math.cos(angle_rad)) * (K @ K)
        return cls(R, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tol_delta_rmse: float = 1e-6
    # None: corr_dist_factor times the median nearest-neighbour spacing of the target
    max_corr_dist: float | None = None
    corr_dist_factor: float = 5.0
    initial: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.max_corr_dist is not None and not self.max_corr_dist > 0:
            raise ConfigurationError("max_corr_dist must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    final_rmse: float
    converged: bool
    matched_fraction: float
    max_corr_dist: float


@dataclass(frozen=True)
class PoseErrorStats:
    rmse_t: float
    rmse_r: float
    n_pairs: int


@dataclass(frozen=True)
class PosePair:
    """Two clouds and the ground-truth transform taking source into the target frame."""

    source: UncertainPointCloud
    target: UncertainPointCloud
    gt: RigidTransform


@dataclass(frozen=True)
class SweepRow:
    percentile: float
    rmse_t: float
    rmse_r: float
    n_pairs: int
    n_failed: int


def backproject(depth, sigma_total, intrinsics: CameraIntrinsics, stride: int = 1, valid=None) -> UncertainPointCloud:
    """Lift every ``stride``-th valid pixel (u, v) with depth z to ((u-cx)z/fx, (v-cy)z/fy, z).

    Points come out in row-major pixel order; sigma is carried along unchanged.
    """
    if isinstance(depth, DepthRaster):
        z, mask = depth.values, depth.valid
    else:
        z = np.asarray(depth, dtype=np.float64)
        mask = np.ones(z.shape, dtype=bool)
    if valid is not None:
        mask = mask & np.asarray(valid, dtype=bool)
    sigma_total = np.asarray(sigma_total, dtype=np.float64)
    if z.ndim != 2 or sigma_total.shape != z.shape:
        raise ShapeError(f"depth {z.shape} and sigma {sigma_total.shape} must be equal 2-D shapes")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    v, u = np.mgrid[0:z.shape[0]:stride, 0:z.shape[1]:stride]
    zs = z[::stride, ::stride]
    keep = mask[::stride, ::stride] & np.isfinite(zs) & (zs > 0)
    zk = zs[keep]
    x = (u[keep] - intrinsics.cx) * zk / intrinsics.fx
    y = (v[keep] - intrinsics.cy) * zk / intrinsics.fy
    return UncertainPointCloud(np.stack([x, y, zk], axis=1), sigma_total[::stride, ::stride][keep])


def _keep_count(q: float, n: int) -> int:
    # rounding guards against 0.3 * 1000 = 300.00000000000006
    return min(n, math.ceil(round(q * n, 9)))


def percentile_filter(cloud: UncertainPointCloud, q: float) -> UncertainPointCloud:
    """Keep the ceil(q*n) most certain points (smallest sigma, ties by index), in original order."""
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"certainty percentile must lie in (0, 1], got {q}")
    n = len(cloud)
    if n == 0:
        raise EmptyInputError("cannot filter an empty cloud")
    if q == 1.0:
        return cloud
    k = _keep_count(q, n)
    order = np.lexsort((np.arange(n), cloud.sigma))
    idx = np.sort(order[:k])
    return UncertainPointCloud(cloud.points[idx], cloud.sigma[idx])


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares R, t with dst ~ R src + t (SVD, reflection-corrected)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


class NearestNeighbors:
    """Nearest target point for each query; equal distances resolve to the lower index."""

    def __init__(self, target: np.ndarray):
        self.target = target
        self.tree = cKDTree(target) if target.shape[0] >= BRUTE_FORCE_LIMIT else None

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.tree is None:
            return self._brute(q)
        if self.target.shape[0] == 1:
            d, i = self.tree.query(q, k=1)
            return d, i
        d, i = self.tree.query(q, k=2)
        swap = (d[:, 1] == d[:, 0]) & (i[:, 1] < i[:, 0])
        idx = np.where(swap, i[:, 1], i[:, 0])
        return d[:, 0], idx

    def _brute(self, q: np.ndarray, chunk: int = 1024):
        dist = np.empty(q.shape[0])
        idx = np.empty(q.shape[0], dtype=np.intp)
        for s in range(0, q.shape[0], chunk):
            block = q[s:s + chunk]
            diff = block[:, None, :] - self.target[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            j = np.argmin(d2, axis=1)
            idx[s:s + chunk] = j
            dist[s:s + chunk] = np.sqrt(d2[np.arange(block.shape[0]), j])
        return dist, idx


def median_spacing(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        raise DegenerateCorrespondenceError("need at least two points to measure spacing")
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, UncertainPointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DomainError("point cloud has non-finite coordinates")
    if pts.shape[0] < 3:
        raise DegenerateCorrespondenceError(f"need at least 3 points, got {pts.shape[0]}")
    return pts


def icp_align(source, target, config: IcpConfig | None = None) -> IcpResult:
    """Point-to-point ICP returning the transform that maps source into the target frame."""
    config = config or IcpConfig()
    src = _points(source)
    tgt = _points(target)
    gate = config.max_corr_dist
    if gate is None:
        gate = config.corr_dist_factor * median_spacing(tgt)
    nn = NearestNeighbors(tgt)

    T = config.initial
    prev = None
    rmse = math.inf
    matched = 0.0
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        moved = T.apply(src)
        d, j = nn.query(moved)
        keep = d <= gate
        n_keep = int(keep.sum())
        if n_keep < 3:
            raise DegenerateCorrespondenceError(
                f"only {n_keep} correspondences within {gate:.4g} m at iteration {it}")
        a, b = moved[keep], tgt[j[keep]]
        step = fit_rigid(a, b)
        T = step.compose(T)
        resid = step.apply(a) - b
        rmse = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
        matched = n_keep / src.shape[0]
        if prev is not None and abs(rmse - prev) < config.tol_delta_rmse:
            converged = True
            break
        prev = rmse
    return IcpResult(T, it, rmse, converged, matched, float(gate))


def rotation_angle_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Angle of R_gt^T R_est in degrees.

    Evaluated as atan2(sin, cos) from the skew and trace parts, which equals
    arccos((tr - 1)/2) but keeps full precision near 0 and 180 degrees.
    """
    D = R_gt.T @ R_est
    s = 0.5 * math.sqrt((D[2, 1] - D[1, 2]) ** 2 + (D[0, 2] - D[2, 0]) ** 2 + (D[1, 0] - D[0, 1]) ** 2)
    c = 0.5 * (np.trace(D) - 1.0)
    return math.degrees(math.atan2(s, c))


def pose_error(estimates, ground_truth) -> PoseErrorStats:
    estimates, ground_truth = list(estimates), list(ground_truth)
    if len(estimates) != len(ground_truth):
        raise ShapeError(f"{len(estimates)} estimates for {len(ground_truth)} ground-truth poses")
    if not estimates:
        raise EmptyInputError("no poses to compare")
    dt = [float(np.sum((e.translation - g.translation) ** 2)) for e, g in zip(estimates, ground_truth)]
    dr = [rotation_angle_deg(e.rotation, g.rotation) ** 2 for e, g in zip(estimates, ground_truth)]
    return PoseErrorStats(math.sqrt(sum(dt) / len(dt)), math.sqrt(sum(dr) / len(dr)), len(dt))


def default_workers() -> int:
    """Thread count from DUQ_THREADS (0 or unset = one per CPU)."""
    n = int(os.environ.get("DUQ_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def _align_pair(pair: PosePair, q: float, config: IcpConfig):
    try:
        res = icp_align(percentile_filter(pair.source, q), percentile_filter(pair.target, q), config)
    except (DegenerateCorrespondenceError, DomainError):
        return None
    return res.transform


def percentile_sweep(pairs, percentiles=DEFAULT_PERCENTILES, icp_config: IcpConfig | None = None,
                     workers: int | None = None) -> list[SweepRow]:
    """Run filtered ICP on every pair at every certainty percentile.

    Pairs whose ICP fails are left out of the error statistics and counted
    in ``n_failed``.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no pairs to sweep")
    for q in percentiles:
        if not 0.0 < q <= 1.0:
            raise ConfigurationError(f"certainty percentile must lie in (0, 1], got {q}")
    icp_config = icp_config or IcpConfig()
    workers = workers or default_workers()
    rows = []
    for q in percentiles:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                est = list(pool.map(lambda p: _align_pair(p, q, icp_config), pairs))
        else:
            est = [_align_pair(p, q, icp_config) for p in pairs]
        ok = [(e, p.gt) for e, p in zip(est, pairs) if e is not None]
        n_failed = len(pairs) - len(ok)
        if ok:
            stats = pose_error([e for e, _ in ok], [g for _, g in ok])
            rows.append(SweepRow(float(q), stats.rmse_t, stats.rmse_r, stats.n_pairs, n_failed))
        else:
            rows.append(SweepRow(float(q), math.nan, math.nan, 0, n_failed))
    return rows
