"""Synthetic data: 1-D heteroscedastic regression, ray-cast depth scenes, pose pairs.

The pair harness stands in for real RGB-D sequences. Each scene is a room
(floor, ceiling, three walls) with random boxes and spheres, rendered from
two camera poses with a known relative motion. A fake "predicted" depth map
is derived from the true one: small depth-proportional noise everywhere and,
when ``corrupt`` is set, heavy-tailed errors at depth discontinuities,
where the predicted sigma is also large.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from duq.geometry import CameraIntrinsics, PosePair, RigidTransform, backproject
from duq.predictive import DepthRaster, PredictiveSampleSet, fuse_samples


def noise_scale(x, slope: float = 0.1, floor: float = 0.05):
    """Laplace scale b(x) = floor + slope*|x| of the 1-D regression noise."""
    return floor + slope * np.abs(x)


def regress1d(n: int, seed: int, slope: float = 0.1, floor: float = 0.05, lo: float = -3.0, hi: float = 3.0):
    """y = sin(x) + Laplace(0, b(x)) with x ~ U(lo, hi). Returns (x, y)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, n)
    y = np.sin(x) + rng.laplace(0.0, noise_scale(x, slope, floor))
    return x, y


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    # ~60 degree horizontal field of view
    f = 0.5 * width / math.tan(math.radians(30.0))
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass(frozen=True)
class Scene:
    planes: np.ndarray  # (k, 4): n . x = c
    boxes: np.ndarray  # (k, 6): min xyz, max xyz
    spheres: np.ndarray  # (k, 4): centre xyz, radius


def random_scene(rng: np.random.Generator, n_boxes: int = 4, n_spheres: int = 2) -> Scene:
    floor_y = rng.uniform(1.0, 1.5)
    ceil_y = -rng.uniform(1.5, 2.0)
    back = rng.uniform(5.0, 7.0)
    half_w = rng.uniform(2.0, 3.0)
    planes = np.array([
        [0.0, 1.0, 0.0, floor_y],
        [0.0, 1.0, 0.0, ceil_y],
        [0.0, 0.0, 1.0, back],
        [1.0, 0.0, 0.0, -half_w],
        [1.0, 0.0, 0.0, half_w],
    ])
    boxes = []
    for _ in range(n_boxes):
        size = rng.uniform([0.3, 0.3, 0.3], [1.0, 1.2, 1.0])
        cx = rng.uniform(-half_w + 0.5, half_w - 0.5)
        cz = rng.uniform(2.0, back - 1.0)
        lo = np.array([cx - size[0] / 2, floor_y - size[1], cz - size[2] / 2])
        boxes.append(np.concatenate([lo, lo + size]))
    spheres = []
    for _ in range(n_spheres):
        r = rng.uniform(0.2, 0.5)
        c = [rng.uniform(-half_w + 0.5, half_w - 0.5), rng.uniform(-0.5, floor_y - r), rng.uniform(2.0, back - 1.0)]
        spheres.append(c + [r])
    return Scene(planes, np.array(boxes).reshape(-1, 6), np.array(spheres).reshape(-1, 4))


def render_depth(scene: Scene, cam_to_world: RigidTransform, intr: CameraIntrinsics, width: int, height: int):
    """Ray-cast camera-frame z depth; pixels that hit nothing are NaN."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ cam_to_world.rotation.T
    o = cam_to_world.translation
    best = np.full(d.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for nx, ny, nz, c in scene.planes:
            n = np.array([nx, ny, nz])
            t = (c - n @ o) / (d @ n)
            best = np.where((t > 1e-6) & (t < best), t, best)
        for box in scene.boxes:
            t1 = (box[:3] - o) / d
            t2 = (box[3:] - o) / d
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tnear <= tfar) & (tnear > 1e-6)
            best = np.where(hit & (tnear < best), tnear, best)
        for cx, cy, cz, r in scene.spheres:
            oc = o - np.array([cx, cy, cz])
            a = np.einsum("ij,ij->i", d, d)
            b = 2.0 * d @ oc
            disc = b * b - 4 * a * (oc @ oc - r * r)
            t = (-b - np.sqrt(disc)) / (2 * a)
            hit = (disc >= 0) & (t > 1e-6)
            best = np.where(hit & (t < best), t, best)
    best[~np.isfinite(best)] = np.nan
    # ray direction has unit camera-z component, so t is the z depth
    return best.reshape(height, width)


def _neighbor_step(z: np.ndarray) -> np.ndarray:
    """Signed depth difference to the 4-neighbour that differs most (neighbour minus pixel)."""
    best = np.zeros_like(z)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(z, shift, axis=axis)
        # no wrap-around across the border
        edge = [slice(None), slice(None)]
        edge[axis] = 0 if shift == 1 else -1
        nb[tuple(edge)] = z[tuple(edge)]
        diff = nb - z
        best = np.where(np.abs(diff) > np.abs(best), diff, best)
    return best


def discontinuity_map(depth: np.ndarray, rel_jump: float = 0.05) -> np.ndarray:
    """Signed step to the most different 4-neighbour where it exceeds ``rel_jump`` of the depth, else 0."""
    z = np.nan_to_num(depth, nan=0.0)
    step = _neighbor_step(z)
    return np.where(np.abs(step) > rel_jump * np.maximum(z, 1e-6), step, 0.0)


def _spread(step: np.ndarray) -> np.ndarray:
    """Propagate the strongest signed step one pixel outward."""
    out = step.copy()
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(step, shift, axis=axis)
        edge = [slice(None), slice(None)]
        edge[axis] = 0 if shift == 1 else -1
        nb[tuple(edge)] = 0.0
        out = np.where(np.abs(nb) > np.abs(out), nb, out)
    return out


def smooth_field(shape: tuple[int, int], rng: np.random.Generator, cells: int = 6, df: float = 2.0) -> np.ndarray:
    """Spatially correlated heavy-tailed field: Student-t values on a coarse grid, bilinearly upsampled."""
    h, w = shape
    gh, gw = cells + 1, max(2, round(cells * w / h)) + 1
    grid = rng.standard_t(df, (gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.minimum(ys.astype(int), gh - 2)
    x0 = np.minimum(xs.astype(int), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def simulate_prediction(depth: np.ndarray, rng: np.random.Generator, corrupt: bool = True,
                        base_rel: float = 0.005, edge_sigma: float = 0.02, outlier_scale: float = 0.4,
                        blend: bool = True, field_cells: int = 6, sigma_spread: float = 1.5,
                        rel_jump: float = 0.05):
    """Turn true depth into a (predicted depth, predicted sigma, valid) triple.

    Everywhere: sigma = base_rel * z * exp(sigma_spread * n) with n standard
    normal per pixel, and the depth carries N(0, sigma^2) noise. Within one pixel of a depth discontinuity an extra offset is
    drawn: a random blend across the step ("flying pixels") plus a smooth
    heavy-tailed field of scale ``outlier_scale``, independent per view.
    Sigma there is raised by ``edge_sigma`` plus the offset magnitude, so
    it ranks pixels by how wrong they would be. The offset is only added
    to the depth when ``corrupt`` is set; sigma is identical either way.
    """
    valid = np.isfinite(depth)
    z = np.where(valid, depth, 1.0)
    step = _spread(discontinuity_map(np.where(valid, depth, np.nan), rel_jump))
    edge = (step != 0) & valid
    sigma = base_rel * z * np.exp(sigma_spread * rng.normal(0.0, 1.0, z.shape))
    pred = z + rng.normal(0.0, 1.0, z.shape) * sigma
    fly = rng.uniform(0.0, 1.0, z.shape) * step if blend else np.zeros_like(z)
    offset = np.where(edge, fly + outlier_scale * smooth_field(z.shape, rng, cells=field_cells), 0.0)
    sigma = np.where(edge, sigma + edge_sigma + np.abs(offset), sigma)
    if corrupt:
        pred = pred + offset
    pred = np.maximum(pred, 0.05)
    return np.where(valid, pred, np.nan), np.where(valid, sigma, np.nan), valid


@dataclass(frozen=True)
class PairViews:
    """Predicted depth/sigma rasters for two views and the true relative motion."""

    depth_source: np.ndarray
    sigma_source: np.ndarray
    depth_target: np.ndarray
    sigma_target: np.ndarray
    intrinsics: CameraIntrinsics
    gt: RigidTransform
    seed: int

    def to_pose_pair(self, source_stride: int = 3, target_stride: int = 2, margin: int = 16) -> PosePair:
        """Back-project both views; the source is subsampled and drops a ``margin``-pixel border.

        Dropping the border keeps most source points inside the target's field
        of view after the motion, which removes the main bias of partial
        overlap from the registration error.
        """
        inner = np.zeros(self.depth_source.shape, dtype=bool)
        h, w = inner.shape
        inner[margin:h - margin, margin:w - margin] = True
        src = backproject(self.depth_source, self.sigma_source, self.intrinsics, source_stride,
                          valid=np.isfinite(self.depth_source) & inner)
        tgt = backproject(self.depth_target, self.sigma_target, self.intrinsics, target_stride,
                          valid=np.isfinite(self.depth_target))
        return PosePair(src, tgt, self.gt)


def random_motion(rng: np.random.Generator, max_deg: float = 5.0, max_trans: float = 0.25) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0.5 * max_deg, max_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return RigidTransform.from_axis_angle(axis, angle, direction * rng.uniform(0.5 * max_trans, max_trans))


def make_pair(seed: int, width: int = 192, height: int = 144, corrupt: bool = True,
              max_deg: float = 3.0, max_trans: float = 0.1, **sim) -> PairViews:
    """Two views of one random scene; ``sim`` is passed on to :func:`simulate_prediction`."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_boxes=10, n_spheres=6)
    intr = default_intrinsics(width, height)
    cam1 = RigidTransform.from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, 3)))
    motion = random_motion(rng, max_deg, max_trans)
    cam2 = cam1.compose(motion)
    d1 = render_depth(scene, cam1, intr, width, height)
    d2 = render_depth(scene, cam2, intr, width, height)
    p1, s1, _ = simulate_prediction(d1, rng, corrupt, **sim)
    p2, s2, _ = simulate_prediction(d2, rng, corrupt, **sim)
    # source = view 2, target = view 1: x1 = motion(x2)
    return PairViews(p2, s2, p1, s1, intr, motion, seed)


def make_pairset(n: int, seed: int, width: int = 192, height: int = 144, corrupt: bool = True) -> list[PairViews]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [make_pair(int(s), width, height, corrupt) for s in seeds]


def depthscene(seed: int, width: int = 64, height: int = 48, M: int = 8, noise: float = 0.05):
    """A rendered depth map with a synthetic M-sample prediction that is calibrated by construction.

    Sample means scatter around the true depth (epistemic part), each sample
    carries a sigma (aleatoric part); the ground truth returned is then drawn
    from the fused Gaussian so that the prediction is exactly self-consistent.
    Returns ``(gt DepthRaster, PredictiveSampleSet, intrinsics)``.
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(rng)
    intr = default_intrinsics(width, height)
    depth = render_depth(scene, RigidTransform.identity(), intr, width, height)
    valid = np.isfinite(depth)
    z = np.where(valid, depth, 1.0)
    epi = noise * z * rng.uniform(0.2, 1.0, z.shape)
    ale = noise * z * rng.uniform(0.2, 1.0, z.shape)
    means = z[None] + rng.normal(size=(M,) + z.shape) * epi[None]
    sigmas = np.broadcast_to(ale, (M,) + z.shape) * rng.uniform(0.8, 1.2, (M,) + z.shape)
    samples = PredictiveSampleSet(means, sigmas)
    fused = fuse_samples(samples)
    gt = fused.mean + np.sqrt(fused.var_total) * rng.normal(size=z.shape)
    valid &= gt > 0
    gt = np.where(valid, gt, 1.0)
    return DepthRaster(gt, valid), samples, intr
