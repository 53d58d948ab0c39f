"""Gaussian primitive store with bounded scale encoding.

Scales are kept as unconstrained reals and decoded through a sigmoid that is
pinned to a metric interval [sigma_min, sigma_max], so no optimizer step can
produce a degenerate or runaway splat. The interval itself adapts to the scene:
when too many splats saturate the top of the range the ceiling grows, when
nearly all sit at the bottom it shrinks, and in both cases the raw values are
re-encoded so the metric sizes survive the change.

New splats are initialized from a LiDAR point and its neighborhood: a flat
ellipse oriented by local PCA, then rescaled so its projected footprint in the
originating camera equals a target pixel radius regardless of depth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit, logit

from .geometry import CameraIntrinsics, Pose, projection_jacobian

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

MAP_FORMAT_VERSION = 1


class NotVisibleError(ValueError):
    """Point is behind the camera or projects outside the image."""


@dataclass(frozen=True)
class ScaleBounds:
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self}")

    def scaled(self, new_sigma_max: float) -> "ScaleBounds":
        return ScaleBounds(self.sigma_min, new_sigma_max)


def bounded_scale(s, b: ScaleBounds):
    """Map unconstrained s to metric scale in (sigma_min, sigma_max)."""
    return b.sigma_min + (b.sigma_max - b.sigma_min) * expit(np.asarray(s, dtype=float))


def inverse_bounded_scale(sigma, b: ScaleBounds):
    """Map metric scale back to the unconstrained parameter.

    Inputs at or outside the bounds are clamped to the open interval before
    inverting; returns (s, clamped_mask) so callers can surface the clamp.
    """
    sigma = np.asarray(sigma, dtype=float)
    eps = 1e-6 * (b.sigma_max - b.sigma_min)
    lo, hi = b.sigma_min + eps, b.sigma_max - eps
    clamped = (sigma < lo) | (sigma > hi)
    sig = np.clip(sigma, lo, hi)
    u = (sig - b.sigma_min) / (b.sigma_max - b.sigma_min)
    return logit(u), clamped


class AdaptResult(NamedTuple):
    bounds: ScaleBounds
    raw_scales: np.ndarray
    changed: bool
    n_clamped: int


def adapt_sigma_max(raw_scales: np.ndarray, b: ScaleBounds,
                    top_frac=0.15, low_frac=0.95,
                    grow=1.2, shrink=0.8) -> AdaptResult:
    """Adjust sigma_max from the population of per-splat maximum scales.

    If more than top_frac of splats have their largest component above
    0.95*sigma_max the ceiling grows by `grow`; if more than low_frac sit
    below 0.05*sigma_max it shrinks by `shrink` (floored at 4*sigma_min).
    Raw scales are decoded under the old bounds and re-encoded under the new
    ones so the metric sizes are preserved, up to clamping at the new edges.
    """
    raw_scales = np.asarray(raw_scales, dtype=float)
    if raw_scales.size == 0:
        raise ValueError("adapt_sigma_max needs at least one splat")
    sigma = bounded_scale(raw_scales, b)
    max_sigma = sigma.max(axis=-1)
    ratio_top = np.mean(max_sigma > 0.95 * b.sigma_max)
    ratio_low = np.mean(max_sigma < 0.05 * b.sigma_max)

    if ratio_top > top_frac:
        new_max = grow * b.sigma_max
    elif ratio_low > low_frac:
        new_max = max(shrink * b.sigma_max, 4.0 * b.sigma_min)
    else:
        return AdaptResult(b, raw_scales, False, 0)

    new_bounds = b.scaled(new_max)
    new_raw, clamped = inverse_bounded_scale(sigma, new_bounds)
    return AdaptResult(new_bounds, new_raw, True, int(np.count_nonzero(clamped)))


@dataclass
class Gaussian:
    """One splat, mostly for construction and tests; storage is columnar."""

    mean: np.ndarray           # (3,) world, meters
    orientation: np.ndarray    # (4,) unit quaternion, xyzw
    raw_scale: np.ndarray      # (3,) unconstrained
    opacity_logit: float
    sh: np.ndarray             # (4, 3) degree 0-1 coefficients per channel
    source_kf: int = -1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        self.orientation = q / np.linalg.norm(q)
        self.raw_scale = np.asarray(self.raw_scale, dtype=float).reshape(3)
        self.sh = np.asarray(self.sh, dtype=float).reshape(4, 3)


def init_gaussian_pixel_aware(p, neighbors, pose: Pose, K: CameraIntrinsics,
                              r_target: float, b: ScaleBounds, color,
                              source_kf: int = -1, scale_mode: str = "bounded",
                              init_opacity: float = 0.7):
    """Build a splat at p whose projected radius equals r_target pixels.

    Orientation comes from PCA over the neighbor set (normal along the
    smallest-eigenvalue direction, mapped to local z). The pre-scale shape is
    a flat ellipse, sigma_x = sigma_y = mean neighbor distance and
    sigma_z = 0.1 sigma_x; only the aspect ratio survives because all three
    axes are then multiplied by r_target / r_eff, where r_eff is the fourth
    root of the projected covariance determinant.

    Returns (Gaussian, degenerate_flag). Raises NotVisibleError when p is
    behind the camera or projects outside the image.
    """
    p = np.asarray(p, dtype=float).reshape(3)
    neighbors = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(neighbors) < 4:
        raise ValueError(f"need at least 4 neighbors, got {len(neighbors)}")

    cam_from_world = pose.inverse()
    p_cam = cam_from_world.apply(p)
    if p_cam[2] <= 0.0:
        raise NotVisibleError(f"point at camera depth {p_cam[2]:.3g}")
    u = K.fx * p_cam[0] / p_cam[2] + K.cx
    v = K.fy * p_cam[1] / p_cam[2] + K.cy
    if not (0.0 <= u < K.width and 0.0 <= v < K.height):
        raise NotVisibleError(f"projects to ({u:.1f}, {v:.1f})")

    centered = neighbors - neighbors.mean(axis=0)
    cov = centered.T @ centered / len(neighbors)
    evals, evecs = np.linalg.eigh(cov)
    # normal is ill-defined when the two smallest eigenvalues coincide
    degenerate = (evals[1] - evals[0]) <= 1e-12 * max(1.0, evals[2])
    if degenerate:
        R = np.eye(3)
    else:
        R = evecs[:, [2, 1, 0]]
        if np.linalg.det(R) < 0:
            R[:, 0] = -R[:, 0]

    d_mean = np.mean(np.linalg.norm(neighbors - p, axis=1))
    if d_mean <= 0.0:
        raise ValueError("neighbors coincide with the point")
    sigma = np.array([d_mean, d_mean, 0.1 * d_mean])

    cov3d_world = R @ np.diag(sigma**2) @ R.T
    R_cw = cam_from_world.rotation_matrix()
    J = projection_jacobian(p_cam, K)
    JW = J @ R_cw
    cov2d = JW @ cov3d_world @ JW.T
    r_eff = np.linalg.det(cov2d) ** 0.25
    sigma = sigma * (r_target / r_eff)

    if scale_mode == "bounded":
        raw, _ = inverse_bounded_scale(sigma, b)
    elif scale_mode == "exp":
        raw = np.log(sigma)
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")

    sh = np.zeros((4, 3))
    sh[0] = np.asarray(color, dtype=float).reshape(3) / SH_C0
    g = Gaussian(
        mean=p,
        orientation=Rotation.from_matrix(R).as_quat(),
        raw_scale=raw,
        opacity_logit=float(logit(init_opacity)),
        sh=sh,
        source_kf=source_kf,
    )
    return g, bool(degenerate)


class VoxelOccupancy:
    """World-space occupancy grid used to suppress duplicate splats."""

    def __init__(self, voxel_size: float):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._cells: set[tuple[int, int, int]] = set()

    def __len__(self):
        return len(self._cells)

    def _keys(self, points):
        return np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def filter_new(self, points) -> np.ndarray:
        """Mask of points in unoccupied voxels; first point per voxel wins."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        keys = self._keys(points)
        mask = np.zeros(len(points), dtype=bool)
        seen = set()
        for i, k in enumerate(map(tuple, keys)):
            if k not in self._cells and k not in seen:
                mask[i] = True
                seen.add(k)
        return mask

    def insert(self, points):
        for k in map(tuple, self._keys(np.atleast_2d(points))):
            self._cells.add(k)


class SeedStats(NamedTuple):
    n_candidates: int     # points that landed in unoccupied voxels
    n_added: int
    n_not_visible: int    # outside the camera frustum, no color available
    n_degenerate: int     # ambiguous PCA or collapsed neighborhoods


def seed_keyframe_gaussians(gmap: "GaussianMap", occupancy: VoxelOccupancy,
                            cloud_world, image, world_from_camera: Pose,
                            K: CameraIntrinsics, kf_id: int,
                            r_target: float = 2.0, knn: int = 8,
                            init_opacity: float = 0.7):
    """Seed splats for one keyframe from its LiDAR points and image.

    Points falling in already-occupied voxels are skipped, so repeated views
    of the same surface do not pile up duplicates. Each accepted point gets a
    pixel-aware splat colored by the observed pixel it projects to. Only
    accepted points claim their voxel, so a point outside the camera frustum
    leaves the voxel free for a later keyframe that can actually see it.

    Returns (indices into gmap, SeedStats).
    """
    from scipy.spatial import cKDTree

    cloud_world = np.asarray(cloud_world, dtype=float).reshape(-1, 3)
    image = np.asarray(image, dtype=float)
    empty = np.zeros(0, dtype=np.int64)
    if len(cloud_world) < knn + 1:
        return empty, SeedStats(0, 0, 0, 0)
    cand = np.flatnonzero(occupancy.filter_new(cloud_world))
    if len(cand) == 0:
        return empty, SeedStats(0, 0, 0, 0)

    cam_from_world = world_from_camera.inverse()
    p_cam = cam_from_world.apply(cloud_world[cand])
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
    visible = (z > 0.0) & (u >= 0.0) & (u < K.width) & (v >= 0.0) & (v < K.height)

    vis_rows = np.flatnonzero(visible)
    tree = cKDTree(cloud_world)
    _, nbr = tree.query(cloud_world[cand[vis_rows]], k=knn + 1)

    gaussians = []
    placed = []
    n_degenerate = 0
    for row, ci in enumerate(cand[vis_rows]):
        p = cloud_world[ci]
        iu = min(int(u[vis_rows[row]] + 0.5), K.width - 1)
        iv = min(int(v[vis_rows[row]] + 0.5), K.height - 1)
        color = image[iv, iu]
        try:
            g, degen = init_gaussian_pixel_aware(
                p, cloud_world[nbr[row, 1:]], world_from_camera, K, r_target,
                gmap.bounds, color, source_kf=kf_id,
                scale_mode=gmap.scale_mode, init_opacity=init_opacity)
        except (NotVisibleError, ValueError):
            n_degenerate += 1
            continue
        if degen:
            n_degenerate += 1   # counted but kept: coverage beats orientation
        gaussians.append(g)
        placed.append(p)

    idx = gmap.add(gaussians)
    if placed:
        occupancy.insert(np.array(placed))
    return idx, SeedStats(len(cand), len(idx),
                          int(np.count_nonzero(~visible)), n_degenerate)


@dataclass
class GaussianMap:
    """Columnar store of splats plus the scale encoding state.

    scale_mode "bounded" decodes raw scales through the sigmoid interval;
    "exp" decodes through exp() with no bounds (kept for comparison runs).
    """

    bounds: ScaleBounds
    scale_mode: str = "bounded"
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    raw_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sh: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 3)))
    source_kf: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.scale_mode not in ("bounded", "exp"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    def __len__(self):
        return len(self.means)

    def add(self, gaussians: list[Gaussian]) -> np.ndarray:
        """Append splats; returns their indices."""
        if not gaussians:
            return np.zeros(0, dtype=np.int64)
        start = len(self)
        self.means = np.vstack([self.means, [g.mean for g in gaussians]])
        self.quats = np.vstack([self.quats, [g.orientation for g in gaussians]])
        self.raw_scales = np.vstack([self.raw_scales, [g.raw_scale for g in gaussians]])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, [g.opacity_logit for g in gaussians]])
        self.sh = np.concatenate(
            [self.sh, np.array([g.sh for g in gaussians])], axis=0)
        self.source_kf = np.concatenate(
            [self.source_kf, np.array([g.source_kf for g in gaussians], dtype=np.int64)])
        return np.arange(start, len(self), dtype=np.int64)

    def scales(self) -> np.ndarray:
        if self.scale_mode == "bounded":
            return bounded_scale(self.raw_scales, self.bounds)
        return np.exp(self.raw_scales)

    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def max_scale(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.scales().max())

    def prune(self, keep_mask: np.ndarray) -> int:
        removed = int(np.count_nonzero(~keep_mask))
        self.means = self.means[keep_mask]
        self.quats = self.quats[keep_mask]
        self.raw_scales = self.raw_scales[keep_mask]
        self.opacity_logits = self.opacity_logits[keep_mask]
        self.sh = self.sh[keep_mask]
        self.source_kf = self.source_kf[keep_mask]
        return removed

    def adapt_bounds(self) -> AdaptResult:
        """Run the sigma_max adaptation in place; no-op in exp mode."""
        if self.scale_mode != "bounded" or len(self) == 0:
            return AdaptResult(self.bounds, self.raw_scales, False, 0)
        res = adapt_sigma_max(self.raw_scales, self.bounds)
        if res.changed:
            self.bounds = res.bounds
            self.raw_scales = res.raw_scales
        return res

    def transform_subset(self, delta: Pose, mask: np.ndarray):
        """Apply a rigid correction to the selected splats.

        Means and orientations move; scales and opacities are untouched. The
        degree-1 appearance band transforms as a vector of the view
        direction, so it is rotated along, keeping rendered colors invariant
        under a joint map-and-camera transform.
        """
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask)
        if idx.size == 0:
            return
        self.means[idx] = delta.apply(self.means[idx])
        q_delta = Rotation.from_quat(delta.q)
        rotated = (q_delta * Rotation.from_quat(self.quats[idx])).as_quat()
        norms = np.linalg.norm(rotated, axis=1, keepdims=True)
        self.quats[idx] = rotated / norms
        W = delta.rotation_matrix()
        shv = self.sh[idx]
        # view response is v . w per channel, with w = (-sh3, -sh1, sh2)
        w = np.stack([-shv[:, 3], -shv[:, 1], shv[:, 2]], axis=1)
        w = np.einsum('ij,njc->nic', W, w)
        self.sh[idx, 1] = -w[:, 1]
        self.sh[idx, 2] = w[:, 2]
        self.sh[idx, 3] = -w[:, 0]

    def save(self, path: str) -> int:
        """Write the map; returns the serialized size in bytes."""
        np.savez_compressed(
            path,
            format_version=np.int64(MAP_FORMAT_VERSION),
            scale_mode=np.str_(self.scale_mode),
            sigma_min=np.float64(self.bounds.sigma_min),
            sigma_max=np.float64(self.bounds.sigma_max),
            means=self.means,
            quats=self.quats,
            raw_scales=self.raw_scales,
            opacity_logits=self.opacity_logits,
            sh=self.sh,
            source_kf=self.source_kf,
        )
        real = path if path.endswith(".npz") else path + ".npz"
        return os.path.getsize(real)

    @classmethod
    def load(cls, path: str) -> "GaussianMap":
        with np.load(path) as z:
            version = int(z["format_version"])
            if version != MAP_FORMAT_VERSION:
                raise ValueError(f"unsupported map format version {version}")
            return cls(
                bounds=ScaleBounds(float(z["sigma_min"]), float(z["sigma_max"])),
                scale_mode=str(z["scale_mode"]),
                means=z["means"],
                quats=z["quats"],
                raw_scales=z["raw_scales"],
                opacity_logits=z["opacity_logits"],
                sh=z["sh"],
                source_kf=z["source_kf"],
            )
