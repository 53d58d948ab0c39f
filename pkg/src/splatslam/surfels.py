"""Planar surfel extraction, matching, and geometric residuals.

A surfel is a voxel-downsampled LiDAR point with a PCA normal and the scatter
of its k nearest neighbors. Two residual forms are provided: the
point-to-plane distance used by odometry and the covariance-weighted
(generalized ICP) quadratic form used by the global backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial import cKDTree

from .geometry import Pose

GICP_EPS = 1e-6       # m^2, floors the near-zero planar eigenvalue
GICP_COND_MAX = 1e12


class MatchRejectedError(ValueError):
    """Combined surfel covariance too ill-conditioned to invert."""


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray      # (3,) keyframe body frame, meters
    normal: np.ndarray        # (3,) unit
    covariance: np.ndarray    # (3,3) neighborhood covariance, m^2
    radius: float             # mean neighbor distance, meters
    support_count: int


@dataclass(frozen=True)
class SurfelMatch:
    source_index: int
    target_index: int
    source_kf: int = -1
    target_kf: int = -1


@dataclass
class ExtractionStats:
    n_points: int
    n_seeds: int
    n_dropped: int


def voxel_downsample_indices(points: np.ndarray, voxel: float) -> np.ndarray:
    """One point per occupied voxel: the one closest to the voxel center.

    The center-closest rule keeps the representative stable when the same
    surface is scanned from slightly different poses, which in turn keeps
    cross-frame surfel matching close to one-to-one.
    """
    points = np.asarray(points, dtype=float)
    keys = np.floor(points / voxel).astype(np.int64)
    center_dist = np.linalg.norm(points - (keys + 0.5) * voxel, axis=1)
    # stable pick: sort by (distance, index) then take the first per voxel
    order = np.lexsort((np.arange(len(points)), center_dist))
    _, first = np.unique(keys[order], axis=0, return_index=True)
    return np.sort(order[first])


def extract_surfels(cloud, k: int = 8, voxel: float = 0.2, origin=None):
    """Surfels from a point cloud; returns (surfels, stats).

    Normals are the smallest-eigenvalue directions of the k-neighborhood
    covariance, with sign flipped to face the sensor origin. Neighborhoods
    whose two smallest eigenvalues coincide (no unique normal) are dropped
    and counted in the stats.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if k < 4:
        raise ValueError(f"need k >= 4, got {k}")
    if len(cloud) < k:
        raise ValueError(f"cloud has {len(cloud)} points, need at least {k}")
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)

    seeds = voxel_downsample_indices(cloud, voxel)
    tree = cKDTree(cloud)
    dists, nbr_idx = tree.query(cloud[seeds], k=k)

    surfels = []
    dropped = 0
    for row, seed in enumerate(seeds):
        nbrs = cloud[nbr_idx[row]]
        centered = nbrs - nbrs.mean(axis=0)
        cov = centered.T @ centered / k
        evals, evecs = np.linalg.eigh(cov)
        if evals[1] - evals[0] <= 1e-12:
            dropped += 1
            continue
        normal = evecs[:, 0]
        if normal @ (cloud[seed] - origin) > 0:
            normal = -normal
        surfels.append(Surfel(position=cloud[seed], normal=normal,
                              covariance=cov, radius=float(dists[row].mean()),
                              support_count=k))
    return surfels, ExtractionStats(len(cloud), len(seeds), dropped)


def positions_of(surfels) -> np.ndarray:
    return np.array([s.position for s in surfels]).reshape(-1, 3)


def normals_of(surfels) -> np.ndarray:
    return np.array([s.normal for s in surfels]).reshape(-1, 3)


def icp_residual(p_i, p_j, n_j, pose_i: Pose, pose_j: Pose):
    """Point-to-plane distance of frame-i point p_i against plane (p_j, n_j).

    Both points live in their keyframe body frames; p_i is carried through
    world into frame j and projected onto the target normal.
    """
    in_j = pose_j.inverse().apply(pose_i.apply(p_i))
    diff = in_j - np.asarray(p_j, dtype=float)
    return diff @ n_j if diff.ndim == 1 else np.einsum('nd,nd->n', diff, np.atleast_2d(n_j))


def gicp_combined_covariance(cov_i, cov_j, rel: Pose) -> np.ndarray:
    R = rel.rotation_matrix()
    return cov_j + R @ cov_i @ R.T + GICP_EPS * np.eye(3)


def gicp_residual(p_i, cov_i, p_j, cov_j, rel: Pose) -> float:
    """Covariance-weighted squared alignment error, dimensionless.

    rel is the pose of frame j expressed in frame i; the error vector is
    d = R p_j + t - p_i. Raises MatchRejectedError when the combined
    covariance is too ill-conditioned.
    """
    d = rel.apply(np.asarray(p_j, dtype=float)) - np.asarray(p_i, dtype=float)
    M = gicp_combined_covariance(cov_i, cov_j, rel)
    if np.linalg.cond(M) > GICP_COND_MAX:
        raise MatchRejectedError("combined covariance condition number too large")
    c, low = cho_factor(M)
    return float(d @ cho_solve((c, low), d))


def gicp_whitened_residual(p_i, cov_i, p_j, cov_j, rel: Pose) -> np.ndarray:
    """3-vector r with ||r||^2 equal to the quadratic form, for least squares."""
    d = rel.apply(np.asarray(p_j, dtype=float)) - np.asarray(p_i, dtype=float)
    M = gicp_combined_covariance(cov_i, cov_j, rel)
    if np.linalg.cond(M) > GICP_COND_MAX:
        raise MatchRejectedError("combined covariance condition number too large")
    L = np.linalg.cholesky(M)
    return solve_triangular(L, d, lower=True)


class SparseSurfelMap:
    """Surfels anchored to keyframes, exposed in a common world frame.

    Surfels stay in their keyframe body frame internally; a pose update
    re-anchors the whole keyframe at once, which is how the backend's loop
    corrections reach the geometry without touching any surfel data. The
    world-frame view is cached and rebuilt lazily after any change.
    """

    def __init__(self):
        self._poses: dict[int, Pose] = {}
        self._surfels: dict[int, list] = {}
        self._cache = None

    def __len__(self):
        return sum(len(s) for s in self._surfels.values())

    def __contains__(self, kf_id):
        return kf_id in self._poses

    def keyframe_ids(self):
        return sorted(self._poses)

    def pose_of(self, kf_id: int) -> Pose:
        return self._poses[kf_id]

    def add_keyframe(self, kf_id: int, pose: Pose, surfels):
        if kf_id in self._poses:
            raise ValueError(f"keyframe {kf_id} already in sparse map")
        self._poses[kf_id] = pose
        self._surfels[kf_id] = list(surfels)
        self._cache = None

    def update_pose(self, kf_id: int, pose: Pose):
        if kf_id not in self._poses:
            raise KeyError(f"keyframe {kf_id} not in sparse map")
        self._poses[kf_id] = pose
        self._cache = None

    def surfels_of(self, kf_id: int):
        return self._surfels[kf_id]

    def world_surfels(self):
        """All surfels expressed in world coordinates, with keyframe ids."""
        if self._cache is None:
            out = []
            kf_of = []
            for kf_id in self.keyframe_ids():
                pose = self._poses[kf_id]
                R = pose.rotation_matrix()
                for s in self._surfels[kf_id]:
                    out.append(Surfel(position=pose.apply(s.position),
                                      normal=R @ s.normal,
                                      covariance=R @ s.covariance @ R.T,
                                      radius=s.radius,
                                      support_count=s.support_count))
                    kf_of.append(kf_id)
            self._cache = (out, np.array(kf_of, dtype=np.int64))
        return self._cache


def match_surfels(source, target, rel: Pose, radius: float,
                  normal_tol_deg: float = 30.0, source_kf: int = -1,
                  target_kf: int = -1):
    """Mutual-nearest-neighbor matches from source to target surfels.

    rel maps source-frame coordinates into the target frame. Normals are
    compared as unsigned axes, since the facing convention can differ
    between viewpoints.
    """
    if not source or not target:
        return []
    src_pos = rel.apply(positions_of(source))
    src_nrm = normals_of(source) @ rel.rotation_matrix().T
    tgt_pos = positions_of(target)
    tgt_nrm = normals_of(target)

    tgt_tree = cKDTree(tgt_pos)
    d_st, nn_st = tgt_tree.query(src_pos, k=1)
    src_tree = cKDTree(src_pos)
    _, nn_ts = src_tree.query(tgt_pos, k=1)

    cos_tol = np.cos(np.radians(normal_tol_deg))
    matches = []
    for i, j in enumerate(nn_st):
        if d_st[i] > radius or nn_ts[j] != i:
            continue
        if abs(src_nrm[i] @ tgt_nrm[j]) < cos_tol:
            continue
        matches.append(SurfelMatch(source_index=i, target_index=int(j),
                                   source_kf=source_kf, target_kf=target_kf))
    return matches
