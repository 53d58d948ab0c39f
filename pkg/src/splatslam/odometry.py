"""Keyframe-to-keyframe pose estimation from LiDAR, image, and IMU data.

The frontend predicts motion by integrating gyro/accelerometer readings,
then refines the relative pose with a joint cost: point-to-plane residuals
between matched surfels plus intensity differences of sparse image features
warped through the candidate pose. Both residual families pass through a
Huber transform before the least-squares solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, Pose, perturb_pose, project_points
from .optim import huber_residual, levenberg_marquardt
from .surfels import extract_surfels, icp_residual, match_surfels, normals_of, positions_of


class InsufficientImuDataError(ValueError):
    """Raised when an inertial segment is too short to integrate."""


@dataclass
class ImuSegment:
    """Inertial readings spanning the interval between two keyframes.

    ``times`` are seconds, strictly increasing. ``gyro`` rows are body-frame
    angular rates in rad/s, ``accel`` rows are specific force in m/s^2
    (gravity-compensated only after integration). The bias vectors are the
    true constant biases baked into the readings; the integrator subtracts
    them. Bias estimation is out of scope, so they travel with the data.
    """

    times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=np.float64).reshape(3)
        self.bias_accel = np.asarray(self.bias_accel, dtype=np.float64).reshape(3)
        n = self.times.size
        if self.gyro.shape[0] != n or self.accel.shape[0] != n:
            raise ValueError("gyro/accel row count must match times")
        if n >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


def integrate_imu(segment: ImuSegment, start: Pose, start_velocity, gravity):
    """Euler-integrate a segment from a known start state.

    Returns ``(end_pose, end_velocity)``. The scheme is first order: position
    advances with the pre-update velocity, velocity with the rotated specific
    force plus gravity, and orientation by the exponential of the body rate
    times the step. Good to centimeters over half-second segments at 200 Hz,
    which is all the odometry prior needs.
    """
    if len(segment) < 2:
        raise InsufficientImuDataError(
            f"need at least 2 IMU samples, got {len(segment)}"
        )
    gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
    rot = start.rotation_matrix()
    pos = start.t.copy()
    vel = np.asarray(start_velocity, dtype=np.float64).reshape(3).copy()
    omega = segment.gyro - segment.bias_gyro
    force = segment.accel - segment.bias_accel
    dts = np.diff(segment.times)
    for k, dt in enumerate(dts):
        pos = pos + vel * dt
        vel = vel + (rot @ force[k] + gravity) * dt
        rot = rot @ Rotation.from_rotvec(omega[k] * dt).as_matrix()
    return Pose(Rotation.from_matrix(rot).as_quat(), pos), vel


class FeatureWarpError(ValueError):
    """Raised when a warped feature cannot be sampled (excluded, not zeroed)."""


@dataclass
class TrackedFeature:
    """A high-gradient pixel of the host image with range-assigned depth.
    ``point3d`` lives in the host camera frame."""

    pixel: np.ndarray
    point3d: np.ndarray
    host_kf: int = -1
    target_kf: int = -1

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        self.point3d = np.asarray(self.point3d, dtype=np.float64).reshape(3)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).mean(axis=2)


def bilinear_sample(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at ``(x, y)`` pixel locations, coordinates
    clamped to the valid interior so the function is continuous everywhere
    (the optimizer relies on that; bounds policy is the caller's job)."""
    xy = np.atleast_2d(xy)
    h, w = image.shape[:2]
    x = np.clip(xy[:, 0], 0.0, w - 1.000001)
    y = np.clip(xy[:, 1], 0.0, h - 1.000001)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def photometric_residual(
    feature: TrackedFeature,
    image_i: np.ndarray,
    image_j: np.ndarray,
    rel: Pose,
    intr: CameraIntrinsics,
) -> float:
    """Intensity difference ``I_i(u) - I_j(warp(u))`` for one feature.

    ``rel`` maps host-camera points into the target camera frame. Features
    that land behind the target camera or outside the image (with a one
    pixel bilinear margin) raise :class:`FeatureWarpError`; callers drop
    them rather than zero-filling.
    """
    p_j = rel.apply(feature.point3d)
    if p_j[2] <= 0.0:
        raise FeatureWarpError("feature warped behind the target camera")
    u = intr.fx * p_j[0] / p_j[2] + intr.cx
    v = intr.fy * p_j[1] / p_j[2] + intr.cy
    if not (1.0 <= u <= intr.width - 2.0 and 1.0 <= v <= intr.height - 2.0):
        raise FeatureWarpError("feature warped out of the target image")
    host = image_i[int(round(feature.pixel[1])), int(round(feature.pixel[0]))]
    return float(host - bilinear_sample(image_j, np.array([[u, v]]))[0])


def select_feature_pixels(
    gray: np.ndarray, n_features: int = 150, min_spacing: float = 10.0
) -> np.ndarray:
    """Top-gradient-magnitude pixels, greedily thinned so accepted pixels
    keep at least ``min_spacing`` pixels between them. Returns (M, 2)
    integer ``[u, v]`` rows, strongest first."""
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    # border pixels cannot anchor a safe bilinear warp
    mag[0, :] = mag[-1, :] = 0.0
    mag[:, 0] = mag[:, -1] = 0.0
    order = np.argsort(mag, axis=None)[::-1]
    vs, us = np.unravel_index(order, mag.shape)
    chosen = []
    min_sq = min_spacing * min_spacing
    for u, v in zip(us, vs):
        if mag[v, u] <= 0.0:
            break
        ok = True
        for cu, cv in chosen:
            if (u - cu) ** 2 + (v - cv) ** 2 < min_sq:
                ok = False
                break
        if ok:
            chosen.append((int(u), int(v)))
            if len(chosen) >= n_features:
                break
    return np.array(chosen, dtype=np.int64).reshape(-1, 2)


def assign_feature_depths(
    pixels: np.ndarray,
    cloud_cam: np.ndarray,
    intr: CameraIntrinsics,
    radius_px: float = 2.0,
    host_kf: int = -1,
) -> list:
    """Back-project feature pixels using the depth of the nearest projected
    range point within ``radius_px``. Pixels without range support are
    dropped."""
    if pixels.size == 0 or cloud_cam.shape[0] == 0:
        return []
    front = cloud_cam[cloud_cam[:, 2] > 1e-6]
    if front.shape[0] == 0:
        return []
    uv = project_points(front, intr)
    tree = cKDTree(uv)
    dist, idx = tree.query(pixels.astype(np.float64), k=1)
    feats = []
    for row, (d, j) in enumerate(zip(dist, idx)):
        if d > radius_px:
            continue
        z = front[j, 2]
        u, v = pixels[row]
        p = np.array([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])
        feats.append(TrackedFeature(pixel=pixels[row], point3d=p, host_kf=host_kf))
    return feats


@dataclass
class FrontendFrame:
    """Per-keyframe data the frontend actually optimizes against: body-frame
    surfels for the geometric term, grayscale image plus depth-anchored
    features for the photometric term."""

    index: int
    gray: np.ndarray
    surfels: list
    features: list
    intr: CameraIntrinsics
    body_from_camera: Pose


def prepare_frame(
    kf,
    calibration,
    *,
    voxel: float = 0.2,
    knn: int = 8,
    n_features: int = 150,
    min_spacing: float = 10.0,
    depth_radius_px: float = 2.0,
) -> FrontendFrame:
    """Extract the frontend working set from a raw keyframe."""
    bfl = calibration.body_from_lidar
    cloud_body = bfl.apply(kf.cloud) if kf.cloud.shape[0] else kf.cloud
    surfels, _ = extract_surfels(cloud_body, k=knn, voxel=voxel, origin=bfl.t)
    gray = to_grayscale(kf.image)
    pixels = select_feature_pixels(gray, n_features=n_features, min_spacing=min_spacing)
    cam_from_body = calibration.body_from_camera.inverse()
    cloud_cam = cam_from_body.apply(cloud_body) if cloud_body.shape[0] else cloud_body
    features = assign_feature_depths(
        pixels, cloud_cam, calibration.camera, radius_px=depth_radius_px, host_kf=kf.index
    )
    return FrontendFrame(
        index=kf.index,
        gray=gray,
        surfels=surfels,
        features=features,
        intr=calibration.camera,
        body_from_camera=calibration.body_from_camera,
    )


@dataclass
class RelativePoseResult:
    """``pose`` maps points from frame j's body into frame i's body."""

    pose: Pose
    converged: bool
    failed: bool
    n_surfel_matches: int
    n_features: int
    cost: float


def _joint_residuals(
    frame_i: FrontendFrame,
    frame_j: FrontendFrame,
    rel: Pose,
    matches,
    host_vals: np.ndarray,
    points_i_cam: np.ndarray,
    lam: float,
    delta_icp: float,
    delta_photo: float,
) -> np.ndarray:
    """Huberized stack of point-to-plane and intensity residuals at ``rel``
    (j-body into i-body). The feature set is frozen by the caller; samples
    use clamped bilinear interpolation so the cost stays continuous."""
    parts = []
    if matches:
        src = positions_of(frame_j.surfels)[[m.source_index for m in matches]]
        tgt_pos = positions_of(frame_i.surfels)[[m.target_index for m in matches]]
        tgt_nrm = normals_of(frame_i.surfels)[[m.target_index for m in matches]]
        r = icp_residual(src, tgt_pos, tgt_nrm, rel, Pose.identity())
        parts.append(huber_residual(r, delta_icp))
    if host_vals.size:
        cam_rel = frame_j.body_from_camera.inverse().compose(
            rel.inverse().compose(frame_i.body_from_camera)
        )
        p_j = cam_rel.apply(points_i_cam)
        z = np.maximum(p_j[:, 2], 1e-3)  # keep the warp finite behind the camera
        u = frame_j.intr.fx * p_j[:, 0] / z + frame_j.intr.cx
        v = frame_j.intr.fy * p_j[:, 1] / z + frame_j.intr.cy
        warped = bilinear_sample(frame_j.gray, np.stack([u, v], axis=1))
        r = host_vals - warped
        parts.append(np.sqrt(lam) * huber_residual(r, delta_photo))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def odometry_cost(
    frame_i: FrontendFrame,
    frame_j: FrontendFrame,
    rel: Pose,
    lam: float = 0.01,
    match_radius: float = 0.5,
    delta_icp: float = 0.05,
    delta_photo: float = 0.1,
) -> float:
    """Joint frontend cost at a candidate relative pose (sum of squared
    Huberized residuals, features and matches selected at ``rel``)."""
    matches = match_surfels(frame_j.surfels, frame_i.surfels, rel, match_radius)
    host_vals, points = _frozen_features(frame_i, frame_j, rel)
    r = _joint_residuals(
        frame_i, frame_j, rel, matches, host_vals, points, lam, delta_icp, delta_photo
    )
    return float(r @ r)


def _frozen_features(frame_i: FrontendFrame, frame_j: FrontendFrame, rel: Pose):
    """Features of frame i whose warp into frame j at ``rel`` is safely
    inside the image; returns (host intensities, host camera points)."""
    if not frame_i.features:
        return np.zeros(0), np.zeros((0, 3))
    pts = np.array([f.point3d for f in frame_i.features])
    pix = np.array([f.pixel for f in frame_i.features])
    cam_rel = frame_j.body_from_camera.inverse().compose(
        rel.inverse().compose(frame_i.body_from_camera)
    )
    p_j = cam_rel.apply(pts)
    ok = p_j[:, 2] > 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        u = frame_j.intr.fx * p_j[:, 0] / p_j[:, 2] + frame_j.intr.cx
        v = frame_j.intr.fy * p_j[:, 1] / p_j[:, 2] + frame_j.intr.cy
    margin = 4.0
    ok &= (u >= margin) & (u <= frame_j.intr.width - 1 - margin)
    ok &= (v >= margin) & (v <= frame_j.intr.height - 1 - margin)
    host_vals = frame_i.gray[pix[ok, 1].astype(int), pix[ok, 0].astype(int)]
    return host_vals, pts[ok]


def estimate_relative_pose(
    frame_i: FrontendFrame,
    frame_j: FrontendFrame,
    prior: Pose,
    lam: float = 0.01,
    *,
    match_radii=(0.6, 0.3),
    delta_icp: float = 0.05,
    delta_photo: float = 0.1,
    max_iters: int = 25,
    min_surfel_matches: int = 10,
    min_features: int = 20,
) -> RelativePoseResult:
    """Refine the body-frame relative pose of keyframe j in keyframe i.

    Each round freezes surfel matches and the in-bounds feature set at the
    current estimate, then runs Levenberg-Marquardt on a local twist. Too
    little data of both kinds falls back to the prior; LM divergence
    returns the prior with the failure flag set.
    """
    rel = prior
    n_matches = 0
    n_feats = 0
    cost = np.inf
    any_solve = False
    for radius in match_radii:
        matches = match_surfels(frame_j.surfels, frame_i.surfels, rel, radius)
        host_vals, points = _frozen_features(frame_i, frame_j, rel)
        n_matches = len(matches)
        n_feats = host_vals.size
        if n_matches < min_surfel_matches and n_feats < min_features:
            continue
        rel0 = rel

        def residual_fn(x):
            return _joint_residuals(
                frame_i,
                frame_j,
                se3_refine(rel0, x),
                matches,
                host_vals,
                points,
                lam,
                delta_icp,
                delta_photo,
            )

        result = levenberg_marquardt(residual_fn, np.zeros(6), max_iters=max_iters)
        if result.diverged:
            return RelativePoseResult(
                pose=prior,
                converged=False,
                failed=True,
                n_surfel_matches=n_matches,
                n_features=n_feats,
                cost=float(cost),
            )
        rel = se3_refine(rel0, result.params)
        cost = result.cost
        any_solve = True
    if not any_solve:
        return RelativePoseResult(
            pose=prior,
            converged=False,
            failed=True,
            n_surfel_matches=n_matches,
            n_features=n_feats,
            cost=float(cost),
        )
    return RelativePoseResult(
        pose=rel,
        converged=True,
        failed=False,
        n_surfel_matches=n_matches,
        n_features=n_feats,
        cost=float(cost),
    )


def se3_refine(base: Pose, twist: np.ndarray) -> Pose:
    """Left-multiplicative local update used by all pose optimizers here."""
    return perturb_pose(base, twist)


def should_insert_keyframe(
    last: Pose, current: Pose, trans_thresh: float = 0.5, rot_thresh_deg: float = 10.0
) -> bool:
    """Keyframe gate: accept once translation or rotation from the last
    keyframe exceeds its threshold."""
    return (
        last.translation_distance_to(current) > trans_thresh
        or np.degrees(last.rotation_angle_to(current)) > rot_thresh_deg
    )
