"""Ray-traced camera, scanning range sensor, and inertial sampling.

The camera shoots one ray per pixel center through the analytic scene.
The range sensor sweeps a fixed azimuth/elevation grid and reports points
in its own frame, so ``range * direction`` lands exactly on a surface when
noise is off. Inertial readings come from the trajectory's analytic
derivatives: specific force is ``R^T (a_world - g)`` plus bias and noise.
"""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, Pose
from ..odometry import ImuSegment
from .scene import Scene


def camera_ray_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions through every pixel center, camera frame,
    row-major ``(H*W, 3)``."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack(
        [
            (uu - intr.cx) / intr.fx,
            (vv - intr.cy) / intr.fy,
            np.ones_like(uu),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def render_camera_image(
    scene: Scene,
    world_from_camera: Pose,
    intr: CameraIntrinsics,
    background,
    image_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Ray-trace an ``(H, W, 3)`` image in [0, 1]."""
    dirs_cam = camera_ray_directions(intr)
    rot = world_from_camera.rotation_matrix()
    dirs_w = dirs_cam @ rot.T
    origins = np.broadcast_to(world_from_camera.t, dirs_w.shape)
    hits = scene.raycast(origins, dirs_w)
    img = scene.shade(hits, dirs_w, background).reshape(intr.height, intr.width, 3)
    if image_sigma > 0.0:
        if rng is None:
            raise ValueError("image noise requires an rng")
        img = np.clip(img + rng.normal(0.0, image_sigma, size=img.shape), 0.0, 1.0)
    return img


def lidar_ray_directions(
    n_az: int = 64,
    n_el: int = 48,
    az_fov_deg: float = 70.0,
    el_fov_deg: float = 50.0,
) -> np.ndarray:
    """Unit directions of a forward-looking az/el scan grid, sensor frame
    (x forward, y left, z up), shape ``(n_az*n_el, 3)``."""
    az = np.deg2rad(np.linspace(-0.5 * az_fov_deg, 0.5 * az_fov_deg, n_az))
    el = np.deg2rad(np.linspace(-0.5 * el_fov_deg, 0.5 * el_fov_deg, n_el))
    aa, ee = np.meshgrid(az, el)
    return np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)],
        axis=-1,
    ).reshape(-1, 3)


def scan_range_sensor(
    scene: Scene,
    world_from_sensor: Pose,
    dirs: np.ndarray,
    range_sigma: float = 0.0,
    max_range: float = 50.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Cast the scan grid, return hit points in the sensor frame ``(M, 3)``.
    Misses and returns beyond ``max_range`` are dropped."""
    rot = world_from_sensor.rotation_matrix()
    dirs_w = dirs @ rot.T
    origins = np.broadcast_to(world_from_sensor.t, dirs_w.shape)
    hits = scene.raycast(origins, dirs_w, t_max=max_range)
    r = hits.t[hits.hit]
    if range_sigma > 0.0:
        if rng is None:
            raise ValueError("range noise requires an rng")
        r = r + rng.normal(0.0, range_sigma, size=r.shape)
    return dirs[hits.hit] * r[:, None]


def sample_imu(
    profile,
    t0: float,
    t1: float,
    rate: float,
    gravity,
    bias_gyro,
    bias_accel,
    gyro_sigma: float = 0.0,
    accel_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ImuSegment:
    """Synthesize inertial readings over ``[t0, t1]`` from a continuous
    trajectory profile, endpoints included."""
    if t1 <= t0:
        raise ValueError("segment must have positive duration")
    gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
    n = max(2, int(round((t1 - t0) * rate)) + 1)
    times = np.linspace(t0, t1, n)
    gyro = np.empty((n, 3))
    accel = np.empty((n, 3))
    for k, t in enumerate(times):
        pose, _, acc, omega = profile.state(t)
        gyro[k] = omega
        accel[k] = pose.rotation_matrix().T @ (acc - gravity)
    gyro += np.asarray(bias_gyro, dtype=np.float64)
    accel += np.asarray(bias_accel, dtype=np.float64)
    if gyro_sigma > 0.0 or accel_sigma > 0.0:
        if rng is None:
            raise ValueError("IMU noise requires an rng")
        gyro += rng.normal(0.0, gyro_sigma, size=gyro.shape)
        accel += rng.normal(0.0, accel_sigma, size=accel.shape)
    return ImuSegment(
        times=times,
        gyro=gyro,
        accel=accel,
        bias_gyro=bias_gyro,
        bias_accel=bias_accel,
    )
