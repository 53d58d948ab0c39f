"""Continuous-time rig trajectories and their sampled form.

Every profile is an analytic map ``t -> (pose, velocity, acceleration,
body angular rate)``, so inertial readings can be synthesized exactly and
sampled trajectories agree with their own derivatives to floating point.
Body frame: x forward, y left, z up. World frame: z up.

Profiles:

* ``straight``   constant-velocity line at fixed heading.
* ``square-loop`` four quintic-eased sides with stop-and-turn corners;
  the path closes exactly, which is what loop-closure tests lean on.
* ``orbit``      constant-rate circle, heading locked on the center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import Pose


def _quintic(tau: float):
    """Smoothstep 6t^5-15t^4+10t^3 and its first two derivatives."""
    s = tau**3 * (10.0 + tau * (-15.0 + 6.0 * tau))
    ds = tau**2 * (30.0 + tau * (-60.0 + 30.0 * tau))
    dds = tau * (60.0 + tau * (-180.0 + 120.0 * tau))
    return s, ds, dds


def _yaw_pose(pos: np.ndarray, yaw: float) -> Pose:
    return Pose(Rotation.from_euler("z", yaw).as_quat(), pos)


@dataclass(frozen=True)
class Straight:
    """Level flight at constant speed. ``travel_yaw`` lets the rig crab
    sideways (heading fixed at ``yaw``, motion along ``travel_yaw``)."""

    start: np.ndarray
    yaw: float
    speed: float
    duration: float
    travel_yaw: float | None = None

    def state(self, t: float):
        t = min(max(t, 0.0), self.duration)
        ty = self.yaw if self.travel_yaw is None else self.travel_yaw
        u = np.array([np.cos(ty), np.sin(ty), 0.0])
        pos = np.asarray(self.start, dtype=np.float64) + u * self.speed * t
        vel = u * self.speed
        return _yaw_pose(pos, self.yaw), vel, np.zeros(3), np.zeros(3)


@dataclass(frozen=True)
class SquareLoop:
    """Closed square path: ease along each side, stop, turn 90 deg left.

    Both the translation easing and the corner yaw profile are quintic, so
    velocity and acceleration are continuous (and zero) at every phase
    boundary. After ``laps`` circuits the pose returns to the start exactly.
    """

    origin: np.ndarray
    side: float
    side_time: float = 6.0
    turn_time: float = 2.0
    laps: int = 1

    @property
    def duration(self) -> float:
        return self.laps * 4.0 * (self.side_time + self.turn_time)

    def state(self, t: float):
        per = 4.0 * (self.side_time + self.turn_time)
        t = min(max(t, 0.0), self.duration)
        lap, tau = divmod(t, per)
        if tau == 0.0 and t > 0.0:
            # land on the closing corner of the previous lap, not lap+1 start
            lap -= 1.0
            tau = per
        origin = np.asarray(self.origin, dtype=np.float64)
        dirs = [
            np.array([1.0, 0.0, 0.0]),
            np.array([0.0, 1.0, 0.0]),
            np.array([-1.0, 0.0, 0.0]),
            np.array([0.0, -1.0, 0.0]),
        ]
        corners = [origin]
        for k in range(3):
            corners.append(corners[-1] + dirs[k] * self.side)
        yaw0 = lap * 2.0 * np.pi
        for k in range(4):
            yaw = yaw0 + k * 0.5 * np.pi
            if tau <= self.side_time:
                s, ds, dds = _quintic(tau / self.side_time)
                pos = corners[k] + dirs[k] * self.side * s
                vel = dirs[k] * self.side * ds / self.side_time
                acc = dirs[k] * self.side * dds / self.side_time**2
                return _yaw_pose(pos, yaw), vel, acc, np.zeros(3)
            tau -= self.side_time
            if tau <= self.turn_time:
                pos = corners[k] + dirs[k] * self.side
                s, ds, _ = _quintic(tau / self.turn_time)
                yaw = yaw + 0.5 * np.pi * s
                omega = np.array([0.0, 0.0, 0.5 * np.pi * ds / self.turn_time])
                return _yaw_pose(pos, yaw), np.zeros(3), np.zeros(3), omega
            tau -= self.turn_time
        raise AssertionError("phase walk exhausted")  # pragma: no cover


@dataclass(frozen=True)
class Orbit:
    """Constant-rate circle at fixed height, always facing the center."""

    center: np.ndarray
    radius: float
    period: float
    duration: float
    theta0: float = 0.0

    def state(self, t: float):
        t = min(max(t, 0.0), self.duration)
        rate = 2.0 * np.pi / self.period
        th = self.theta0 + rate * t
        c, s = np.cos(th), np.sin(th)
        center = np.asarray(self.center, dtype=np.float64)
        pos = center + self.radius * np.array([c, s, 0.0])
        vel = self.radius * rate * np.array([-s, c, 0.0])
        acc = -self.radius * rate**2 * np.array([c, s, 0.0])
        # forward axis points at the center
        return _yaw_pose(pos, th + np.pi), vel, acc, np.array([0.0, 0.0, rate])


@dataclass
class Trajectory:
    """Poses (world-from-body) with world-frame velocities at fixed times."""

    times: np.ndarray
    poses: list
    velocities: np.ndarray
    profile: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if len(self.poses) != self.times.size or self.velocities.shape[0] != self.times.size:
            raise ValueError("times, poses, velocities must have equal length")
        if self.times.size >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


def sample_trajectory(profile, rate: float, name: str = "") -> Trajectory:
    """Sample a continuous profile at ``rate`` Hz, endpoint included."""
    n = int(np.floor(profile.duration * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    poses, vels = [], []
    for t in times:
        pose, vel, _, _ = profile.state(t)
        poses.append(pose)
        vels.append(vel)
    return Trajectory(times, poses, np.array(vels), profile=name)


def make_profile(
    name: str,
    extent: float = 8.0,
    height: float = 1.4,
    margin: float = 2.0,
    laps: int = 1,
    side_time: float = 6.0,
    turn_time: float = 2.0,
):
    """Build one of the named profiles sized to fit a square room ``extent``
    meters across, keeping ``margin`` meters of clearance from the walls."""
    if name == "straight":
        length = extent - 2.0 * margin
        return Straight(
            start=np.array([margin, 0.5 * extent, height]),
            yaw=0.0,
            speed=0.5,
            duration=length / 0.5,
        )
    if name == "square-loop":
        return SquareLoop(
            origin=np.array([margin, margin, height]),
            side=extent - 2.0 * margin,
            side_time=side_time,
            turn_time=turn_time,
            laps=laps,
        )
    if name == "orbit":
        period = 24.0
        return Orbit(
            center=np.array([0.5 * extent, 0.5 * extent, height]),
            radius=0.5 * extent - margin,
            period=period,
            duration=laps * period,
        )
    raise ValueError(f"unknown trajectory profile {name!r}")
