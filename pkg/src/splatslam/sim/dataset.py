"""Dataset container plus generation and versioned on-disk formats.

Layout of a saved dataset directory::

    calib.json        intrinsics, sensor mounts, IMU rate/biases, gravity
    manifest.json     frame table (files, timestamps, held-out flags)
    groundtruth.txt   "t tx ty tz qx qy qz qw" per line (world-from-body)
    velocity.txt      "t vx vy vz" per line (world frame)
    frames/
      frame_000000.ppm    16-bit binary P6 image
      frame_000000.cloud  range-sensor points, binary (header documented
                          at :func:`write_cloud`)
      frame_000000.imu    text rows "t gx gy gz ax ay az"

Generation is deterministic: every frame draws its noise from an
independent seed stream keyed on ``(dataset seed, frame index)``, so
frames could be produced in parallel or any order with identical output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..geometry import CameraIntrinsics, Pose
from ..odometry import ImuSegment
from .scene import EmptySceneError, Scene, build_scene
from .sensors import (
    lidar_ray_directions,
    render_camera_image,
    sample_imu,
    scan_range_sensor,
)
from .trajectory import Trajectory, make_profile, sample_trajectory

DATASET_FORMAT_VERSION = 1
_CLOUD_MAGIC = b"SPLATCLD"

# camera mounted on the body: z(cam, forward) = x(body), x(cam, right) =
# -y(body), y(cam, down) = -z(body), nudged forward and up of the body origin
_R_BODY_FROM_CAMERA = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)
_T_BODY_FROM_CAMERA = np.array([0.08, 0.0, 0.05])
_T_BODY_FROM_LIDAR = np.array([0.10, 0.0, 0.10])


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor corruption levels; all zeros means analytically exact data."""

    range_sigma: float = 0.01
    image_sigma: float = 0.005
    gyro_sigma: float = 2e-3
    accel_sigma: float = 2e-2
    bias_gyro: tuple = (0.002, -0.0015, 0.001)
    bias_accel: tuple = (0.02, 0.01, -0.015)

    @staticmethod
    def zero() -> "NoiseConfig":
        return NoiseConfig(0.0, 0.0, 0.0, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def as_dict(self) -> dict:
        return {
            "range_sigma": self.range_sigma,
            "image_sigma": self.image_sigma,
            "gyro_sigma": self.gyro_sigma,
            "accel_sigma": self.accel_sigma,
            "bias_gyro": list(self.bias_gyro),
            "bias_accel": list(self.bias_accel),
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseConfig":
        return NoiseConfig(
            range_sigma=float(d["range_sigma"]),
            image_sigma=float(d["image_sigma"]),
            gyro_sigma=float(d["gyro_sigma"]),
            accel_sigma=float(d["accel_sigma"]),
            bias_gyro=tuple(d["bias_gyro"]),
            bias_accel=tuple(d["bias_accel"]),
        )


@dataclass
class Calibration:
    """Sensor rig description. Mount poses map sensor-frame points into the
    body frame; biases are the true constants baked into the IMU stream."""

    camera: CameraIntrinsics
    body_from_camera: Pose
    body_from_lidar: Pose
    imu_rate: float = 200.0
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=np.float64).reshape(3)
        self.bias_accel = np.asarray(self.bias_accel, dtype=np.float64).reshape(3)


def default_calibration(width: int = 256, height: int = 256) -> Calibration:
    intr = CameraIntrinsics(
        fx=200.0 * width / 256.0,
        fy=200.0 * width / 256.0,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )
    return Calibration(
        camera=intr,
        body_from_camera=Pose.from_matrix(
            np.block(
                [
                    [_R_BODY_FROM_CAMERA, _T_BODY_FROM_CAMERA[:, None]],
                    [np.zeros((1, 3)), np.ones((1, 1))],
                ]
            )
        ),
        body_from_lidar=Pose(np.array([0.0, 0.0, 0.0, 1.0]), _T_BODY_FROM_LIDAR),
    )


@dataclass
class Keyframe:
    """One synchronized sensor snapshot. ``cloud`` is in the range-sensor
    frame; ``imu`` spans the interval since the previous keyframe (the first
    keyframe carries a short stationary lead-in stub so every entry has a
    complete sensor triple)."""

    index: int
    timestamp: float
    image: np.ndarray
    cloud: np.ndarray
    imu: ImuSegment
    gt_pose: Pose | None = None
    held_out: bool = False


@dataclass
class Dataset:
    keyframes: list
    ground_truth: Trajectory
    calibration: Calibration
    profile: str
    noise: NoiseConfig
    seed: int
    background: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.08]))
    scene: Scene | None = None

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def validate(self):
        ts = [kf.timestamp for kf in self.keyframes]
        if not all(b > a for a, b in zip(ts, ts[1:])):
            raise ValueError("keyframe timestamps must be strictly increasing")
        for kf in self.keyframes:
            if kf.image is None or kf.cloud is None or kf.imu is None:
                raise ValueError(f"keyframe {kf.index} is missing a sensor stream")
        if len(self.ground_truth) != len(self.keyframes):
            raise ValueError("ground-truth trajectory length mismatch")

    def held_out_indices(self) -> list:
        return [kf.index for kf in self.keyframes if kf.held_out]


def generate_dataset(
    scene_seed: int,
    profile: str = "square-loop",
    noise: NoiseConfig | None = None,
    *,
    scene: Scene | None = None,
    profile_obj=None,
    image_size: tuple = (256, 256),
    kf_rate: float = 2.0,
    lidar_n_az: int = 64,
    lidar_n_el: int = 48,
    lidar_az_fov: float = 70.0,
    lidar_el_fov: float = 50.0,
    lidar_max_range: float = 50.0,
    held_out_every: int = 5,
    laps: int = 1,
    side_time: float = 6.0,
    turn_time: float = 2.0,
    background=(0.05, 0.05, 0.08),
    blind: bool = False,
) -> Dataset:
    """Simulate one full sequence over a scene.

    ``profile_obj`` overrides the named profile when a test needs a custom
    path (for example crabbing sideways along the corridor wall). Held-out
    keyframes (every ``held_out_every``-th, starting at index
    ``held_out_every - 1``) are flagged so the mapper can skip them and the
    evaluator can grade novel-view quality on them.
    """
    noise = noise if noise is not None else NoiseConfig()
    scene = scene if scene is not None else build_scene(scene_seed)
    if not scene.primitives:
        raise EmptySceneError("cannot generate a dataset from an empty scene")
    prof = profile_obj if profile_obj is not None else make_profile(
        profile,
        extent=scene.extent,
        laps=laps,
        side_time=side_time,
        turn_time=turn_time,
    )
    traj = sample_trajectory(prof, kf_rate, name=profile)
    width, height = image_size
    calib = default_calibration(width, height)
    calib.bias_gyro = np.asarray(noise.bias_gyro, dtype=np.float64)
    calib.bias_accel = np.asarray(noise.bias_accel, dtype=np.float64)
    lidar_dirs = lidar_ray_directions(lidar_n_az, lidar_n_el, lidar_az_fov, lidar_el_fov)
    background = np.asarray(background, dtype=np.float64)

    keyframes = []
    for i in range(len(traj)):
        rng = np.random.default_rng([scene_seed, 7771, i])
        wfb = traj.poses[i]
        image = render_camera_image(
            scene,
            wfb.compose(calib.body_from_camera),
            calib.camera,
            background,
            image_sigma=noise.image_sigma,
            rng=rng,
        )
        cloud = scan_range_sensor(
            scene,
            wfb.compose(calib.body_from_lidar),
            lidar_dirs,
            range_sigma=noise.range_sigma,
            max_range=lidar_max_range,
            rng=rng,
        )
        if i == 0:
            t0, t1 = traj.times[0] - 1.0 / kf_rate, traj.times[0]
        else:
            t0, t1 = traj.times[i - 1], traj.times[i]
        imu = sample_imu(
            prof,
            t0,
            t1,
            calib.imu_rate,
            calib.gravity,
            calib.bias_gyro,
            calib.bias_accel,
            gyro_sigma=noise.gyro_sigma,
            accel_sigma=noise.accel_sigma,
            rng=rng,
        )
        keyframes.append(
            Keyframe(
                index=i,
                timestamp=float(traj.times[i]),
                image=image,
                cloud=cloud,
                imu=imu,
                gt_pose=None if blind else wfb,
                held_out=(held_out_every > 0 and i % held_out_every == held_out_every - 1),
            )
        )
    ds = Dataset(
        keyframes=keyframes,
        ground_truth=traj,
        calibration=calib,
        profile=profile,
        noise=noise,
        seed=scene_seed,
        background=background,
        scene=scene,
    )
    ds.validate()
    return ds


# --- image format ---------------------------------------------------------


def write_ppm16(path, image: np.ndarray):
    """Binary P6 with maxval 65535; samples big-endian per the PPM spec."""
    img = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535.0)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n65535\n" % (w, h))
        f.write(img.astype(">u2").tobytes())


def read_ppm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 65535:
        raise ValueError(f"expected 16-bit PPM, maxval was {maxval}")
    img = np.frombuffer(data, dtype=">u2", offset=pos, count=w * h * 3)
    return img.reshape(h, w, 3).astype(np.float64) / 65535.0


# --- point-cloud format ---------------------------------------------------


def write_cloud(path, cloud: np.ndarray):
    """Binary cloud file: 8-byte magic ``SPLATCLD``, then little-endian
    uint32 format version and uint32 point count, then ``count`` xyz
    triples as little-endian float32."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    with open(path, "wb") as f:
        f.write(_CLOUD_MAGIC)
        f.write(struct.pack("<II", DATASET_FORMAT_VERSION, cloud.shape[0]))
        f.write(cloud.astype("<f4").tobytes())


def read_cloud(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CLOUD_MAGIC:
            raise ValueError(f"bad cloud magic in {path}")
        version, count = struct.unpack("<II", f.read(8))
        if version != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported cloud format version {version}")
        data = np.frombuffer(f.read(count * 12), dtype="<f4")
    return data.reshape(count, 3).astype(np.float64)


# --- dataset directory ----------------------------------------------------


def _pose_to_dict(pose: Pose) -> dict:
    return {"q": pose.q.tolist(), "t": pose.t.tolist()}


def _pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["q"]), np.array(d["t"]))


def save_dataset(ds: Dataset, path):
    """Write the directory layout documented in the module docstring.
    Ground truth must be present (save before blinding)."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    calib = ds.calibration
    (root / "calib.json").write_text(
        json.dumps(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "camera": calib.camera.as_dict(),
                "body_from_camera": _pose_to_dict(calib.body_from_camera),
                "body_from_lidar": _pose_to_dict(calib.body_from_lidar),
                "imu_rate": calib.imu_rate,
                "gravity": calib.gravity.tolist(),
                "bias_gyro": calib.bias_gyro.tolist(),
                "bias_accel": calib.bias_accel.tolist(),
            },
            indent=2,
        )
    )
    frames = []
    for kf in ds.keyframes:
        stem = f"frame_{kf.index:06d}"
        write_ppm16(root / "frames" / f"{stem}.ppm", kf.image)
        write_cloud(root / "frames" / f"{stem}.cloud", kf.cloud)
        imu_rows = np.hstack([kf.imu.times[:, None], kf.imu.gyro, kf.imu.accel])
        # 17 significant digits: doubles survive the text round trip exactly
        np.savetxt(
            root / "frames" / f"{stem}.imu",
            imu_rows,
            fmt="%.17e",
            header="t gx gy gz ax ay az",
        )
        frames.append(
            {
                "index": kf.index,
                "timestamp": kf.timestamp,
                "image": f"frames/{stem}.ppm",
                "cloud": f"frames/{stem}.cloud",
                "imu": f"frames/{stem}.imu",
                "held_out": kf.held_out,
            }
        )
    (root / "manifest.json").write_text(
        json.dumps(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "profile": ds.profile,
                "seed": ds.seed,
                "noise": ds.noise.as_dict(),
                "background": ds.background.tolist(),
                "frames": frames,
            },
            indent=2,
        )
    )
    gt = ds.ground_truth
    with open(root / "groundtruth.txt", "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(gt.times, gt.poses):
            f.write(
                "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                % (t, *pose.t, *pose.q)
            )
    with open(root / "velocity.txt", "w") as f:
        f.write("# timestamp vx vy vz\n")
        for t, v in zip(gt.times, gt.velocities):
            f.write("%.9f %.9f %.9f %.9f\n" % (t, *v))


def load_dataset(path, blind: bool = False) -> Dataset:
    """Read a saved dataset. ``blind=True`` withholds per-keyframe poses
    (the ground-truth trajectory stays available for evaluation only)."""
    root = Path(path)
    calib_d = json.loads((root / "calib.json").read_text())
    if calib_d["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported calib format version {calib_d['format_version']}")
    calib = Calibration(
        camera=CameraIntrinsics.from_dict(calib_d["camera"]),
        body_from_camera=_pose_from_dict(calib_d["body_from_camera"]),
        body_from_lidar=_pose_from_dict(calib_d["body_from_lidar"]),
        imu_rate=float(calib_d["imu_rate"]),
        gravity=np.array(calib_d["gravity"]),
        bias_gyro=np.array(calib_d["bias_gyro"]),
        bias_accel=np.array(calib_d["bias_accel"]),
    )
    manifest = json.loads((root / "manifest.json").read_text())
    gt_rows = np.loadtxt(root / "groundtruth.txt", ndmin=2)
    vel_rows = np.loadtxt(root / "velocity.txt", ndmin=2)
    poses = [Pose(row[4:8], row[1:4]) for row in gt_rows]
    traj = Trajectory(
        times=gt_rows[:, 0],
        poses=poses,
        velocities=vel_rows[:, 1:4],
        profile=manifest["profile"],
    )
    keyframes = []
    for entry, pose in zip(manifest["frames"], poses):
        imu_rows = np.loadtxt(root / entry["imu"], ndmin=2)
        imu = ImuSegment(
            times=imu_rows[:, 0],
            gyro=imu_rows[:, 1:4],
            accel=imu_rows[:, 4:7],
            bias_gyro=calib.bias_gyro,
            bias_accel=calib.bias_accel,
        )
        keyframes.append(
            Keyframe(
                index=int(entry["index"]),
                timestamp=float(entry["timestamp"]),
                image=read_ppm16(root / entry["image"]),
                cloud=read_cloud(root / entry["cloud"]),
                imu=imu,
                gt_pose=None if blind else pose,
                held_out=bool(entry["held_out"]),
            )
        )
    ds = Dataset(
        keyframes=keyframes,
        ground_truth=traj,
        calibration=calib,
        profile=manifest["profile"],
        noise=NoiseConfig.from_dict(manifest["noise"]),
        seed=int(manifest["seed"]),
        background=np.array(manifest["background"]),
        scene=None,
    )
    ds.validate()
    return ds


def blind_copy(ds: Dataset) -> Dataset:
    """In-memory equivalent of ``load_dataset(..., blind=True)``."""
    kfs = [replace(kf, gt_pose=None) for kf in ds.keyframes]
    return replace(ds, keyframes=kfs)
