"""Synthetic sensor rig: analytic scenes, trajectories, and dataset I/O."""

from .scene import (
    ColorField,
    EmptySceneError,
    Rect,
    Scene,
    Sphere,
    build_corridor_scene,
    build_scene,
    build_sky_scene,
)
from .trajectory import Trajectory, make_profile, sample_trajectory
from .dataset import (
    Calibration,
    Dataset,
    Keyframe,
    NoiseConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)

__all__ = [
    "Calibration",
    "ColorField",
    "Dataset",
    "EmptySceneError",
    "Keyframe",
    "NoiseConfig",
    "Rect",
    "Scene",
    "Sphere",
    "Trajectory",
    "build_corridor_scene",
    "build_scene",
    "build_sky_scene",
    "generate_dataset",
    "load_dataset",
    "make_profile",
    "sample_trajectory",
    "save_dataset",
]
