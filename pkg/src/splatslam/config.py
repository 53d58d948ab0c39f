"""One flat run configuration covering every tunable in the pipeline.

Each knob lives here under the stage that consumes it, serialized to a
single YAML file so a run is reproducible from its config alone. The
ablation toggles are ordinary fields: scale_mode switches the map between
the bounded sigmoid encoding and a raw exponential, surfel_edges_enabled
turns the backend's geometric loop constraints on or off.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import yaml


@dataclass
class PipelineConfig:
    # frontend: surfel extraction and joint pose solve
    surfel_voxel: float = 0.2          # m, cloud downsample cell
    surfel_knn: int = 8                # neighborhood for normal/covariance
    lambda_photo: float = 0.01         # photometric weight in odometry
    delta_icp: float = 0.05            # m, robust width of the plane term
    delta_photo: float = 0.1           # intensity units, robust width
    odom_match_radii: tuple = (0.6, 0.3)
    odom_min_matches: int = 10
    n_features: int = 150

    # local mapper: sliding window and splat refinement
    window_capacity: int = 8
    iters_per_cycle: int = 12
    grad_mode: str = "round_robin"     # or "summed": every view per step
    lambda_ssim: float = 0.2
    window_match_radii: tuple = (0.6, 0.3)
    window_min_matches: int = 10

    # splat map: seeding and the scale encoding
    scale_mode: str = "bounded"        # "exp" disables the scale bounds
    sigma_min: float = 0.005           # m
    sigma_max: float = 1.0             # m, initial ceiling; adapts upward
    r_target: float = 2.0              # px, seeded footprint radius
    seed_voxel: float = 0.12           # m, one seed per occupied cell
    scene_extent: float = 8.0          # m, scales the position step size

    # backend: pose graph and loop closure
    lambda_surfel: float = 1.0
    odom_sigma_t: float = 0.01         # m, odometry edge stddev
    odom_sigma_r_deg: float = 0.5      # deg
    loop_radius: float = 5.0           # m, candidate search radius
    loop_min_gap: int = 20             # keyframes
    loop_fitness_min: float = 0.4
    surfel_edges_enabled: bool = True
    surfel_edge_every: int = 10        # periodic pair rule: every Nth kf
    surfel_edge_radius: float = 5.0    # m, periodic pair distance cap
    incremental_horizon: int = 10      # graph distance for local re-opt
    loop_refine_iters: int = 30        # appearance polish after correction
    loop_refine_views: int = 8         # render budget for the polish

    # orchestration
    mapping_enabled: bool = True
    use_gt_poses: bool = False         # oracle mode: skip odometry
    keyframe_stride: int = 1           # consume every Nth dataset keyframe

    def __post_init__(self):
        self.odom_match_radii = tuple(self.odom_match_radii)
        self.window_match_radii = tuple(self.window_match_radii)
        self.validate()

    def validate(self):
        if self.scale_mode not in ("bounded", "exp"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        if self.grad_mode not in ("round_robin", "summed"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.window_capacity < 1 or self.keyframe_stride < 1:
            raise ValueError("window_capacity and keyframe_stride must be "
                             "positive")
        if self.iters_per_cycle < 0 or self.loop_refine_iters < 0:
            raise ValueError("iteration counts cannot be negative")

    def save(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(asdict(self), f, sort_keys=True)

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return PipelineConfig.from_dict(data)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(PipelineConfig)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return PipelineConfig(**data)

    def replaced(self, **changes) -> "PipelineConfig":
        d = asdict(self)
        d.update(changes)
        return PipelineConfig.from_dict(d)
