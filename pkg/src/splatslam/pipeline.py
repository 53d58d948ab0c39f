"""End-to-end orchestration: sensors in, trajectory plus splat map out.

The stage machine per keyframe: estimate the pose against the previous
keyframe (inertial prediction seeding a joint geometric-photometric
solve), extend the pose graph, check for a loop closure, then run one
sliding-window mapping cycle. Held-out keyframes get poses and graph
passage but never touch the map, so their images stay valid as novel
views for evaluation.

Only mapped keyframes become graph nodes. Held-out poses are filled in
afterwards by chaining their odometry relatives onto the refined
trajectory, which keeps the graph small and exercises the same
propagation rule the backend uses for any subset refinement.

Any stage exception ends the run early with the partial result and the
failing stage recorded instead of an exception bubbling out.
"""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backend import (LoopCandidate, PoseGraph, detect_loop_closure,
                      optimize_pose_graph, propagate_missing_poses,
                      refine_after_loop, transform_gaussians)
from .config import PipelineConfig
from .gaussians import GaussianMap, ScaleBounds
from .geometry import Pose
from .local_mapper import LocalMapper
from .odometry import (estimate_relative_pose, integrate_imu, prepare_frame)
from .surfels import match_surfels

POSE_MOVED_EPS = 1e-6   # m, below this a correction is considered a no-op


@dataclass
class RunResult:
    poses: dict = field(default_factory=dict)           # final trajectory
    odometry_poses: dict = field(default_factory=dict)  # uncorrected chain
    gmap: Optional[GaussianMap] = None
    graph: Optional[PoseGraph] = None
    loops: list = field(default_factory=list)           # accepted closures
    metrics: dict = field(default_factory=dict)         # deterministic
    timings: dict = field(default_factory=dict)         # wall clock, not
    cycle_log: list = field(default_factory=list)
    failure_stage: Optional[str] = None
    failure_message: str = ""

    @property
    def ok(self) -> bool:
        return self.failure_stage is None


def _select_views(moved_ids, budget: int) -> list:
    if len(moved_ids) <= budget:
        return list(moved_ids)
    pick = np.linspace(0, len(moved_ids) - 1, budget).round().astype(int)
    return [moved_ids[i] for i in sorted(set(pick.tolist()))]


def _apply_correction(mapper, graph, old_poses, new_poses, images, cfg,
                      calib, bg) -> dict:
    """Push refined graph poses into the mapper and the splat map.

    Splats ride rigidly with their source keyframe, then a short
    appearance-only polish runs over a bounded sample of the moved views.
    Returns counters for the metrics log.
    """
    moved = [k for k in new_poses
             if old_poses[k].translation_distance_to(new_poses[k])
             > POSE_MOVED_EPS
             or old_poses[k].rotation_angle_to(new_poses[k])
             > POSE_MOVED_EPS]
    stats = {"n_moved": len(moved), "n_transformed": 0, "refine_loss": 0.0}
    if not moved:
        return stats
    known = set(mapper.all_poses())
    for k in new_poses:
        if k in known:
            mapper.set_pose(k, new_poses[k])
    tstats = transform_gaussians(mapper.gmap, old_poses, new_poses)
    stats["n_transformed"] = tstats.n_transformed
    if cfg.loop_refine_iters > 0 and len(mapper.gmap):
        view_ids = _select_views([k for k in moved if k in images],
                                 cfg.loop_refine_views)
        views = [(k, new_poses[k], images[k]) for k in view_ids]
        if views:
            rr = refine_after_loop(mapper.gmap, views, cfg.loop_refine_iters,
                                   calib.camera, calib.body_from_camera,
                                   lambda_ssim=cfg.lambda_ssim, bg=bg)
            stats["refine_loss"] = rr.loss_after - rr.loss_before
    return stats


def _periodic_surfel_edges(graph: PoseGraph, cfg) -> list:
    """Geometric constraints between every Nth keyframe pair that ended up
    spatially close; loop closures handle the rest."""
    order = graph.order()
    anchors = [k for n, k in enumerate(order) if n % cfg.surfel_edge_every == 0]
    existing = {(e.i, e.j) for e in graph.surfel_edges}
    added = []
    for a in range(len(anchors)):
        for b in range(a + 1, len(anchors)):
            i, j = anchors[a], anchors[b]
            if abs(order.index(j) - order.index(i)) < 2 or (i, j) in existing:
                continue
            d = graph.nodes[i].translation_distance_to(graph.nodes[j])
            if d > cfg.surfel_edge_radius:
                continue
            rel = graph.nodes[i].inverse().compose(graph.nodes[j])
            matches = match_surfels(graph.surfels[j], graph.surfels[i], rel,
                                    0.5, source_kf=j, target_kf=i)
            if len(matches) < 10:
                continue
            graph.add_surfel_edge(i, j, matches)
            added.append(graph.surfel_edges[-1])
    return added


def run_pipeline(dataset, config: Optional[PipelineConfig] = None,
                 metrics_path=None) -> RunResult:
    """Run the full pipeline over a dataset; never raises for stage errors.

    metrics_path, when given, receives one JSON line per mapping cycle as
    the run progresses (the deterministic log; wall-clock time stays out
    of it).
    """
    cfg = config if config is not None else PipelineConfig()
    calib = dataset.calibration
    bg = dataset.background
    result = RunResult()
    t_start = time.perf_counter()

    gmap = GaussianMap(bounds=ScaleBounds(cfg.sigma_min, cfg.sigma_max),
                       scale_mode=cfg.scale_mode)
    mapper = LocalMapper(
        gmap, calib.camera, calib.body_from_camera,
        scene_extent=cfg.scene_extent, capacity=cfg.window_capacity,
        iters_per_cycle=cfg.iters_per_cycle, seed_voxel=cfg.seed_voxel,
        r_target=cfg.r_target, knn=cfg.surfel_knn,
        lambda_ssim=cfg.lambda_ssim, bg=bg,
        match_radii=cfg.window_match_radii,
        min_matches=cfg.window_min_matches, grad_mode=cfg.grad_mode,
        rates=None, metrics_path=metrics_path)
    graph = PoseGraph()
    result.graph = graph
    result.gmap = gmap if cfg.mapping_enabled else None

    keyframes = dataset.keyframes[::cfg.keyframe_stride]
    images = {kf.index: kf.image for kf in keyframes}
    prev_frame = None
    prev_pose = None
    prev_time = None
    prev_mapped = None
    velocity = np.zeros(3)
    raw_pose = None
    n_failures = 0
    loops: list[LoopCandidate] = []

    stage = "frontend"
    try:
        for kf in keyframes:
            stage = "frontend"
            frame = prepare_frame(kf, calib, voxel=cfg.surfel_voxel,
                                  knn=cfg.surfel_knn,
                                  n_features=cfg.n_features)
            if cfg.use_gt_poses:
                if kf.gt_pose is None:
                    raise ValueError("ground-truth initialization requested "
                                     "on a blind dataset")
                pose = kf.gt_pose
                rel = (prev_pose.inverse().compose(pose)
                       if prev_pose is not None else None)
            elif prev_frame is None:
                pose = kf.gt_pose if kf.gt_pose is not None else Pose.identity()
                rel = None
            else:
                predicted, vel_pred = integrate_imu(
                    kf.imu, prev_pose, velocity, calib.gravity)
                prior = prev_pose.inverse().compose(predicted)
                est = estimate_relative_pose(
                    prev_frame, frame, prior, lam=cfg.lambda_photo,
                    match_radii=cfg.odom_match_radii,
                    delta_icp=cfg.delta_icp, delta_photo=cfg.delta_photo,
                    min_surfel_matches=cfg.odom_min_matches)
                if est.failed:
                    n_failures += 1
                rel = est.pose
                pose = prev_pose.compose(rel)
                dt = kf.timestamp - prev_time
                velocity = ((pose.t - prev_pose.t) / dt if dt > 0
                            else vel_pred)
            raw_pose = (raw_pose.compose(rel)
                        if raw_pose is not None and rel is not None
                        else (raw_pose if rel is not None else pose))
            result.odometry_poses[kf.index] = raw_pose
            result.poses[kf.index] = pose

            if not kf.held_out:
                stage = "backend"
                graph.add_node(kf.index, pose, frame.surfels)
                if prev_mapped is not None:
                    rel_mapped = graph.nodes[prev_mapped].inverse() \
                        .compose(pose)
                    graph.add_odometry_edge(prev_mapped, kf.index, rel_mapped)
                if cfg.surfel_edges_enabled and prev_mapped is not None:
                    cand = detect_loop_closure(
                        graph, kf.index, radius=cfg.loop_radius,
                        min_gap=cfg.loop_min_gap,
                        fitness_min=cfg.loop_fitness_min)
                    if cand is not None and cand.accepted:
                        graph.add_surfel_edge(cand.match_kf, cand.query_kf,
                                              cand.matches)
                        old = dict(graph.nodes)
                        opt = optimize_pose_graph(
                            graph, cfg.lambda_surfel,
                            new_edges=[graph.surfel_edges[-1]])
                        _apply_correction(mapper, graph, old, opt.poses,
                                          images, cfg, calib, bg)
                        pose = opt.poses[kf.index]
                        for k in opt.poses:
                            result.poses[k] = opt.poses[k]
                        loops.append(cand)
                stage = "mapping"
                if cfg.mapping_enabled:
                    cloud_body = calib.body_from_lidar.apply(kf.cloud) \
                        if kf.cloud.shape[0] else kf.cloud
                    mapper.add_keyframe(kf.index, pose, kf.image,
                                        cloud_body, frame.surfels)
                    pose = mapper.window.frames[-1].world_from_body
                    result.poses[kf.index] = pose
                    graph.set_pose(kf.index, pose)
                prev_mapped = kf.index
            prev_frame = frame
            prev_pose = pose
            prev_time = kf.timestamp

        stage = "backend"
        n_periodic = 0
        if cfg.surfel_edges_enabled and len(graph) >= 2:
            new_edges = _periodic_surfel_edges(graph, cfg)
            n_periodic = len(new_edges)
            if graph.surfel_edges:
                old = dict(graph.nodes)
                opt = optimize_pose_graph(graph, cfg.lambda_surfel)
                _apply_correction(mapper, graph, old, opt.poses, images,
                                  cfg, calib, bg)
                for k in opt.poses:
                    result.poses[k] = opt.poses[k]
                result.metrics["graph_cost_initial"] = opt.cost_initial
                result.metrics["graph_cost_final"] = opt.cost_final
                result.metrics["graph_flagged"] = opt.flagged

        # held-out keyframes never joined the graph; chain their odometry
        # relatives onto the refined trajectory
        refined = {k: result.poses[k] for k in graph.order()}
        full = dict(result.odometry_poses)
        if refined and min(full) in refined:
            result.poses = propagate_missing_poses(refined, full)
    except Exception as exc:
        result.failure_stage = stage
        result.failure_message = "".join(
            traceback.format_exception_only(type(exc), exc)).strip()

    result.loops = loops
    result.cycle_log = mapper.metrics
    result.metrics.update({
        "n_keyframes": len(keyframes),
        "n_mapped": len(graph),
        "n_held_out": sum(1 for kf in keyframes if kf.held_out),
        "n_loops": len(loops),
        "n_periodic_edges": (n_periodic
                             if result.failure_stage is None else 0),
        "n_odometry_failures": n_failures,
        "n_gaussians": len(gmap) if cfg.mapping_enabled else 0,
        "mapping_enabled": cfg.mapping_enabled,
        "surfel_edges_enabled": cfg.surfel_edges_enabled,
    })
    result.timings["duration_s"] = time.perf_counter() - t_start
    return result
