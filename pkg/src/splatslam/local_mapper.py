"""Sliding-window mapping: refine poses against geometry, then splats
against photometry.

Each new keyframe drives one cycle over a fixed-size window of recent
keyframes. The two optimization steps are strictly decoupled: the pose step
reads only surfels and never writes splat parameters, the splat step renders
with every pose frozen. A keyframe evicted from the window freezes its pose
and donates its surfels to a sparse map that later pose steps align against,
so window memory stays bounded no matter how long the trajectory runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .gaussians import GaussianMap, VoxelOccupancy, seed_keyframe_gaussians
from .geometry import CameraIntrinsics, Pose, se3_exp
from .losses import psnr, render_loss
from .optim import huber_residual, levenberg_marquardt
from .renderer import (GaussianGrads, render, render_loss_and_grads,
                       splat_center_transmittance)
from .surfels import (SparseSurfelMap, icp_residual, match_surfels,
                      normals_of, positions_of)

VISIBILITY_MIN_T = 1e-3   # transmittance left at a splat's center pixel
PRUNE_OPACITY = 0.01
DEGEN_EIG_RATIO = 0.05    # information eigenvalue cutoff, relative to max
DEGEN_MIN_SUPPORT = 30.0  # effective matches needed to trust a direction


def default_rates(scene_extent: float) -> dict:
    """Per-parameter-class Adam step sizes; position scales with the scene."""
    return {
        "means": 1.6e-4 * scene_extent,
        "quats": 1e-3,
        "raw_scales": 5e-3,
        "opacity_logits": 5e-2,
        "sh": 2.5e-3,
    }


@dataclass
class MapperKeyframe:
    kf_id: int
    world_from_body: Pose
    image: np.ndarray     # (H,W,3) observed, float in [0,1]
    surfels: list         # keyframe body frame

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)


class SlidingWindow:
    """Insertion-ordered window of keyframes plus the ids of splats visible
    from at least one member view."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.frames: list[MapperKeyframe] = []
        self.visible_set = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.frames)

    @property
    def keyframe_ids(self) -> list[int]:
        return [f.kf_id for f in self.frames]


def slide_window(window: SlidingWindow, new_kf: MapperKeyframe,
                 gmap: Optional[GaussianMap] = None,
                 K: Optional[CameraIntrinsics] = None,
                 body_from_camera: Optional[Pose] = None
                 ) -> Optional[MapperKeyframe]:
    """Append a keyframe, evicting and returning the oldest when full.

    The evicted keyframe keeps its current pose; the caller moves its surfels
    into the sparse map. When the map and calibration are passed, the visible
    set is recomputed immediately; the mapper itself defers that to after
    seeding so each cycle pays for visibility once.
    """
    if window.frames and new_kf.kf_id <= window.frames[-1].kf_id:
        raise ValueError(
            f"keyframe {new_kf.kf_id} is not newer than resident "
            f"{window.frames[-1].kf_id}")
    window.frames.append(new_kf)
    evicted = None
    if len(window.frames) > window.capacity:
        evicted = window.frames.pop(0)
    if gmap is not None:
        update_visible_set(window, gmap, K, body_from_camera)
    return evicted


def update_visible_set(window: SlidingWindow, gmap: GaussianMap,
                       K: CameraIntrinsics,
                       body_from_camera: Pose) -> np.ndarray:
    """Union of per-view frustum-and-occlusion visibility queries."""
    vis = np.zeros(len(gmap), dtype=bool)
    for f in window.frames:
        cam = f.world_from_body.compose(body_from_camera)
        vis |= splat_center_transmittance(gmap, cam, K) > VISIBILITY_MIN_T
    window.visible_set = np.flatnonzero(vis)
    return window.visible_set


class WindowPoseResult(NamedTuple):
    updated: bool
    flagged: bool             # a movable keyframe lacked matches; no-op
    n_matches: dict
    max_update: float         # largest translation change, meters
    min_rank: int = 6         # weakest constrained subspace seen this call


def constrained_pose_basis(src_body, nrm_world, pose: Pose,
                           eig_ratio: float = DEGEN_EIG_RATIO,
                           min_support: float = DEGEN_MIN_SUPPORT):
    """Well-determined twist directions of a point-to-plane system.

    Returns (basis, center): basis columns span the twists [t, r] the
    matches actually pin down, with rotations taken about `center` (the
    match centroid in the body frame). A window staring at one wall
    constrains the normal direction and two tilts but says nothing about
    in-plane translation or yaw about the normal; those directions are
    dropped so the optimizer cannot wander along them. Two gates apply
    per eigenvector: its eigenvalue relative to the block's largest
    (fraction of the information), and the unnormalized eigenvalue as an
    effective match count — a direction backed by a handful of surfels
    on a second surface clears the ratio gate yet can drag the pose by
    centimeters chasing their discretization error. Translation and
    rotation are gated separately so strong translation information
    cannot mask weak rotations or vice versa, centering the rotation on
    the matches keeps weak eigenvectors from mixing rotation into
    translation, and rotation columns are scaled by the median centered
    range so the comparison is unit-consistent.
    """
    n_b = np.atleast_2d(nrm_world) @ pose.rotation_matrix()
    src = np.atleast_2d(src_body)
    center = src.mean(axis=0)
    p = src - center
    r0 = max(float(np.median(np.linalg.norm(p, axis=1))), 1e-9)
    lever = np.cross(p, n_b) / r0
    n = len(src)
    wt, vt = np.linalg.eigh(n_b.T @ n_b)
    wr, vr = np.linalg.eigh(lever.T @ lever)
    cols = []
    for i in range(3):
        if wt[i] > eig_ratio * wt[-1] and wt[i] >= min_support:
            cols.append(np.concatenate([vt[:, i], np.zeros(3)]))
    for i in range(3):
        if wr[i] > eig_ratio * wr[-1] and wr[i] >= min_support:
            cols.append(np.concatenate([np.zeros(3), vr[:, i] / r0]))
    basis = (np.stack(cols, axis=1) if cols else np.zeros((6, 0)))
    return basis, center


def optimize_window_poses(window: SlidingWindow, sparse_map: SparseSurfelMap,
                          match_radii=(0.6, 0.3), normal_tol_deg: float = 30.0,
                          min_matches: int = 10,
                          max_iters: int = 25) -> WindowPoseResult:
    """Align every window pose except the oldest to the sparse surfel map.

    Point-to-plane least squares on matches frozen per round, with a second
    round at a tighter radius. Each residual couples one window pose to the
    static map and nothing else, so the joint window problem separates into
    independent per-keyframe solves; solving them separately reaches the
    same minimum as one big system. If any movable keyframe has fewer than
    min_matches matches the whole window is left untouched and flagged.

    Each solve is restricted to the constrained twist subspace of its
    matches. Surfel centroids from different keyframes discretize the same
    surface differently, which leaves a small spurious gradient even at the
    true pose; along a near-null direction (one wall, a corridor) that
    gradient faces no curvature and walks the pose off by whole fractions
    of the match radius, and the corrupted pose then freezes into the map.
    Dropping the unconstrained directions pins them to the odometry value.
    Splat parameters are never read or written here.
    """
    movable = window.frames[1:]
    if not movable:
        return WindowPoseResult(False, False, {}, 0.0)
    target = sparse_map.world_surfels()[0] if len(sparse_map) else []
    counts = {}
    for f in movable:
        m = match_surfels(f.surfels, target, f.world_from_body,
                          match_radii[0], normal_tol_deg)
        counts[f.kf_id] = len(m)
    if any(c < min_matches for c in counts.values()):
        return WindowPoseResult(False, True, counts, 0.0)

    tgt_pos = positions_of(target)
    tgt_nrm = normals_of(target)
    identity = Pose.identity()
    max_update = 0.0
    min_rank = 6
    for f in movable:
        pose = f.world_from_body
        src_all = positions_of(f.surfels)
        for radius in match_radii:
            matches = match_surfels(f.surfels, target, pose, radius,
                                    normal_tol_deg)
            if len(matches) < min_matches:
                break   # tighter radius starved; keep the last round's pose
            src = src_all[[m.source_index for m in matches]]
            dst = tgt_pos[[m.target_index for m in matches]]
            nrm = tgt_nrm[[m.target_index for m in matches]]
            pose0 = pose
            basis, center = constrained_pose_basis(src, nrm, pose0)
            min_rank = min(min_rank, basis.shape[1])
            if basis.shape[1] == 0:
                break
            shift = Pose(identity.q, center)
            unshift = Pose(identity.q, -center)

            def apply_step(y, pose0=pose0, basis=basis, shift=shift,
                           unshift=unshift):
                # rotate about the match centroid, not the body origin
                return pose0.compose(shift).compose(
                    se3_exp(basis @ y)).compose(unshift)

            def residual(y, src=src, dst=dst, nrm=nrm,
                         apply_step=apply_step):
                # same Huber width as the odometry icp term; keeps surfels
                # matched across a map seam from dragging the whole solve
                return huber_residual(
                    icp_residual(src, dst, nrm, apply_step(y), identity),
                    0.05)

            result = levenberg_marquardt(residual,
                                         np.zeros(basis.shape[1]),
                                         max_iters=max_iters)
            pose = apply_step(result.params)
        max_update = max(max_update,
                         pose.translation_distance_to(f.world_from_body))
        f.world_from_body = pose
    return WindowPoseResult(True, False, counts, max_update, min_rank)


class AdamState:
    """Adaptive-moment buffers aligned row-for-row with the map arrays.

    Rows carry their own step counts so bias correction stays exact for
    splats that join late or sit out cycles. Buffers grow with the map and
    are compacted with the same mask whenever the map is pruned.
    """

    FIELDS = ("means", "quats", "raw_scales", "opacity_logits", "sh")

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {f: None for f in self.FIELDS}
        self.v = {f: None for f in self.FIELDS}
        self.steps = np.zeros(0)

    def ensure(self, gmap: GaussianMap):
        n = len(gmap)
        for f in self.FIELDS:
            arr = getattr(gmap, f)
            if self.m[f] is None:
                self.m[f] = np.zeros_like(arr)
                self.v[f] = np.zeros_like(arr)
            elif len(self.m[f]) < n:
                pad = np.zeros((n - len(self.m[f]),) + arr.shape[1:])
                self.m[f] = np.concatenate([self.m[f], pad])
                self.v[f] = np.concatenate([self.v[f], pad.copy()])
        if len(self.steps) < n:
            self.steps = np.concatenate(
                [self.steps, np.zeros(n - len(self.steps))])

    def compact(self, keep_mask: np.ndarray):
        for f in self.FIELDS:
            if self.m[f] is not None:
                self.m[f] = self.m[f][keep_mask]
                self.v[f] = self.v[f][keep_mask]
        self.steps = self.steps[keep_mask]

    def reset_field(self, name: str):
        if self.m[name] is not None:
            self.m[name][:] = 0.0
            self.v[name][:] = 0.0

    def step(self, gmap: GaussianMap, grads: GaussianGrads, rows: np.ndarray,
             rates: dict):
        self.steps[rows] += 1
        t = self.steps[rows]
        for f in self.FIELDS:
            g = getattr(grads, f)[rows]
            m = self.beta1 * self.m[f][rows] + (1 - self.beta1) * g
            v = self.beta2 * self.v[f][rows] + (1 - self.beta2) * g * g
            self.m[f][rows] = m
            self.v[f][rows] = v
            tb = t.reshape((len(rows),) + (1,) * (g.ndim - 1))
            m_hat = m / (1 - self.beta1 ** tb)
            v_hat = v / (1 - self.beta2 ** tb)
            param = getattr(gmap, f)
            param[rows] = param[rows] - rates[f] * m_hat / (np.sqrt(v_hat)
                                                            + self.eps)


def evaluate_window(window: SlidingWindow, gmap: GaussianMap,
                    K: CameraIntrinsics, body_from_camera: Pose,
                    lambda_ssim: float = 0.2, bg=None):
    """Summed render loss and mean PSNR over the window views."""
    total = 0.0
    ps = []
    for f in window.frames:
        cam = f.world_from_body.compose(body_from_camera)
        img = render(gmap, cam, K, bg=bg).image
        total += render_loss(img, f.image, lambda_ssim)
        ps.append(psnr(img, f.image))
    return total, (float(np.mean(ps)) if ps else 0.0)


class RefineResult(NamedTuple):
    loss_before: float
    loss_after: float
    psnr_window: float
    n_steps: int
    bounds_changed: bool
    mode: str = "ok"


def refine_gaussians(window: SlidingWindow, gmap: GaussianMap, iters: int,
                     adam: AdamState, rates: dict, K: CameraIntrinsics,
                     body_from_camera: Pose, lambda_ssim: float = 0.2,
                     bg=None, grad_mode: str = "round_robin") -> RefineResult:
    """Adam steps on the render loss, updating only the visible splats.

    round_robin takes one render per step, cycling through the window views
    in order; summed accumulates every view's gradient for each step at K
    times the cost. Poses are frozen throughout. The scale-bound adaptation
    runs once after the loop; when it re-encodes the raw scales their Adam
    moments are cleared, since the old moments live in the old coordinates.

    The compositing order is resorted every render, so a position step that
    looks downhill to the gradient can flip the depth order of overlapping
    splats and raise the loss anyway. When the full pass ends above the
    starting loss it is retried with positions frozen, and if even that
    fails everything is restored from a snapshot, so the returned loss
    never exceeds loss_before. The mode field records which path ran.
    """
    if grad_mode not in ("round_robin", "summed"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    if iters == 0 or not window.frames:
        loss, p = evaluate_window(window, gmap, K, body_from_camera,
                                  lambda_ssim, bg)
        return RefineResult(loss, loss, p, 0, False)
    rows = window.visible_set
    if len(rows) == 0:
        raise ValueError("refinement needs a non-empty visible set")
    adam.ensure(gmap)
    snap_params = {f: getattr(gmap, f).copy() for f in AdamState.FIELDS}
    snap_m = {f: adam.m[f].copy() for f in AdamState.FIELDS}
    snap_v = {f: adam.v[f].copy() for f in AdamState.FIELDS}
    snap_steps = adam.steps.copy()
    snap_bounds = gmap.bounds

    def restore():
        for f in AdamState.FIELDS:
            getattr(gmap, f)[:] = snap_params[f]
            adam.m[f][:] = snap_m[f]
            adam.v[f][:] = snap_v[f]
        adam.steps[:] = snap_steps
        gmap.bounds = snap_bounds

    def run_pass(use_rates):
        frames = window.frames
        for t in range(iters):
            if grad_mode == "round_robin":
                use = [frames[t % len(frames)]]
            else:
                use = frames
            acc = None
            for f in use:
                cam = f.world_from_body.compose(body_from_camera)
                _, _, grads = render_loss_and_grads(gmap, cam, K, f.image,
                                                    lambda_ssim, bg=bg)
                if acc is None:
                    acc = grads
                else:
                    acc = GaussianGrads(*[a + b for a, b in zip(acc, grads)])
            adam.step(gmap, acc, rows, use_rates)
        # keep stored orientations unit-length; the projector tolerates
        # drift but serialized maps and the backend should not have to
        norms = np.linalg.norm(gmap.quats[rows], axis=1, keepdims=True)
        gmap.quats[rows] = gmap.quats[rows] / norms
        adapt = gmap.adapt_bounds()
        if adapt.changed:
            adam.reset_field("raw_scales")
        loss, p = evaluate_window(window, gmap, K, body_from_camera,
                                  lambda_ssim, bg)
        return loss, p, adapt.changed

    loss_before, psnr_before = evaluate_window(window, gmap, K,
                                               body_from_camera,
                                               lambda_ssim, bg)
    loss_after, psnr_w, changed = run_pass(rates)
    mode = "ok"
    if loss_after > loss_before:
        restore()
        frozen = dict(rates)
        frozen["means"] = 0.0
        loss_after, psnr_w, changed = run_pass(frozen)
        mode = "rescued"
    if loss_after > loss_before:
        restore()
        loss_after, psnr_w, changed = loss_before, psnr_before, False
        mode = "reverted"
    return RefineResult(loss_before, loss_after, psnr_w, iters, changed, mode)


class CycleMetrics(NamedTuple):
    cycle: int
    kf_id: int
    window: tuple
    n_gaussians: int
    n_seeded: int
    n_pruned: int
    loss_before: float
    loss_after: float
    psnr_window: float
    sigma_max: float      # current scale ceiling
    max_scale: float      # largest decoded scale present
    pose_updated: bool
    pose_flagged: bool
    refine_mode: str

    def to_json(self) -> str:
        d = self._asdict()
        d["window"] = list(d["window"])
        return json.dumps(d, sort_keys=True)


class LocalMapper:
    """Owns the splat map, the sliding window, and the sparse surfel map.

    add_keyframe runs one full cycle: slide the window, refine window poses,
    seed new splats, recompute visibility, refine splats photometrically,
    prune transparent splats, and emit one metrics record. Metrics lines are
    appended to metrics_path as line-delimited JSON when a path is given.
    """

    def __init__(self, gmap: GaussianMap, K: CameraIntrinsics,
                 body_from_camera: Pose, scene_extent: float = 8.0,
                 capacity: int = 8, iters_per_cycle: int = 12,
                 seed_voxel: float = 0.12, r_target: float = 2.0,
                 knn: int = 8, lambda_ssim: float = 0.2, bg=None,
                 match_radii=(0.6, 0.3), min_matches: int = 10,
                 grad_mode: str = "round_robin", rates: Optional[dict] = None,
                 metrics_path=None):
        self.gmap = gmap
        self.K = K
        self.body_from_camera = body_from_camera
        self.window = SlidingWindow(capacity)
        self.sparse_map = SparseSurfelMap()
        self.occupancy = VoxelOccupancy(seed_voxel)
        self.adam = AdamState()
        self.rates = default_rates(scene_extent) if rates is None else dict(rates)
        self.iters_per_cycle = iters_per_cycle
        self.r_target = r_target
        self.knn = knn
        self.lambda_ssim = lambda_ssim
        self.bg = bg
        self.match_radii = tuple(match_radii)
        self.min_matches = min_matches
        self.grad_mode = grad_mode
        self.metrics_path = metrics_path
        self.cycle = 0
        self.metrics: list[CycleMetrics] = []

    def add_keyframe(self, kf_id: int, world_from_body: Pose, image,
                     cloud_body, surfels) -> CycleMetrics:
        kf = MapperKeyframe(kf_id, world_from_body, image, list(surfels))
        evicted = slide_window(self.window, kf)
        if evicted is not None:
            self.sparse_map.add_keyframe(evicted.kf_id,
                                         evicted.world_from_body,
                                         evicted.surfels)
        pose_res = optimize_window_poses(
            self.window, self.sparse_map, match_radii=self.match_radii,
            min_matches=self.min_matches)

        # seed with the pose the step just settled on
        cam = kf.world_from_body.compose(self.body_from_camera)
        cloud_world = kf.world_from_body.apply(
            np.asarray(cloud_body, dtype=float).reshape(-1, 3))
        idx, _ = seed_keyframe_gaussians(
            self.gmap, self.occupancy, cloud_world, kf.image, cam, self.K,
            kf_id, r_target=self.r_target, knn=self.knn)
        self.adam.ensure(self.gmap)
        update_visible_set(self.window, self.gmap, self.K,
                           self.body_from_camera)

        if len(self.window.visible_set):
            refine = refine_gaussians(
                self.window, self.gmap, self.iters_per_cycle, self.adam,
                self.rates, self.K, self.body_from_camera,
                lambda_ssim=self.lambda_ssim, bg=self.bg,
                grad_mode=self.grad_mode)
        else:
            refine = RefineResult(0.0, 0.0, 0.0, 0, False)
        n_pruned = self.prune_transparent()

        m = CycleMetrics(
            cycle=self.cycle, kf_id=kf_id,
            window=tuple(self.window.keyframe_ids),
            n_gaussians=len(self.gmap), n_seeded=int(len(idx)),
            n_pruned=n_pruned, loss_before=refine.loss_before,
            loss_after=refine.loss_after, psnr_window=refine.psnr_window,
            sigma_max=self.gmap.bounds.sigma_max,
            max_scale=self.gmap.max_scale(),
            pose_updated=pose_res.updated, pose_flagged=pose_res.flagged,
            refine_mode=refine.mode)
        self.cycle += 1
        self.metrics.append(m)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(m.to_json() + "\n")
        return m

    def prune_transparent(self) -> int:
        """Drop splats whose opacity fell below the floor."""
        keep = self.gmap.opacities() >= PRUNE_OPACITY
        removed = int(np.count_nonzero(~keep))
        if removed:
            self.gmap.prune(keep)
            self.adam.compact(keep)
            update_visible_set(self.window, self.gmap, self.K,
                               self.body_from_camera)
        return removed

    def all_poses(self) -> dict:
        """Current pose of every keyframe ever added, frozen or resident."""
        out = {k: self.sparse_map.pose_of(k)
               for k in self.sparse_map.keyframe_ids()}
        for f in self.window.frames:
            out[f.kf_id] = f.world_from_body
        return out

    def set_pose(self, kf_id: int, pose: Pose):
        """Install an externally corrected pose, resident or frozen."""
        for f in self.window.frames:
            if f.kf_id == kf_id:
                f.world_from_body = pose
                return
        self.sparse_map.update_pose(kf_id, pose)
