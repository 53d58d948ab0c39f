"""Sliding-window mapper: window mechanics, pose step, splat refinement."""

import numpy as np
import pytest
from scipy.special import expit, logit
from scipy.spatial.transform import Rotation

from splatslam.gaussians import (GaussianMap, ScaleBounds, SH_C0, Gaussian,
                                 VoxelOccupancy, inverse_bounded_scale,
                                 seed_keyframe_gaussians)
from splatslam.geometry import CameraIntrinsics, Pose
from splatslam.local_mapper import (AdamState, LocalMapper, MapperKeyframe,
                                    SlidingWindow, default_rates,
                                    optimize_window_poses, refine_gaussians,
                                    slide_window, update_visible_set)
from splatslam.renderer import render
from splatslam.sim import NoiseConfig, generate_dataset
from splatslam.surfels import SparseSurfelMap, extract_surfels

BOUNDS = ScaleBounds(0.005, 1.0)


def small_camera(width=32, height=32):
    return CameraIntrinsics(fx=0.9 * width, fy=0.9 * height,
                            cx=(width - 1) / 2, cy=(height - 1) / 2,
                            width=width, height=height)


def iso_gaussian(mean, sigma, color=(0.5, 0.5, 0.5), opacity_logit=0.0):
    raw, _ = inverse_bounded_scale(np.full(3, sigma), BOUNDS)
    sh = np.zeros((4, 3))
    sh[0] = np.asarray(color) / SH_C0
    return Gaussian(mean=mean, orientation=[0, 0, 0, 1], raw_scale=raw,
                    opacity_logit=opacity_logit, sh=sh)


def bare_frame(kf_id, pose, image_hw=(8, 8)):
    return MapperKeyframe(kf_id, pose, np.zeros(image_hw + (3,)), [])


# --- window mechanics ---------------------------------------------------

class TestSlideWindow:
    def test_capacity_eviction(self):
        w = SlidingWindow(capacity=8)
        for i in range(8):
            assert slide_window(w, bare_frame(i, Pose.identity())) is None
        assert len(w) == 8
        evicted = slide_window(w, bare_frame(8, Pose.identity()))
        assert evicted is not None and evicted.kf_id == 0
        assert w.keyframe_ids == list(range(1, 9))
        assert len(w) == 8

    def test_under_capacity_no_eviction(self):
        w = SlidingWindow(capacity=8)
        for i in range(3):
            slide_window(w, bare_frame(i, Pose.identity()))
        assert slide_window(w, bare_frame(3, Pose.identity())) is None
        assert len(w) == 4

    def test_out_of_order_rejected(self):
        w = SlidingWindow(capacity=4)
        slide_window(w, bare_frame(5, Pose.identity()))
        with pytest.raises(ValueError):
            slide_window(w, bare_frame(5, Pose.identity()))
        with pytest.raises(ValueError):
            slide_window(w, bare_frame(3, Pose.identity()))

    def test_capacity_validated(self):
        with pytest.raises(ValueError):
            SlidingWindow(capacity=0)


class TestVisibility:
    K = small_camera()

    def test_union_of_views_with_occlusion(self):
        gmap = GaussianMap(bounds=BOUNDS)
        gmap.add([
            iso_gaussian([0.5, -0.5, 3.0], 0.05),     # 0: view-0 only
            iso_gaussian([10, 0.5, 4.0], 0.05),       # 1: view-1 only
            iso_gaussian([0, 0, -2.0], 0.05),         # 2: behind both
            iso_gaussian([0, 0, 1.5], 0.2,            # 3,4: occluder pair
                         opacity_logit=float(logit(0.97))),
            iso_gaussian([0, 0, 2.0], 0.2,
                         opacity_logit=float(logit(0.97))),
            iso_gaussian([0, 0, 5.0], 0.05),          # 5: buried behind 3,4
        ])
        w = SlidingWindow(capacity=4)
        w.frames = [bare_frame(0, Pose.identity()),
                    bare_frame(1, Pose([0, 0, 0, 1], [10.0, 0, 0]))]
        vis = update_visible_set(w, gmap, self.K, Pose.identity())
        assert sorted(vis.tolist()) == [0, 1, 3, 4]

    def test_shared_splat_survives_slide(self):
        yaw = lambda deg: Pose.from_rotation_translation(
            Rotation.from_euler("y", deg, degrees=True), np.zeros(3))
        shared = 3.0 * np.array([np.sin(np.radians(22.5)), 0.0,
                                 np.cos(np.radians(22.5))])
        solo = 2.5 * np.array([np.sin(np.radians(-15.0)), 0.0,
                               np.cos(np.radians(-15.0))])
        gmap = GaussianMap(bounds=BOUNDS)
        gmap.add([iso_gaussian(shared, 0.05), iso_gaussian(solo, 0.05)])
        w = SlidingWindow(capacity=2)
        slide_window(w, bare_frame(0, yaw(0)), gmap, self.K, Pose.identity())
        slide_window(w, bare_frame(1, yaw(45)), gmap, self.K, Pose.identity())
        assert sorted(w.visible_set.tolist()) == [0, 1]
        evicted = slide_window(w, bare_frame(2, yaw(30)), gmap, self.K,
                               Pose.identity())
        assert evicted.kf_id == 0
        # the splat seen by both the evicted and a resident view stays;
        # the one only the evicted view saw drops out
        assert w.visible_set.tolist() == [0]


# --- pose step on an exactly planar world -------------------------------

U = np.arange(0.0, 3.01, 0.2)
_A = np.stack(np.meshgrid(U, U, indexing="ij"), -1).reshape(-1, 2)
PLANE_PTS = np.vstack([
    np.column_stack([np.zeros(len(_A)), _A[:, 0], _A[:, 1]]),        # x = 0
    np.column_stack([_A[:, 0], np.full(len(_A), 8.0), _A[:, 1]]),    # y = 8
    np.column_stack([6 + _A[:, 0], 6 + _A[:, 1],
                     np.full(len(_A), -2.0)]),                       # z = -2
])


def gt_pose(i):
    rot = Rotation.from_euler("xyz", [0.02 * i, -0.015 * i, 0.03 * i])
    return Pose.from_rotation_translation(rot, [0.08 * i, -0.05 * i, 0.03 * i])


def plane_frame(kf_id, pose):
    cloud_body = pose.inverse().apply(PLANE_PTS)
    surfels, _ = extract_surfels(cloud_body, k=8, voxel=0.2)
    return MapperKeyframe(kf_id, pose, np.zeros((8, 8, 3)), surfels)


@pytest.fixture(scope="module")
def plane_sparse_map():
    sm = SparseSurfelMap()
    for i in range(4):
        f = plane_frame(i, gt_pose(i))
        sm.add_keyframe(i, f.world_from_body, f.surfels)
    return sm


class TestWindowPoseStep:
    def test_ground_truth_is_fixed_point(self, plane_sparse_map):
        w = SlidingWindow(capacity=4)
        w.frames = [plane_frame(4, gt_pose(4)), plane_frame(5, gt_pose(5))]
        res = optimize_window_poses(w, plane_sparse_map)
        assert res.updated and not res.flagged
        assert w.frames[1].world_from_body.translation_distance_to(gt_pose(5)) <= 1e-8
        assert w.frames[1].world_from_body.rotation_angle_to(gt_pose(5)) <= 1e-8
        # anchor untouched by construction
        assert w.frames[0].world_from_body is not None
        assert w.frames[0].world_from_body.translation_distance_to(gt_pose(4)) == 0.0

    def test_perturbed_pose_recovered(self, plane_sparse_map):
        failures = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            direction = rng.normal(size=3)
            direction *= 0.1 / np.linalg.norm(direction)
            w = SlidingWindow(capacity=4)
            w.frames = [plane_frame(4, gt_pose(4))]
            f = plane_frame(5, gt_pose(5))   # cloud taken at ground truth
            f.world_from_body = Pose(f.world_from_body.q,
                                     f.world_from_body.t + direction)
            w.frames.append(f)
            res = optimize_window_poses(w, plane_sparse_map)
            assert res.updated
            err = f.world_from_body.translation_distance_to(gt_pose(5))
            if err > 0.005:
                failures += 1
        assert failures == 0

    def test_window_of_one_is_noop(self, plane_sparse_map):
        w = SlidingWindow(capacity=4)
        f = plane_frame(4, gt_pose(4))
        w.frames = [f]
        before = f.world_from_body
        res = optimize_window_poses(w, plane_sparse_map)
        assert not res.updated and not res.flagged
        assert f.world_from_body is before

    def test_underconstrained_window_flagged(self, plane_sparse_map):
        w = SlidingWindow(capacity=4)
        # cloud captured at ground truth, but the claimed pose is far off:
        # nothing lands within matching range of the map
        f = plane_frame(5, gt_pose(5))
        f.world_from_body = Pose([0, 0, 0, 1], [50.0, 0.0, 0.0])
        w.frames = [plane_frame(4, gt_pose(4)), f]
        before_q = w.frames[1].world_from_body.q.copy()
        before_t = w.frames[1].world_from_body.t.copy()
        res = optimize_window_poses(w, plane_sparse_map)
        assert not res.updated and res.flagged
        assert res.n_matches[5] < 10
        np.testing.assert_array_equal(w.frames[1].world_from_body.q, before_q)
        np.testing.assert_array_equal(w.frames[1].world_from_body.t, before_t)

    def test_empty_sparse_map_flagged(self):
        w = SlidingWindow(capacity=4)
        w.frames = [plane_frame(0, gt_pose(0)), plane_frame(1, gt_pose(1))]
        res = optimize_window_poses(w, SparseSurfelMap())
        assert not res.updated and res.flagged

    def test_pose_step_never_touches_splats(self, plane_sparse_map):
        gmap = GaussianMap(bounds=BOUNDS)
        gmap.add([iso_gaussian([1.0, 1.0, 1.0], 0.1) for _ in range(5)])
        snapshot = {f: getattr(gmap, f).copy()
                    for f in ("means", "quats", "raw_scales",
                              "opacity_logits", "sh")}
        w = SlidingWindow(capacity=4)
        w.frames = [plane_frame(4, gt_pose(4)), plane_frame(5, gt_pose(5))]
        optimize_window_poses(w, plane_sparse_map)
        for name, before in snapshot.items():
            np.testing.assert_array_equal(getattr(gmap, name), before)


# --- photometric refinement ---------------------------------------------

class TestRefineGaussians:
    K = small_camera(33, 33)

    def one_splat_window(self, target_value):
        gmap = GaussianMap(bounds=ScaleBounds(0.01, 1.5))
        raw, _ = inverse_bounded_scale(np.full(3, 0.35),
                                       ScaleBounds(0.01, 1.5))
        sh = np.zeros((4, 3))
        sh[0] = 0.6 / SH_C0
        gmap.add([Gaussian(mean=[0, 0, 2.0], orientation=[0, 0, 0, 1],
                           raw_scale=raw, opacity_logit=0.0, sh=sh)])
        target = np.full((33, 33, 3), float(target_value))
        w = SlidingWindow(capacity=2)
        w.frames = [MapperKeyframe(0, Pose.identity(), target, [])]
        update_visible_set(w, gmap, self.K, Pose.identity())
        return gmap, w

    def test_zero_iterations_unchanged(self):
        gmap, w = self.one_splat_window(0.35)
        snapshot = {f: getattr(gmap, f).copy()
                    for f in ("means", "quats", "raw_scales",
                              "opacity_logits", "sh")}
        res = refine_gaussians(w, gmap, 0, AdamState(), default_rates(2.0),
                               self.K, Pose.identity())
        assert res.n_steps == 0
        for name, before in snapshot.items():
            np.testing.assert_array_equal(getattr(gmap, name), before)

    def test_single_gray_splat_reaches_target(self):
        # background matched to the target keeps this a pure scalar problem:
        # only the splat's own footprint carries any error
        gmap, w = self.one_splat_window(0.35)
        bg = np.full(3, 0.35)
        refine_gaussians(w, gmap, 200, AdamState(), default_rates(2.0),
                         self.K, Pose.identity(), bg=bg)
        img = render(gmap, Pose.identity(), self.K, bg=bg).image
        center = img[16, 16]
        np.testing.assert_allclose(center, 0.35, atol=0.02)

    def test_poses_frozen_during_refinement(self):
        gmap, w = self.one_splat_window(0.35)
        q0 = w.frames[0].world_from_body.q.copy()
        t0 = w.frames[0].world_from_body.t.copy()
        refine_gaussians(w, gmap, 5, AdamState(), default_rates(2.0), self.K,
                         Pose.identity())
        np.testing.assert_array_equal(w.frames[0].world_from_body.q, q0)
        np.testing.assert_array_equal(w.frames[0].world_from_body.t, t0)

    def test_loss_decreases(self):
        gmap, w = self.one_splat_window(0.35)
        res = refine_gaussians(w, gmap, 30, AdamState(), default_rates(2.0),
                               self.K, Pose.identity())
        assert res.loss_after < res.loss_before

    def test_summed_mode_matches_single_view_round_robin(self):
        # with one window view, both modes do identical work
        gmap_a, w_a = self.one_splat_window(0.35)
        gmap_b, w_b = self.one_splat_window(0.35)
        refine_gaussians(w_a, gmap_a, 10, AdamState(), default_rates(2.0),
                         self.K, Pose.identity(), grad_mode="round_robin")
        refine_gaussians(w_b, gmap_b, 10, AdamState(), default_rates(2.0),
                         self.K, Pose.identity(), grad_mode="summed")
        np.testing.assert_array_equal(gmap_a.means, gmap_b.means)
        np.testing.assert_array_equal(gmap_a.sh, gmap_b.sh)

    def test_empty_visible_set_rejected(self):
        gmap, w = self.one_splat_window(0.35)
        w.visible_set = np.zeros(0, dtype=np.int64)
        with pytest.raises(ValueError):
            refine_gaussians(w, gmap, 3, AdamState(), default_rates(2.0),
                             self.K, Pose.identity())

    def test_only_visible_splats_updated(self):
        gmap, w = self.one_splat_window(0.35)
        gmap.add([iso_gaussian([0, 0, -5.0], 0.1)])   # behind the camera
        update_visible_set(w, gmap, self.K, Pose.identity())
        assert w.visible_set.tolist() == [0]
        hidden_before = (gmap.means[1].copy(), gmap.sh[1].copy(),
                         gmap.opacity_logits[1])
        refine_gaussians(w, gmap, 10, AdamState(), default_rates(2.0),
                         self.K, Pose.identity())
        np.testing.assert_array_equal(gmap.means[1], hidden_before[0])
        np.testing.assert_array_equal(gmap.sh[1], hidden_before[1])
        assert gmap.opacity_logits[1] == hidden_before[2]


# --- seeding ------------------------------------------------------------

@pytest.fixture(scope="module")
def room_dataset():
    return generate_dataset(
        37, "square-loop", NoiseConfig.zero(), image_size=(64, 64),
        lidar_n_az=40, lidar_n_el=30, side_time=4.0, turn_time=2.0)


class TestSeeding:
    def test_voxel_dedup_blocks_reseeding(self, room_dataset):
        ds = room_dataset
        kf = ds.keyframes[0]
        calib = ds.calibration
        cloud_world = kf.gt_pose.apply(calib.body_from_lidar.apply(kf.cloud))
        cam = kf.gt_pose.compose(calib.body_from_camera)
        gmap = GaussianMap(bounds=BOUNDS)
        occ = VoxelOccupancy(0.15)
        idx, stats = seed_keyframe_gaussians(gmap, occ, cloud_world, kf.image,
                                             cam, calib.camera, kf.index)
        assert stats.n_added == len(idx) > 100
        assert stats.n_candidates >= stats.n_added
        assert np.all(gmap.source_kf[idx] == kf.index)
        idx2, stats2 = seed_keyframe_gaussians(gmap, occ, cloud_world,
                                               kf.image, cam, calib.camera,
                                               kf.index)
        assert len(idx2) == 0 and stats2.n_added == 0

    def test_seeded_scales_respect_bounds(self, room_dataset):
        ds = room_dataset
        kf = ds.keyframes[0]
        calib = ds.calibration
        cloud_world = kf.gt_pose.apply(calib.body_from_lidar.apply(kf.cloud))
        cam = kf.gt_pose.compose(calib.body_from_camera)
        gmap = GaussianMap(bounds=BOUNDS)
        idx, _ = seed_keyframe_gaussians(gmap, VoxelOccupancy(0.15),
                                         cloud_world, kf.image, cam,
                                         calib.camera, kf.index)
        s = gmap.scales()
        assert np.all(s > BOUNDS.sigma_min) and np.all(s < BOUNDS.sigma_max)
        assert np.all(gmap.opacities()[idx] == expit(logit(0.7)))


# --- full cycles on the simulator ---------------------------------------

def run_mapper(ds, n_frames, iters=6, capacity=4, metrics_path=None):
    calib = ds.calibration
    gmap = GaussianMap(bounds=ScaleBounds(0.005, 1.0))
    mapper = LocalMapper(gmap, calib.camera, calib.body_from_camera,
                         scene_extent=8.0, capacity=capacity,
                         iters_per_cycle=iters, seed_voxel=0.15,
                         bg=ds.background, metrics_path=metrics_path)
    used = [kf for kf in ds.keyframes if not kf.held_out][:n_frames]
    for kf in used:
        cloud_body = calib.body_from_lidar.apply(kf.cloud)
        surfels, _ = extract_surfels(cloud_body, k=8, voxel=0.2,
                                     origin=calib.body_from_lidar.t)
        mapper.add_keyframe(kf.index, kf.gt_pose, kf.image, cloud_body,
                            surfels)
    return mapper, used


@pytest.fixture(scope="module")
def mapper_run(room_dataset):
    return run_mapper(room_dataset, n_frames=10)


class TestMapperCycles:
    def test_net_loss_decrease_every_cycle(self, mapper_run):
        mapper, _ = mapper_run
        for m in mapper.metrics:
            assert m.loss_after <= m.loss_before + 1e-9, m.cycle

    def test_psnr_improves_over_run(self, mapper_run):
        # windows cover different views as the trajectory advances, and a
        # freshly seeded turn window scores low no matter how good the old
        # map is; progress shows as the best window beating the first one
        mapper, _ = mapper_run
        best_later = max(m.psnr_window for m in mapper.metrics[1:])
        assert best_later > mapper.metrics[0].psnr_window + 2.0

    def test_full_reverts_stay_exceptional(self, mapper_run):
        # the position-frozen retry should absorb nearly every bad cycle;
        # a full revert giving back the whole cycle should be rare
        mapper, _ = mapper_run
        modes = [m.refine_mode for m in mapper.metrics]
        assert set(modes) <= {"ok", "rescued", "reverted"}
        assert modes.count("reverted") <= len(modes) // 5

    def test_scale_bounds_hold_after_every_cycle(self, mapper_run):
        mapper, _ = mapper_run
        for m in mapper.metrics:
            assert m.max_scale <= m.sigma_max + 1e-12
        s = mapper.gmap.scales()
        b = mapper.gmap.bounds
        assert np.all(s > b.sigma_min) and np.all(s < b.sigma_max)

    def test_window_and_sparse_map_partition(self, mapper_run):
        mapper, used = mapper_run
        ids = [kf.index for kf in used]
        assert mapper.window.keyframe_ids == ids[-4:]
        assert mapper.sparse_map.keyframe_ids() == ids[:-4]
        assert set(mapper.all_poses()) == set(ids)

    def test_visible_set_well_formed(self, mapper_run):
        mapper, _ = mapper_run
        vis = mapper.window.visible_set
        assert len(vis) > 0
        assert vis.max() < len(mapper.gmap)
        assert len(np.unique(vis)) == len(vis)

    def test_poses_stay_near_ground_truth(self, mapper_run):
        mapper, used = mapper_run
        gt = {kf.index: kf.gt_pose for kf in used}
        for kf_id, pose in mapper.all_poses().items():
            assert pose.translation_distance_to(gt[kf_id]) < 0.02

    def test_pose_step_engages_after_evictions(self, mapper_run):
        mapper, _ = mapper_run
        assert any(m.pose_updated for m in mapper.metrics[5:])

    def test_prune_compacts_moments(self, mapper_run):
        mapper, _ = mapper_run
        n = len(mapper.gmap)
        # force one splat transparent and run the prune path
        mapper.gmap.opacity_logits[0] = float(logit(1e-4))
        removed = mapper.prune_transparent()
        assert removed == 1
        assert len(mapper.gmap) == n - 1
        assert len(mapper.adam.steps) == n - 1
        for f in AdamState.FIELDS:
            assert len(mapper.adam.m[f]) == n - 1
        assert mapper.window.visible_set.max() < n - 1

    def test_metrics_jsonl_deterministic(self, room_dataset, tmp_path):
        import json
        paths = []
        for run in range(2):
            p = tmp_path / f"metrics_{run}.jsonl"
            run_mapper(room_dataset, n_frames=4, iters=2, capacity=3,
                       metrics_path=str(p))
            paths.append(p)
        a, b = paths[0].read_bytes(), paths[1].read_bytes()
        assert a == b
        lines = [json.loads(s) for s in a.decode().splitlines()]
        assert len(lines) == 4
        for rec in lines:
            for key in ("cycle", "kf_id", "loss_after", "psnr_window",
                        "n_gaussians", "sigma_max"):
                assert key in rec
