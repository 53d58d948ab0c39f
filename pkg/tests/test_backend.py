"""Pose graph backend: loop detection, graph relaxation, map re-anchoring."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from splatslam.backend import (LOOP_MIN_SUPPORT, LoopCandidate, OdometryEdge,
                               PoseGraph, SurfelEdge, default_information,
                               detect_loop_closure, dump_pose_graph,
                               optimize_pose_graph, pose_graph_cost,
                               propagate_missing_poses, refine_after_loop,
                               transform_gaussians, write_trajectory)
from splatslam.gaussians import GaussianMap, ScaleBounds
from splatslam.geometry import Pose, se3_exp
from splatslam.surfels import Surfel, SurfelMatch, gicp_residual

from _scenes import random_scene, small_camera

BOUNDS = ScaleBounds(0.005, 1.0)


# --- shared builders ----------------------------------------------------

def world_surfel(p, n, sp=0.03, sn=0.002):
    n = np.asarray(n, dtype=float)
    cov = sp ** 2 * np.eye(3) + (sn ** 2 - sp ** 2) * np.outer(n, n)
    return Surfel(position=np.asarray(p, dtype=float), normal=n,
                  covariance=cov, radius=0.2, support_count=8)


def corner_world(step=0.4, extent=3.2):
    """Surfels on three mutually perpendicular planes meeting at the origin."""
    u = np.arange(step / 2, extent, step)
    a, b = [g.ravel() for g in np.meshgrid(u, u, indexing="ij")]
    zero = np.zeros_like(a)
    out = []
    for pts, n in ((np.column_stack([zero, a, b]), [1.0, 0.0, 0.0]),
                   (np.column_stack([a, zero, b]), [0.0, 1.0, 0.0]),
                   (np.column_stack([a, b, zero]), [0.0, 0.0, 1.0])):
        out.extend(world_surfel(row, n) for row in pts)
    return out


def plane_world(step=0.4, extent=3.2):
    u = np.arange(step / 2, extent, step)
    a, b = [g.ravel() for g in np.meshgrid(u, u, indexing="ij")]
    return [world_surfel([x, y, 0.0], [0.0, 0.0, 1.0])
            for x, y in zip(a, b)]


def body_surfels(world, pose):
    R = pose.rotation_matrix()
    inv = pose.inverse()
    return [Surfel(position=inv.apply(s.position), normal=R.T @ s.normal,
                   covariance=R.T @ s.covariance @ R, radius=s.radius,
                   support_count=s.support_count) for s in world]


def square_gt(n_side=10, side=4.0):
    """Poses walking a square in the xy plane, yaw along travel direction.

    The last pose ends one step short of the start, so the first and last
    keyframes overlap in space with a large index gap between them."""
    step = side / n_side
    poses = []
    pos = np.zeros(3)
    for leg in range(4):
        yaw = leg * np.pi / 2
        d = step * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        for _ in range(n_side):
            poses.append(Pose.from_rotation_translation(
                Rotation.from_euler("z", yaw), pos.copy()))
            pos = pos + d
    return poses


def drifted_square(seed=0, yaw_bias_deg=0.25, with_loop=True):
    """Square-loop graph: poses integrated from biased odometry, with the
    first and last keyframes sharing an exactly consistent surfel corner."""
    gt = square_gt()
    n = len(gt)
    rng = np.random.default_rng(seed)
    noisy = []
    for i in range(n - 1):
        rel = gt[i].inverse().compose(gt[i + 1])
        tw = np.concatenate([
            rng.normal(0.0, 0.002, 3),
            rng.normal(0.0, 0.0005, 3)
            + np.array([0.0, 0.0, np.radians(yaw_bias_deg)])])
        noisy.append(rel.compose(se3_exp(tw)))
    est = [gt[0]]
    for r in noisy:
        est.append(est[-1].compose(r))
    world = corner_world()
    graph = PoseGraph()
    for i in range(n):
        sf = body_surfels(world, gt[i]) if i in (0, n - 1) else ()
        graph.add_node(i, est[i], sf)
    for i in range(n - 1):
        graph.add_odometry_edge(i, i + 1, noisy[i])
    if with_loop:
        matches = [SurfelMatch(k, k, source_kf=n - 1, target_kf=0)
                   for k in range(len(world))]
        graph.add_surfel_edge(0, n - 1, matches)
    return graph, gt


def ate_rmse(poses: dict, gt: list) -> float:
    err = [np.linalg.norm(poses[i].t - gt[i].t) for i in range(len(gt))]
    return float(np.sqrt(np.mean(np.square(err))))


def iso_map(source_kfs):
    """One tiny splat per entry, tagged with the given source keyframes."""
    from splatslam.gaussians import Gaussian, inverse_bounded_scale
    raw, _ = inverse_bounded_scale(np.full(3, 0.05), BOUNDS)
    rng = np.random.default_rng(11)
    gs = []
    for kf in source_kfs:
        sh = np.zeros((4, 3))
        sh[0] = rng.uniform(0.5, 1.5, 3)
        sh[1:] = rng.normal(0.0, 0.05, (3, 3))
        gs.append(Gaussian(mean=rng.normal(0.0, 1.0, 3),
                           orientation=rng.normal(size=4), raw_scale=raw,
                           opacity_logit=0.5, sh=sh, source_kf=kf))
    gmap = GaussianMap(bounds=BOUNDS)
    gmap.add(gs)
    return gmap


def snapshot(gmap):
    return {f: getattr(gmap, f).copy()
            for f in ("means", "quats", "raw_scales", "opacity_logits",
                      "sh", "source_kf")}


# --- graph structure ----------------------------------------------------

class TestGraphStructure:
    def test_odometry_edges_consecutive_only(self):
        g = PoseGraph()
        for i in range(3):
            g.add_node(i, Pose.identity())
        g.add_odometry_edge(0, 1, Pose.identity())
        with pytest.raises(ValueError):
            g.add_odometry_edge(0, 2, Pose.identity())
        with pytest.raises(ValueError):
            g.add_odometry_edge(1, 0, Pose.identity())
        with pytest.raises(KeyError):
            g.add_odometry_edge(2, 3, Pose.identity())

    def test_default_information_diagonal(self):
        info = default_information()
        np.testing.assert_allclose(np.diag(info)[:3], 1.0 / 0.01 ** 2)
        np.testing.assert_allclose(np.diag(info)[3:],
                                   1.0 / np.radians(0.5) ** 2)
        assert np.count_nonzero(info - np.diag(np.diag(info))) == 0

    def test_surfel_edge_any_pair_with_index_checks(self):
        g = PoseGraph()
        sf = [world_surfel([0, 0, 0], [0, 0, 1])]
        for i in range(5):
            g.add_node(i, Pose.identity(), sf)
        g.add_surfel_edge(0, 4, [SurfelMatch(0, 0)])
        with pytest.raises(ValueError):
            g.add_surfel_edge(2, 2, [])
        with pytest.raises(ValueError):
            g.add_surfel_edge(0, 3, [SurfelMatch(1, 0)])
        with pytest.raises(ValueError):
            g.add_surfel_edge(0, 3, [SurfelMatch(0, 5)])

    def test_duplicate_node_rejected(self):
        g = PoseGraph()
        g.add_node(0, Pose.identity())
        with pytest.raises(ValueError):
            g.add_node(0, Pose.identity())

    def test_connectivity(self):
        g = PoseGraph()
        assert g.is_connected()
        for i in range(4):
            g.add_node(i, Pose.identity())
        for i in range(2):
            g.add_odometry_edge(i, i + 1, Pose.identity())
        assert not g.is_connected()   # node 3 is an island
        g.add_surfel_edge(0, 3, [])
        assert g.is_connected()


# --- edge cost oracles --------------------------------------------------

class TestGraphCost:
    def test_pose_edge_cost_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        A = Pose.from_rotation_translation(Rotation.random(rng=rng),
                                           rng.normal(0, 1, 3))
        B = Pose.from_rotation_translation(Rotation.random(rng=rng),
                                           rng.normal(0, 1, 3))
        M = A.inverse().compose(B).compose(se3_exp(0.05 * rng.normal(size=6)))
        info = np.diag(rng.uniform(50.0, 150.0, 6))
        g = PoseGraph()
        g.add_node(0, A)
        g.add_node(1, B)
        g.add_odometry_edge(0, 1, M, info)
        # independent route: rotation matrices all the way down
        Ra, Rb, Rm = (P.rotation_matrix() for P in (A, B, M))
        t_est = Ra.T @ (B.t - A.t)
        dR = Rm.T @ (Ra.T @ Rb)
        dt = Rm.T @ (t_est - M.t)
        e = np.concatenate([dt, Rotation.from_matrix(dR).as_rotvec()])
        assert pose_graph_cost(g) == pytest.approx(e @ info @ e, rel=1e-9)

    def test_surfel_edge_cost_matches_scalar_sum(self):
        rng = np.random.default_rng(7)
        A = Pose.from_rotation_translation(Rotation.random(rng=rng),
                                           rng.normal(0, 1, 3))
        B = Pose.from_rotation_translation(Rotation.random(rng=rng),
                                           rng.normal(0, 1, 3))

        def rand_surfel():
            S = rng.normal(0.0, 0.05, (3, 3))
            return Surfel(position=rng.normal(0, 1, 3),
                          normal=np.array([0.0, 0.0, 1.0]),
                          covariance=S @ S.T + 0.001 * np.eye(3),
                          radius=0.2, support_count=8)

        si = [rand_surfel() for _ in range(4)]
        sj = [rand_surfel() for _ in range(4)]
        g = PoseGraph()
        g.add_node(0, A, si)
        g.add_node(1, B, sj)
        g.add_surfel_edge(0, 1, [SurfelMatch(k, k) for k in range(4)])
        rel = A.inverse().compose(B)
        lam = 0.7
        expected = lam / 4 * sum(
            gicp_residual(si[k].position, si[k].covariance,
                          sj[k].position, sj[k].covariance, rel)
            for k in range(4))
        assert pose_graph_cost(g, lam) == pytest.approx(expected, rel=1e-9)

    def test_cost_zero_on_consistent_graph(self):
        graph, _ = drifted_square(seed=3, with_loop=False)
        # the node poses were integrated from these exact relatives, so
        # the pose terms vanish identically
        assert pose_graph_cost(graph) <= 1e-18


# --- optimization -------------------------------------------------------

class TestOptimize:
    def test_exactly_consistent_graph_is_fixed_point(self):
        gt = square_gt()
        world = corner_world()
        g = PoseGraph()
        for i, pose in enumerate(gt):
            sf = body_surfels(world, pose) if i in (0, len(gt) - 1) else ()
            g.add_node(i, pose, sf)
        for i in range(len(gt) - 1):
            g.add_odometry_edge(i, i + 1, gt[i].inverse().compose(gt[i + 1]))
        g.add_surfel_edge(0, len(gt) - 1,
                          [SurfelMatch(k, k) for k in range(len(world))])
        before = {k: (p.q.copy(), p.t.copy()) for k, p in g.nodes.items()}
        res = optimize_pose_graph(g)
        assert res.converged and not res.flagged
        for k, pose in res.poses.items():
            q0, t0 = before[k]
            assert np.abs(pose.t - t0).max() <= 1e-9
            assert np.abs(pose.q - q0).max() <= 1e-9

    def test_square_loop_ate_reduction(self):
        for seed in (0, 1, 2):
            graph, gt = drifted_square(seed)
            pre = ate_rmse(graph.nodes, gt)
            assert pre > 0.2, "drift injection too weak to test against"
            res = optimize_pose_graph(graph)
            assert res.cost_final <= res.cost_initial
            assert not res.flagged
            post = ate_rmse(res.poses, gt)
            assert post <= 0.2 * pre, (seed, pre, post)

    def test_lambda_zero_equals_dropping_surfel_edges(self):
        g1, _ = drifted_square(seed=4)
        g2 = g1.copy()
        g2.surfel_edges = []
        r1 = optimize_pose_graph(g1, lambda_surfel=0.0)
        r2 = optimize_pose_graph(g2, lambda_surfel=1.0)
        for k in g1.order():
            np.testing.assert_array_equal(r1.poses[k].q, r2.poses[k].q)
            np.testing.assert_array_equal(r1.poses[k].t, r2.poses[k].t)

    def test_disconnected_graph_raises(self):
        g = PoseGraph()
        for i in range(3):
            g.add_node(i, Pose.identity())
        g.add_odometry_edge(0, 1, Pose.identity())
        with pytest.raises(ValueError):
            optimize_pose_graph(g)
        with pytest.raises(ValueError):
            optimize_pose_graph(PoseGraph())

    def test_iteration_cap_returns_best_iterate_flagged(self):
        graph, _ = drifted_square(seed=1)
        res = optimize_pose_graph(graph, max_iters=1)
        assert res.flagged and not res.converged
        assert res.iterations == 1
        assert res.cost_final <= res.cost_initial

    def test_incremental_frees_only_nearby_nodes(self):
        rng = np.random.default_rng(9)
        gt = [Pose.from_rotation_translation(
            Rotation.from_euler("z", 0.02 * i), [0.5 * i, 0.0, 0.0])
            for i in range(30)]
        g = PoseGraph()
        for i, p in enumerate(gt):
            g.add_node(i, p)
        for i in range(29):
            rel = gt[i].inverse().compose(gt[i + 1])
            noisy = rel.compose(se3_exp(0.01 * rng.normal(size=6)))
            g.add_odometry_edge(i, i + 1, noisy)
        frozen = {k: (p.q.copy(), p.t.copy()) for k, p in g.nodes.items()}
        res = optimize_pose_graph(g, new_edges=[g.odometry_edges[-1]])
        assert set(res.free_ids) == set(range(18, 30))
        for k in range(18):
            np.testing.assert_array_equal(res.poses[k].q, frozen[k][0])
            np.testing.assert_array_equal(res.poses[k].t, frozen[k][1])

    def test_incremental_loop_edge_triggers_full(self):
        graph, _ = drifted_square(seed=2)
        res = optimize_pose_graph(graph, new_edges=[graph.surfel_edges[0]])
        assert set(res.free_ids) == set(graph.order()[1:])


# --- trajectory propagation ---------------------------------------------

def random_pose(rng):
    return Pose.from_rotation_translation(Rotation.random(rng=rng),
                                          rng.normal(0, 2, 3))


class TestPropagate:
    def test_refined_pass_through_and_relative_preservation(self):
        rng = np.random.default_rng(13)
        full = {i: random_pose(rng) for i in range(10)}
        refined = {i: random_pose(rng) for i in (0, 3, 7)}
        out = propagate_missing_poses(refined, full)
        assert set(out) == set(full)
        for i in (0, 3, 7):
            assert out[i] is refined[i]
        # consecutive keyframes where the later one was propagated keep
        # their original relative motion
        for i in (1, 2, 5, 6, 9):
            want = full[i - 1].inverse().compose(full[i])
            got = out[i - 1].inverse().compose(out[i])
            assert got.translation_distance_to(want) <= 1e-9
            assert got.rotation_angle_to(want) <= 1e-9

    def test_first_keyframe_missing_raises(self):
        rng = np.random.default_rng(14)
        full = {i: random_pose(rng) for i in range(4)}
        with pytest.raises(ValueError):
            propagate_missing_poses({2: random_pose(rng)}, full)

    def test_empty_full_trajectory(self):
        assert propagate_missing_poses({}, {}) == {}


# --- carrying splats through pose corrections ---------------------------

class TestTransformGaussians:
    def test_render_equivariance_under_joint_transform(self):
        rng = np.random.default_rng(21)
        gmap, cam, K, _ = random_scene(rng, 10)
        gmap.source_kf[:] = 7
        before = None
        from splatslam.renderer import render
        before = render(gmap, cam, K).image
        delta = Pose.from_rotation_translation(
            Rotation.from_euler("xyz", [0.3, -0.2, 0.5]), [0.4, -0.3, 0.2])
        old = {7: Pose.identity()}
        new = {7: delta}
        stats = transform_gaussians(gmap, old, new)
        assert stats.n_transformed == len(gmap)
        after = render(gmap, delta.compose(cam), K).image
        assert np.abs(after - before).max() <= 1e-5

    def test_scales_opacity_bounds_untouched(self):
        gmap = iso_map([1, 1, 2, 2])
        keep_raw = gmap.raw_scales.copy()
        keep_op = gmap.opacity_logits.copy()
        keep_bounds = gmap.bounds
        delta = Pose.from_rotation_translation(
            Rotation.from_euler("y", 0.4), [1.0, 0.0, -2.0])
        transform_gaussians(gmap, {1: Pose.identity(), 2: Pose.identity()},
                            {1: delta, 2: delta})
        np.testing.assert_array_equal(gmap.raw_scales, keep_raw)
        np.testing.assert_array_equal(gmap.opacity_logits, keep_op)
        assert gmap.bounds is keep_bounds

    def test_unknown_sources_untouched_and_counted(self):
        gmap = iso_map([1, 1, 2, -1, 3, 2])
        snap = snapshot(gmap)
        delta = Pose.from_rotation_translation(
            Rotation.from_euler("x", 0.3), [0.0, 1.0, 0.0])
        stats = transform_gaussians(
            gmap, {1: Pose.identity(), 2: Pose.identity()},
            {1: delta, 2: delta})
        assert stats == (4, 2)
        for row in (3, 4):   # source keyframes -1 and 3 have no new pose
            for f, arr in snap.items():
                np.testing.assert_array_equal(getattr(gmap, f)[row],
                                              arr[row])

    def test_identity_update_is_bit_exact_noop(self):
        gmap = iso_map([1, 2, 1])
        snap = snapshot(gmap)
        pose = random_pose(np.random.default_rng(3))
        transform_gaussians(gmap, {1: pose, 2: pose}, {1: pose, 2: pose})
        for f, arr in snap.items():
            np.testing.assert_array_equal(getattr(gmap, f), arr)

    def test_missing_old_pose_raises(self):
        gmap = iso_map([5])
        with pytest.raises(KeyError):
            transform_gaussians(gmap, {}, {5: Pose.identity()})


# --- loop detection -----------------------------------------------------

def revisit_graph(world, query_gt, query_est):
    """Node 0 at the origin and a distant chain, then the query keyframe
    back near the start. Surfels are consistent with ground truth; the
    query's graph pose carries the drift."""
    g = PoseGraph()
    origin = Pose.identity()
    g.add_node(0, origin, body_surfels(world, origin))
    for i in range(1, 21):
        g.add_node(i, Pose.from_rotation_translation(
            Rotation.identity(), [20.0 + i, 0.0, 0.0]))
    g.add_node(21, query_est, body_surfels(world, query_gt))
    return g


class TestDetectLoopClosure:
    def test_straight_line_has_no_candidates(self):
        g = PoseGraph()
        for i in range(30):
            g.add_node(i, Pose.from_rotation_translation(
                Rotation.identity(), [0.5 * i, 0.0, 0.0]))
        assert detect_loop_closure(g, 29) is None

    def test_recent_neighbors_do_not_count(self):
        g = PoseGraph()
        for i in range(10):
            g.add_node(i, Pose.from_rotation_translation(
                Rotation.identity(), [0.05 * i, 0.0, 0.0]))
        assert detect_loop_closure(g, 9) is None

    def test_drifted_revisit_recovers_relative(self):
        world = corner_world()
        query_gt = Pose.from_rotation_translation(
            Rotation.from_euler("z", np.radians(10.0)), [0.3, 0.2, 0.0])
        drift = se3_exp(np.array([0.2, -0.15, 0.03, 0.0, 0.0, 0.03]))
        g = revisit_graph(world, query_gt, drift.compose(query_gt))
        cand = detect_loop_closure(g, 21)
        assert cand is not None and cand.accepted
        assert cand.match_kf == 0
        assert cand.fitness >= 0.4
        gt_rel = query_gt   # match keyframe sits at the identity
        assert cand.relative.translation_distance_to(gt_rel) <= 0.02
        assert cand.relative.rotation_angle_to(gt_rel) <= np.radians(0.5)
        assert cand.mean_residual <= 0.05

    def test_single_plane_rejected_by_fitness(self):
        world = plane_world()
        query_gt = Pose.from_rotation_translation(
            Rotation.from_euler("z", np.radians(3.0)), [0.1, 0.05, 0.0])
        g = revisit_graph(world, query_gt, query_gt)
        cand = detect_loop_closure(g, 21)
        assert cand is not None
        assert cand.n_matches >= 10   # rejected by geometry, not starvation
        assert cand.fitness == 0.0
        assert not cand.accepted

    def test_unknown_query_raises(self):
        g = PoseGraph()
        g.add_node(0, Pose.identity())
        with pytest.raises(KeyError):
            detect_loop_closure(g, 5)


# --- appearance polish after a loop correction --------------------------

class TestRefineAfterLoop:
    def setup_scene(self):
        rng = np.random.default_rng(31)
        gmap, cam, K, observed = random_scene(rng, 12)
        gmap.source_kf[:8] = 1
        gmap.source_kf[8:] = 2
        views = [(1, Pose.identity(), observed)]
        return gmap, K, views

    def test_zero_iterations_changes_nothing(self):
        gmap, K, views = self.setup_scene()
        snap = snapshot(gmap)
        res = refine_after_loop(gmap, views, 0, K, Pose.identity())
        assert res.n_steps == 0
        assert res.loss_after == res.loss_before
        for f, arr in snap.items():
            np.testing.assert_array_equal(getattr(gmap, f), arr)

    def test_refines_appearance_only_inside_batch(self):
        gmap, K, views = self.setup_scene()
        snap = snapshot(gmap)
        res = refine_after_loop(gmap, views, 6, K, Pose.identity())
        assert res.loss_after <= res.loss_before
        assert res.n_rows == 8
        # geometry frozen everywhere
        np.testing.assert_array_equal(gmap.means, snap["means"])
        np.testing.assert_array_equal(gmap.quats, snap["quats"])
        # splats from the other keyframe untouched entirely
        np.testing.assert_array_equal(gmap.raw_scales[8:],
                                      snap["raw_scales"][8:])
        np.testing.assert_array_equal(gmap.opacity_logits[8:],
                                      snap["opacity_logits"][8:])
        np.testing.assert_array_equal(gmap.sh[8:], snap["sh"][8:])


# --- external formats ---------------------------------------------------

class TestSerialization:
    def test_dump_pose_graph(self, tmp_path):
        graph, _ = drifted_square(seed=6)
        path = tmp_path / "graph.txt"
        dump_pose_graph(graph, path)
        lines = [l for l in path.read_text().splitlines()
                 if l and not l.startswith("#")]
        nodes = [l for l in lines if l.startswith("node ")]
        odom = [l for l in lines if l.startswith("odom ")]
        surf = [l for l in lines if l.startswith("surfel ")]
        assert len(nodes) == len(graph.nodes)
        assert len(odom) == len(graph.odometry_edges)
        assert len(surf) == len(graph.surfel_edges)
        first = nodes[0].split()
        assert int(first[1]) == 0
        np.testing.assert_allclose([float(v) for v in first[2:5]],
                                   graph.nodes[0].t, atol=1e-8)
        s = surf[0].split()
        assert (int(s[1]), int(s[2])) == (0, 39)
        assert int(s[3]) == len(graph.surfel_edges[0].matches)

    def test_write_trajectory_format(self, tmp_path):
        rng = np.random.default_rng(17)
        poses = {i: random_pose(rng) for i in (2, 0, 1)}
        path = tmp_path / "traj.txt"
        write_trajectory(path, poses)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 4
        for row, kf in zip(lines[1:], (0, 1, 2)):
            vals = [float(v) for v in row.split()]
            assert len(vals) == 8
            assert vals[0] == float(kf)
            np.testing.assert_allclose(vals[1:4], poses[kf].t, atol=1e-8)
            np.testing.assert_allclose(vals[4:], poses[kf].q, atol=1e-8)
