"""Global trajectory consistency: pose graph, loop closures, map re-anchoring.

The frontend hands over keyframe poses, relative odometry measurements and
per-keyframe surfel sets. This module holds them in a pose graph, detects
when the trajectory revisits mapped space, and redistributes the loop error
over the whole trajectory. Corrections reach the dense map afterwards by
rigidly moving each keyframe's splats with its pose delta, followed by an
appearance-only polish; splat geometry is never re-estimated here.

Two kinds of constraint live in the graph. Relative-pose edges connect
consecutive keyframes only and carry the frontend odometry with a fixed
information matrix. Surfel edges may connect any keyframe pair and carry
raw surfel correspondences; their alignment error is the same whitened
covariance-to-covariance form the loop matcher minimizes, so a verified
loop enters the graph as a surfel edge and keeps pulling the two ends
together as the rest of the trajectory shifts around them.
"""

from __future__ import annotations

from collections import deque
from typing import NamedTuple, Optional

import numpy as np

from .geometry import Pose, se3_exp, se3_log
from .optim import levenberg_marquardt
from .surfels import (GICP_COND_MAX, GICP_EPS, match_surfels, normals_of,
                      positions_of)

ODOM_SIGMA_T = 0.01                  # m, odometry edge translation stddev
ODOM_SIGMA_R = np.radians(0.5)       # rad, odometry edge rotation stddev
LOOP_RADIUS = 5.0                    # m, candidate search radius
LOOP_MIN_GAP = 20                    # keyframes between query and candidate
LOOP_FITNESS_MIN = 0.4               # matched fraction of query surfels
LOOP_RESID_MAX = 0.15                # m, mean point gap after alignment
LOOP_MIN_SUPPORT = 20.0              # effective matches per translation axis
INCREMENTAL_HORIZON = 10             # graph distance around new edges
FD_STEP = 1e-6


def default_information() -> np.ndarray:
    """Inverse-variance weights for one odometry edge, translation first."""
    w = [1.0 / ODOM_SIGMA_T ** 2] * 3 + [1.0 / ODOM_SIGMA_R ** 2] * 3
    return np.diag(w)


class OdometryEdge(NamedTuple):
    i: int
    j: int
    relative: Pose            # pose of j expressed in frame i
    information: np.ndarray   # 6x6, [t, r] ordering


class SurfelEdge(NamedTuple):
    i: int
    j: int
    matches: tuple            # SurfelMatch with source in j, target in i


class LoopCandidate(NamedTuple):
    query_kf: int
    match_kf: int
    relative: Pose            # query keyframe expressed in the match frame
    fitness: float
    n_matches: int
    mean_residual: float
    accepted: bool
    matches: tuple = ()       # final correspondences, ready for a graph edge


class PoseGraph:
    """Keyframe poses with relative-pose and surfel constraints.

    Nodes are inserted in keyframe order and that order is load-bearing:
    relative-pose edges are only legal between neighbors in it, and the
    first node pins the free gauge during optimization. Surfel sets ride
    along so edge residuals can be evaluated without reaching back into
    the frontend.
    """

    def __init__(self):
        self.nodes: dict[int, Pose] = {}
        self.surfels: dict[int, tuple] = {}
        self.odometry_edges: list[OdometryEdge] = []
        self.surfel_edges: list[SurfelEdge] = []

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, kf_id):
        return kf_id in self.nodes

    def order(self) -> list[int]:
        return list(self.nodes)

    def pose_of(self, kf_id: int) -> Pose:
        return self.nodes[kf_id]

    def set_pose(self, kf_id: int, pose: Pose):
        if kf_id not in self.nodes:
            raise KeyError(f"node {kf_id} not in graph")
        self.nodes[kf_id] = pose

    def add_node(self, kf_id: int, pose: Pose, surfels=()):
        if kf_id in self.nodes:
            raise ValueError(f"node {kf_id} already in graph")
        self.nodes[kf_id] = pose
        self.surfels[kf_id] = tuple(surfels)

    def add_odometry_edge(self, i: int, j: int, relative: Pose,
                          information: Optional[np.ndarray] = None):
        order = self.order()
        for k in (i, j):
            if k not in self.nodes:
                raise KeyError(f"node {k} not in graph")
        if order.index(j) != order.index(i) + 1:
            raise ValueError(
                f"odometry edge {i}->{j} does not connect consecutive "
                "keyframes; use a surfel edge for long-range constraints")
        if information is None:
            information = default_information()
        information = np.asarray(information, dtype=float)
        if information.shape != (6, 6):
            raise ValueError("information must be 6x6")
        self.odometry_edges.append(OdometryEdge(i, j, relative, information))

    def add_surfel_edge(self, i: int, j: int, matches):
        if i == j:
            raise ValueError("surfel edge endpoints must differ")
        for k in (i, j):
            if k not in self.nodes:
                raise KeyError(f"node {k} not in graph")
        matches = tuple(matches)
        for m in matches:
            if not (0 <= m.target_index < len(self.surfels[i])):
                raise ValueError(f"match target {m.target_index} out of "
                                 f"range for node {i}")
            if not (0 <= m.source_index < len(self.surfels[j])):
                raise ValueError(f"match source {m.source_index} out of "
                                 f"range for node {j}")
        self.surfel_edges.append(SurfelEdge(i, j, matches))

    def adjacency(self) -> dict:
        adj = {k: set() for k in self.nodes}
        for e in self.odometry_edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        for e in self.surfel_edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        return adj

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        adj = self.adjacency()
        start = next(iter(self.nodes))
        seen = {start}
        queue = deque([start])
        while queue:
            k = queue.popleft()
            for n in adj[k]:
                if n not in seen:
                    seen.add(n)
                    queue.append(n)
        return len(seen) == len(self.nodes)

    def copy(self) -> "PoseGraph":
        g = PoseGraph()
        g.nodes = dict(self.nodes)
        g.surfels = dict(self.surfels)
        g.odometry_edges = list(self.odometry_edges)
        g.surfel_edges = list(self.surfel_edges)
        return g


def _surfel_edge_arrays(graph: PoseGraph, edge: SurfelEdge):
    """Positions and covariances of an edge's matched pairs, body frames."""
    tgt = graph.surfels[edge.i]
    src = graph.surfels[edge.j]
    ti = [m.target_index for m in edge.matches]
    si = [m.source_index for m in edge.matches]
    p_i = np.array([tgt[k].position for k in ti]).reshape(-1, 3)
    c_i = np.array([tgt[k].covariance for k in ti]).reshape(-1, 3, 3)
    p_j = np.array([src[k].position for k in si]).reshape(-1, 3)
    c_j = np.array([src[k].covariance for k in si]).reshape(-1, 3, 3)
    return p_i, c_i, p_j, c_j


def _batch_whitened(p_i, c_i, p_j, c_j, rel: Pose,
                    keep: Optional[np.ndarray] = None):
    """Vectorized form of the scalar whitened alignment residual.

    Returns an (n, 3) array whose rows match gicp_whitened_residual on the
    same pairs. keep masks out pairs rejected for conditioning; when None
    the mask is computed here and returned so callers can freeze it.
    """
    R = rel.rotation_matrix()
    d = p_j @ R.T + rel.t - p_i
    M = c_j + np.einsum('ab,nbc,dc->nad', R, c_i, R)
    M = M + GICP_EPS * np.eye(3)
    if keep is None:
        w = np.linalg.eigvalsh(M)
        keep = w[:, 2] <= GICP_COND_MAX * np.maximum(w[:, 0], 1e-300)
    M = M[keep]
    L = np.linalg.cholesky(M)
    r = np.linalg.solve(L, d[keep][:, :, None])[:, :, 0]
    return r, keep


def detect_loop_closure(graph: PoseGraph, query_kf: int, *,
                        radius: float = LOOP_RADIUS,
                        min_gap: int = LOOP_MIN_GAP,
                        fitness_min: float = LOOP_FITNESS_MIN,
                        resid_max: float = LOOP_RESID_MAX,
                        match_radii=(1.0, 0.5),
                        normal_tol_deg: float = 30.0,
                        min_matches: int = 10) -> Optional[LoopCandidate]:
    """Search for a revisit of mapped space and align against it.

    Candidates must sit within radius of the query's current pose estimate
    and at least min_gap keyframes earlier, so the sliding window never
    competes with itself. The nearest candidate is aligned with two
    match-then-solve rounds of covariance-weighted registration, coarse
    radius first. Acceptance needs both a high matched fraction of the
    query's surfels and a small mean point gap; and if the final matches
    leave any translation direction unsupported by surfel normals, for
    example when everything lies on one plane, the fitness is zeroed so
    the candidate fails the fitness test rather than committing a slide
    along the unconstrained direction to the graph.
    """
    if query_kf not in graph.nodes:
        raise KeyError(f"node {query_kf} not in graph")
    order = graph.order()
    qidx = order.index(query_kf)
    t_q = graph.nodes[query_kf].t
    cands = []
    for idx, k in enumerate(order):
        if qidx - idx < min_gap:
            continue
        d = float(np.linalg.norm(graph.nodes[k].t - t_q))
        if d <= radius:
            cands.append((d, k))
    if not cands:
        return None
    match_kf = min(cands)[1]

    src = graph.surfels[query_kf]
    tgt = graph.surfels[match_kf]
    rel = graph.nodes[match_kf].inverse().compose(graph.nodes[query_kf])
    n_src = max(len(src), 1)

    for r in match_radii:
        matches = match_surfels(src, tgt, rel, r, normal_tol_deg,
                                source_kf=query_kf, target_kf=match_kf)
        if len(matches) < min_matches:
            return LoopCandidate(query_kf, match_kf, rel,
                                 len(matches) / n_src, len(matches),
                                 float('inf'), False)
        p_i = positions_of([tgt[m.target_index] for m in matches])
        c_i = np.array([tgt[m.target_index].covariance for m in matches])
        p_j = positions_of([src[m.source_index] for m in matches])
        c_j = np.array([src[m.source_index].covariance for m in matches])
        _, keep = _batch_whitened(p_i, c_i, p_j, c_j, rel)
        rel0 = rel

        def residual(x, rel0=rel0, p_i=p_i, c_i=c_i, p_j=p_j, c_j=c_j,
                     keep=keep):
            rel_x = se3_exp(x).compose(rel0)
            r, _ = _batch_whitened(p_i, c_i, p_j, c_j, rel_x, keep)
            return r.ravel()

        result = levenberg_marquardt(residual, np.zeros(6), max_iters=25)
        rel = se3_exp(result.params).compose(rel0)

    matches = match_surfels(src, tgt, rel, match_radii[-1], normal_tol_deg,
                            source_kf=query_kf, target_kf=match_kf)
    n_final = len(matches)
    fitness = n_final / n_src
    if n_final == 0:
        return LoopCandidate(query_kf, match_kf, rel, 0.0, 0, float('inf'),
                             False)
    p_i = positions_of([tgt[m.target_index] for m in matches])
    p_j = positions_of([src[m.source_index] for m in matches])
    gaps = np.linalg.norm(rel.apply(p_j) - p_i, axis=1)
    mean_resid = float(gaps.mean())
    # translation observability: surfel normals of the matched targets must
    # span all three axes with real support, or the alignment is free to
    # slide and its tight residual means nothing
    nrm = normals_of([tgt[m.target_index] for m in matches])
    w = np.linalg.eigvalsh(nrm.T @ nrm)
    if w[0] < LOOP_MIN_SUPPORT:
        fitness = 0.0
    accepted = fitness >= fitness_min and mean_resid <= resid_max
    return LoopCandidate(query_kf, match_kf, rel, fitness, n_final,
                         mean_resid, accepted, tuple(matches))


class GraphOptResult(NamedTuple):
    poses: dict
    cost_initial: float
    cost_final: float
    iterations: int
    converged: bool
    flagged: bool           # hit the iteration cap; poses are best iterate
    free_ids: tuple


def _free_set_incremental(graph: PoseGraph, new_edges,
                          horizon: int) -> Optional[set]:
    """Nodes within graph distance horizon of any new edge, or None when a
    new edge spans a loop-sized keyframe gap and everything must move."""
    order = graph.order()
    idx = {k: n for n, k in enumerate(order)}
    seeds = set()
    for e in new_edges:
        if abs(idx[e.i] - idx[e.j]) >= LOOP_MIN_GAP:
            return None
        seeds.update((e.i, e.j))
    adj = graph.adjacency()
    dist = {k: 0 for k in seeds}
    queue = deque(seeds)
    while queue:
        k = queue.popleft()
        if dist[k] == horizon:
            continue
        for n in adj[k]:
            if n not in dist:
                dist[n] = dist[k] + 1
                queue.append(n)
    return set(dist)


def _residual_blocks(graph: PoseGraph, poses: dict, lambda_surfel: float,
                     free: Optional[set] = None):
    """Stackable residual blocks, each touching only its two endpoints.

    Edges whose endpoints are all held fixed contribute a constant and are
    dropped. Surfel conditioning masks are frozen at the entry poses so
    the stacked residual keeps its length across perturbations.
    """

    def movable(e):
        return free is None or e.i in free or e.j in free

    blocks = []
    n_rows = 0
    for e in graph.odometry_edges:
        if not movable(e):
            continue
        sqrt_info = np.linalg.cholesky(e.information).T

        def res(poses, e=e, sqrt_info=sqrt_info):
            est = poses[e.i].inverse().compose(poses[e.j])
            return sqrt_info @ se3_log(e.relative.inverse().compose(est))

        blocks.append((res, (e.i, e.j), n_rows, 6))
        n_rows += 6
    if lambda_surfel > 0.0:
        for e in graph.surfel_edges:
            if not movable(e) or not e.matches:
                continue
            p_i, c_i, p_j, c_j = _surfel_edge_arrays(graph, e)
            rel0 = poses[e.i].inverse().compose(poses[e.j])
            _, keep = _batch_whitened(p_i, c_i, p_j, c_j, rel0)
            n_kept = int(keep.sum())
            if n_kept == 0:
                continue
            scale = np.sqrt(lambda_surfel / n_kept)

            def res(poses, e=e, p_i=p_i, c_i=c_i, p_j=p_j, c_j=c_j,
                    keep=keep, scale=scale):
                rel = poses[e.i].inverse().compose(poses[e.j])
                r, _ = _batch_whitened(p_i, c_i, p_j, c_j, rel, keep)
                return scale * r.ravel()

            blocks.append((res, (e.i, e.j), n_rows, 3 * n_kept))
            n_rows += 3 * n_kept
    return blocks, n_rows


def _stack_blocks(blocks, n_rows, poses) -> np.ndarray:
    out = np.empty(n_rows)
    for res, _, row, m in blocks:
        out[row:row + m] = res(poses)
    return out


def pose_graph_cost(graph: PoseGraph, lambda_surfel: float = 1.0) -> float:
    """Total squared whitened error of every edge at the current poses."""
    blocks, n_rows = _residual_blocks(graph, graph.nodes, lambda_surfel)
    if n_rows == 0:
        return 0.0
    r = _stack_blocks(blocks, n_rows, graph.nodes)
    return float(r @ r)


def optimize_pose_graph(graph: PoseGraph, lambda_surfel: float = 1.0,
                        new_edges=None, max_iters: int = 100,
                        step_tol: float = 1e-10) -> GraphOptResult:
    """Damped Gauss-Newton over all node poses, first node held fixed.

    Every relative-pose edge contributes its information-whitened 6-dof
    log error; every surfel edge contributes its whitened match residuals
    scaled by sqrt(lambda_surfel / n_matches), so a loop with 400 matches
    does not drown one with 40. The Jacobian is built by finite differences
    per edge, touching only the twelve parameters of that edge's endpoints,
    and accepted steps are folded into the poses so each iteration
    re-linearizes about the latest estimate. Cost never increases across
    accepted iterations; running out of iterations returns the best
    iterate with the flag set.

    With new_edges given, only nodes within a fixed graph distance of the
    new edges' endpoints are freed, unless one of them closes a loop, in
    which case the whole trajectory is re-optimized. The reported costs
    then cover the edges touching the freed nodes; fixed-to-fixed edges
    are constant and excluded.
    """
    if not graph.nodes:
        raise ValueError("empty pose graph")
    if not graph.is_connected():
        raise ValueError("pose graph is disconnected; every node needs a "
                         "path to the first keyframe")
    order = graph.order()
    gauge = order[0]
    free = set(order[1:])
    if new_edges is not None:
        inc = _free_set_incremental(graph, new_edges, INCREMENTAL_HORIZON)
        if inc is not None:
            free = inc - {gauge}
    free_ids = [k for k in order if k in free]
    col = {k: 6 * n for n, k in enumerate(free_ids)}
    poses = dict(graph.nodes)

    blocks, n_rows = _residual_blocks(graph, poses, lambda_surfel, free)
    if not blocks or not free_ids:
        return GraphOptResult(poses, 0.0, 0.0, 0, True, False,
                              tuple(free_ids))

    def stack(poses):
        return _stack_blocks(blocks, n_rows, poses)

    r0 = stack(poses)
    cost = float(r0 @ r0)
    cost_initial = cost
    mu = 1e-6
    converged = False
    it = 0
    while it < max_iters and not converged:
        it += 1
        J = np.zeros((n_rows, 6 * len(free_ids)))
        for res, ends, row, m in blocks:
            base = r0[row:row + m]
            for k in ends:
                if k not in free:
                    continue
                for a in range(6):
                    tw = np.zeros(6)
                    tw[a] = FD_STEP
                    pert = dict(poses)
                    pert[k] = se3_exp(tw).compose(poses[k])
                    J[row:row + m, col[k] + a] = (res(pert) - base) / FD_STEP
        g = J.T @ r0
        diag = np.maximum(np.einsum('ij,ij->j', J, J), 1e-12)
        accepted = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(J.T @ J + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            if np.linalg.norm(delta) < step_tol:
                converged = True
                break
            cand = dict(poses)
            for k in free_ids:
                cand[k] = se3_exp(delta[col[k]:col[k] + 6]).compose(poses[k])
            r1 = stack(cand)
            c1 = float(r1 @ r1)
            if c1 <= cost:
                poses, r0, cost = cand, r1, c1
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                if np.linalg.norm(delta) < 1e-8:
                    converged = True
                break
            mu *= 10.0
        if not accepted and not converged:
            converged = True   # damping exhausted, no downhill step left
    flagged = not converged
    graph.nodes.update(poses)
    return GraphOptResult(poses, cost_initial, cost, it, converged, flagged,
                          tuple(free_ids))


def propagate_missing_poses(refined: dict, full: dict) -> dict:
    """Extend a refined subset to the full trajectory by chaining the
    original relative motions onto the nearest earlier refined pose.

    Keyframes are processed in id order. A missing keyframe inherits
    refined[prev] composed with the original prev-to-here relative, so
    consecutive missing keyframes keep their original relative motion
    exactly. The first keyframe must be refined; there is nothing earlier
    to chain from.
    """
    ids = sorted(full)
    if not ids:
        return {}
    if ids[0] not in refined:
        raise ValueError("first keyframe missing from refined trajectory; "
                         "propagation has no anchor")
    out = {}
    prev = None
    for k in ids:
        if k in refined:
            out[k] = refined[k]
        else:
            delta = full[prev].inverse().compose(full[k])
            out[k] = out[prev].compose(delta)
        prev = k
    return out


class TransformStats(NamedTuple):
    n_transformed: int
    n_unknown: int


def transform_gaussians(gmap, old_poses: dict, new_poses: dict
                        ) -> TransformStats:
    """Rigidly carry each keyframe's splats through its pose correction.

    Every splat tagged with source keyframe k moves by new_k composed with
    the inverse of old_k: means transform, orientations and the directional
    color band rotate, scales and opacities are untouched. Splats whose
    source keyframe has no entry in new_poses, including the untagged -1,
    stay where they are and are counted.
    """
    src = np.asarray(gmap.source_kf)
    known = np.isin(src, np.array(list(new_poses), dtype=np.int64))
    for k, new in new_poses.items():
        mask = src == k
        if not mask.any():
            continue
        if k not in old_poses:
            raise KeyError(f"keyframe {k} has a new pose but no old pose")
        old = old_poses[k]
        if np.array_equal(old.q, new.q) and np.array_equal(old.t, new.t):
            continue   # exact no-op; keep the splats bit-identical
        delta = new.compose(old.inverse())
        gmap.transform_subset(delta, mask)
    return TransformStats(int(known.sum()), int((~known).sum()))


class LoopView(NamedTuple):
    kf_id: int
    world_from_body: Pose
    image: np.ndarray


class LoopRefineResult(NamedTuple):
    loss_before: float
    loss_after: float
    n_steps: int
    n_rows: int
    reverted: bool


def refine_after_loop(gmap, views, iters: int, K, body_from_camera: Pose,
                      *, rates: Optional[dict] = None,
                      lambda_ssim: float = 0.2, bg=None) -> LoopRefineResult:
    """Appearance-only polish of the re-anchored splats.

    After a loop correction the rigid transform is exact for geometry but
    the seam where old and new passes meet can disagree photometrically.
    This runs a few optimizer steps on scales, opacities and color only,
    restricted to splats sourced from the refined keyframes; positions and
    orientations are frozen so the geometry settled by the pose graph
    stays put. A pass that ends worse than it started is rolled back.
    """
    from .local_mapper import AdamState, default_rates
    from .losses import render_loss
    from .renderer import GaussianGrads, render, render_loss_and_grads

    views = [LoopView(*v) for v in views]

    def window_loss():
        total = 0.0
        for v in views:
            cam = v.world_from_body.compose(body_from_camera)
            img = render(gmap, cam, K, bg=bg).image
            total += render_loss(img, v.image, lambda_ssim)
        return total

    loss_before = window_loss()
    ids = np.array(sorted({v.kf_id for v in views}), dtype=np.int64)
    rows = np.flatnonzero(np.isin(np.asarray(gmap.source_kf), ids))
    if iters == 0 or len(rows) == 0 or not views:
        return LoopRefineResult(loss_before, loss_before, 0, len(rows),
                                False)
    if rates is None:
        extent = float(np.linalg.norm(
            np.ptp(gmap.means, axis=0))) if len(gmap) else 1.0
        rates = default_rates(max(extent, 1e-6))
    rates = dict(rates)
    rates["means"] = 0.0
    rates["quats"] = 0.0

    snap = {f: getattr(gmap, f)[rows].copy() for f in AdamState.FIELDS}
    adam = AdamState()
    adam.ensure(gmap)
    for _ in range(iters):
        acc = None
        for v in views:
            cam = v.world_from_body.compose(body_from_camera)
            _, _, grads = render_loss_and_grads(gmap, cam, K, v.image,
                                                lambda_ssim, bg=bg)
            if acc is None:
                acc = grads
            else:
                acc = GaussianGrads(*[a + b for a, b in zip(acc, grads)])
        adam.step(gmap, acc, rows, rates)
    loss_after = window_loss()
    reverted = False
    if loss_after > loss_before:
        for f in AdamState.FIELDS:
            getattr(gmap, f)[rows] = snap[f]
        loss_after = loss_before
        reverted = True
    return LoopRefineResult(loss_before, loss_after, iters, len(rows),
                            reverted)


def dump_pose_graph(graph: PoseGraph, path):
    """Plain-text dump: one line per node and per edge, for inspection."""
    with open(path, "w") as f:
        f.write(f"# nodes {len(graph.nodes)} odometry "
                f"{len(graph.odometry_edges)} surfel "
                f"{len(graph.surfel_edges)}\n")
        f.write("# node <id> tx ty tz qx qy qz qw\n")
        for k, pose in graph.nodes.items():
            f.write("node %d %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                    % (k, *pose.t, *pose.q))
        f.write("# odom <i> <j> tx ty tz qx qy qz qw idiag x6\n")
        for e in graph.odometry_edges:
            f.write("odom %d %d %.9f %.9f %.9f %.9f %.9f %.9f %.9f "
                    "%.6g %.6g %.6g %.6g %.6g %.6g\n"
                    % (e.i, e.j, *e.relative.t, *e.relative.q,
                       *np.diag(e.information)))
        f.write("# surfel <i> <j> n_matches\n")
        for e in graph.surfel_edges:
            f.write("surfel %d %d %d\n" % (e.i, e.j, len(e.matches)))


def write_trajectory(path, poses: dict, timestamps: Optional[dict] = None):
    """Trajectory in the conventional one-pose-per-line text layout:
    timestamp, translation, then unit quaternion with scalar part last.
    Without explicit timestamps the keyframe id stands in."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for k in sorted(poses):
            t = timestamps[k] if timestamps is not None else float(k)
            pose = poses[k]
            f.write("%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                    % (t, *pose.t, *pose.q))
