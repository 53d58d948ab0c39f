"""Analytic test scenes: axis-aligned rectangles, boxes, and spheres.

Every primitive carries a smooth procedural albedo field (a sum of two
sinusoids per channel), so camera images have texture without any asset
files and the photometric terms of the odometry have gradients to work
with. Shading is Lambertian under a fixed directional light, which makes
surface color view-independent: a splat map with per-splat color can in
principle represent these scenes exactly.

All intersection routines are vectorized over rays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# in-plane axes for each rectangle normal axis
_IN_PLANE = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

_LIGHT_DIR = np.array([0.25, 0.45, 0.857])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.55
_DIFFUSE = 0.45


class EmptySceneError(ValueError):
    """Raised when a scene without primitives is asked to produce data."""


@dataclass(frozen=True)
class ColorField:
    """Smooth RGB albedo field: base + two sinusoidal harmonics per channel.

    Amplitudes are budgeted so the clip to [0, 1] almost never engages,
    keeping the field C-infinity where it matters.
    """

    base: np.ndarray  # (3,)
    amp: np.ndarray  # (2, 3) harmonic x channel
    freq: np.ndarray  # (2, 3, 3) harmonic x channel x spatial direction, rad/m
    phase: np.ndarray  # (2, 3)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.tile(np.asarray(self.base, dtype=np.float64), (p.shape[0], 1))
        for h in range(self.amp.shape[0]):
            arg = np.einsum("nk,ck->nc", p, self.freq[h]) + self.phase[h]
            out += self.amp[h] * np.sin(arg)
        return np.clip(out, 0.0, 1.0)


def random_color_field(rng: np.random.Generator, wavelength=(0.8, 2.5)) -> ColorField:
    base = rng.uniform(0.35, 0.65, size=3)
    amp = rng.uniform(0.04, 0.125, size=(2, 3))
    amp *= 0.25 / max(0.25, amp.sum(axis=0).max())  # clip headroom
    dirs = rng.normal(size=(2, 3, 3))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    wl = rng.uniform(wavelength[0], wavelength[1], size=(2, 3, 1))
    return ColorField(
        base=base,
        amp=amp,
        freq=dirs * (2.0 * np.pi / wl),
        phase=rng.uniform(0.0, 2.0 * np.pi, size=(2, 3)),
    )


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: plane coordinate ``offset`` along ``axis``,
    bounded by ``lo``/``hi`` over the remaining two axes (ascending order).
    Double-sided; the stored normal is +axis and is flipped toward the
    viewer at shading time."""

    axis: int
    offset: float
    lo: np.ndarray  # (2,)
    hi: np.ndarray  # (2,)
    field: ColorField

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        u, v = _IN_PLANE[self.axis]
        dn = dirs[:, self.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origins[:, self.axis]) / dn
        pu = origins[:, u] + t * dirs[:, u]
        pv = origins[:, v] + t * dirs[:, v]
        ok = (
            (np.abs(dn) > 1e-12)
            & (t > 1e-9)
            & (pu >= self.lo[0])
            & (pu <= self.hi[0])
            & (pv >= self.lo[1])
            & (pv <= self.hi[1])
        )
        return np.where(ok, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        n = np.zeros_like(points)
        n[:, self.axis] = 1.0
        return n

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the rectangle for points near its plane (test oracle).
        Points whose in-plane coordinates fall outside the bounds by more
        than 1e-6 get +inf."""
        p = np.atleast_2d(points)
        u, v = _IN_PLANE[self.axis]
        inside = (
            (p[:, u] >= self.lo[0] - 1e-6)
            & (p[:, u] <= self.hi[0] + 1e-6)
            & (p[:, v] >= self.lo[1] - 1e-6)
            & (p[:, v] <= self.hi[1] + 1e-6)
        )
        return np.where(inside, np.abs(p[:, self.axis] - self.offset), np.inf)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    field: ColorField

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center, dtype=np.float64)
        b = np.einsum("ij,ij->i", oc, dirs)
        c0 = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > 1e-9, t_near, np.where(t_far > 1e-9, t_far, np.inf))
        return np.where(disc > 0.0, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        n = points - np.asarray(self.center, dtype=np.float64)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        r = np.linalg.norm(p - np.asarray(self.center, dtype=np.float64), axis=1)
        return np.abs(r - self.radius)


@dataclass
class RayHits:
    """Per-ray intersection results; rows where ``hit`` is False are zeroed."""

    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    prim_index: np.ndarray
    hit: np.ndarray


@dataclass
class Scene:
    """A list of primitives plus the nominal extent of the mapped region.

    ``extent`` is metadata for consumers (trajectory sizing, ablation
    thresholds); backdrop surfaces may lie far outside it, the way sky and
    distant structure sit outside the region a map is graded on.
    """

    primitives: list
    extent: float
    seed: int = 0

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, t_max: float = np.inf) -> RayHits:
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if origins.shape[0] == 1 and dirs.shape[0] > 1:
            origins = np.broadcast_to(origins, dirs.shape)
        n = dirs.shape[0]
        if not self.primitives:
            raise EmptySceneError("scene has no primitives")
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_i[closer] = i
        hit = np.isfinite(best_t) & (best_t <= t_max)
        points = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        points[hit] = origins[hit] + best_t[hit, None] * dirs[hit]
        for i, prim in enumerate(self.primitives):
            sel = hit & (best_i == i)
            if np.any(sel):
                normals[sel] = prim.normals(points[sel])
        return RayHits(t=best_t, points=points, normals=normals, prim_index=best_i, hit=hit)

    def shade(self, hits: RayHits, dirs: np.ndarray, background: np.ndarray) -> np.ndarray:
        """Albedo times Lambert factor; misses get the background color.
        Normals are flipped toward the viewer so double-sided surfaces
        shade consistently from the visible side."""
        dirs = np.atleast_2d(dirs)
        colors = np.tile(np.asarray(background, dtype=np.float64), (dirs.shape[0], 1))
        for i, prim in enumerate(self.primitives):
            sel = hits.hit & (hits.prim_index == i)
            if not np.any(sel):
                continue
            albedo = prim.field(hits.points[sel])
            n = hits.normals[sel]
            facing = np.einsum("ij,ij->i", n, dirs[sel]) > 0.0
            n = np.where(facing[:, None], -n, n)
            lambert = np.maximum(0.0, n @ _LIGHT_DIR)
            colors[sel] = albedo * (_AMBIENT + _DIFFUSE * lambert)[:, None]
        return np.clip(colors, 0.0, 1.0)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Min distance to any primitive surface (test oracle for ray hits)."""
        p = np.atleast_2d(points)
        d = np.full(p.shape[0], np.inf)
        for prim in self.primitives:
            d = np.minimum(d, prim.surface_distance(p))
        return d


def _box(lo, hi, fields) -> list:
    """Six rectangles forming an axis-aligned box; one field per pair of
    opposing faces keeps the parameter count down."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    rects = []
    for axis in range(3):
        u, v = _IN_PLANE[axis]
        b_lo = np.array([lo[u], lo[v]])
        b_hi = np.array([hi[u], hi[v]])
        rects.append(Rect(axis, float(lo[axis]), b_lo, b_hi, fields[axis]))
        rects.append(Rect(axis, float(hi[axis]), b_lo, b_hi, fields[axis]))
    return rects


def build_scene(
    seed: int,
    extent: float = 8.0,
    wall_height: float = 3.0,
    n_boxes: int = 3,
    n_spheres: int = 2,
) -> Scene:
    """Closed room with free-standing boxes and floating spheres.

    The obstacle cluster sits in the middle of the room so the standard
    trajectories (which keep a 2 m margin from the walls) never collide
    with it. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    prims = []
    # room shell: floor, ceiling, four walls
    prims.append(Rect(2, 0.0, np.zeros(2), np.full(2, extent), random_color_field(rng)))
    prims.append(Rect(2, wall_height, np.zeros(2), np.full(2, extent), random_color_field(rng)))
    wall_lo = np.array([0.0, 0.0])
    wall_hi_x = np.array([extent, wall_height])
    for axis in (0, 1):
        for off in (0.0, extent):
            prims.append(Rect(axis, off, wall_lo, wall_hi_x, random_color_field(rng)))
    center = 0.5 * extent
    spread = extent / 6.0
    for _ in range(n_boxes):
        size = rng.uniform(0.5, 1.2, size=3)
        cxy = center + rng.uniform(-spread, spread, size=2)
        lo = np.array([cxy[0] - 0.5 * size[0], cxy[1] - 0.5 * size[1], 0.0])
        hi = np.array([cxy[0] + 0.5 * size[0], cxy[1] + 0.5 * size[1], size[2]])
        prims.extend(_box(lo, hi, [random_color_field(rng) for _ in range(3)]))
    for _ in range(n_spheres):
        c = np.array(
            [
                center + rng.uniform(-spread, spread),
                center + rng.uniform(-spread, spread),
                rng.uniform(1.0, 2.2),
            ]
        )
        prims.append(Sphere(c, float(rng.uniform(0.25, 0.45)), random_color_field(rng)))
    return Scene(primitives=prims, extent=extent, seed=seed)


def build_corridor_scene(seed: int, length: float = 20.0, height: float = 4.0) -> Scene:
    """A single textured wall: geometrically degenerate (one plane), but
    photometrically rich. Point-to-plane alignment alone cannot fix the
    in-plane translation here; that is the point."""
    rng = np.random.default_rng(seed)
    wall = Rect(
        1,
        2.5,
        np.array([-0.5 * length, 0.0]),
        np.array([0.5 * length, height]),
        random_color_field(rng, wavelength=(0.5, 1.2)),
    )
    return Scene(primitives=[wall], extent=length, seed=seed)


def build_sky_scene(seed: int, backdrop_dist: float = 45.0) -> Scene:
    """Sparse-supervision stress scene: a small foreground object plus a
    huge bright backdrop far outside the nominal extent.

    Scanned with a deliberately coarse ray grid, the backdrop yields only a
    handful of points, so its splats start far smaller than the area they
    are asked to explain. An unbounded scale parameterization will inflate
    them by orders of magnitude; a bounded one cannot.
    """
    rng = np.random.default_rng(seed)
    bright = ColorField(
        base=np.array([0.82, 0.84, 0.88]),
        amp=rng.uniform(0.02, 0.05, size=(2, 3)),
        freq=rng.normal(size=(2, 3, 3)) * (2.0 * np.pi / 15.0),
        phase=rng.uniform(0.0, 2.0 * np.pi, size=(2, 3)),
    )
    half = backdrop_dist * 1.6  # overfills a 90 deg field of view
    backdrop = Rect(
        0,
        backdrop_dist,
        np.array([-half, -half]),
        np.array([half, half]),
        bright,
    )
    ball = Sphere(
        np.array([2.5, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)]),
        0.35,
        random_color_field(rng, wavelength=(0.3, 0.8)),
    )
    return Scene(primitives=[backdrop, ball], extent=2.0, seed=seed)
