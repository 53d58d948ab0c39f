"""Deterministic CPU splat rasterizer with analytic parameter gradients.

Splats are projected to screen, depth-sorted (ties broken by insertion id),
binned into 16x16 pixel tiles, and alpha-composited front to back. Integer
pixel coordinates are the sample points. The brute-force per-pixel path and
the tiled path produce bit-identical images.

The backward pass is hand-derived reverse mode through the whole chain:
compositing, the 2D conic, the camera-frame covariance including the
projection Jacobian's dependence on the mean, the quaternion-to-rotation map
(with normalization), spherical harmonics including the view-direction
dependence on the mean, and the sigmoid encodings of opacity and scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from . import _kernels
from .gaussians import SH_C0, SH_C1, Gaussian, GaussianMap, ScaleBounds
from .geometry import CameraIntrinsics, Pose

TILE_SIZE = 16
DILATION_PX2 = 0.3
Z_NEAR = 1e-3


@dataclass(frozen=True)
class ProjectedSplat:
    center: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2,2) pixels^2, dilation included
    depth: float         # meters
    opacity: float
    color: np.ndarray    # (3,) view-evaluated, clamped to [0,1]


class RenderResult(NamedTuple):
    image: np.ndarray          # (H,W,3) in [0,1]
    transmittance: np.ndarray  # (H,W) leftover background weight


class GaussianGrads(NamedTuple):
    means: np.ndarray
    quats: np.ndarray
    raw_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray


def _quat_to_rot(q):
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _quat_rot_backward(q, dR):
    """Contract dL/dR with dR/dq for unit quaternions, vectorized."""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 4))
    out[:, 0] = 2 * (dR[:, 0, 1] * y + dR[:, 0, 2] * z + dR[:, 1, 0] * y
                     - 2 * dR[:, 1, 1] * x - dR[:, 1, 2] * w + dR[:, 2, 0] * z
                     + dR[:, 2, 1] * w - 2 * dR[:, 2, 2] * x)
    out[:, 1] = 2 * (-2 * dR[:, 0, 0] * y + dR[:, 0, 1] * x + dR[:, 0, 2] * w
                     + dR[:, 1, 0] * x + dR[:, 1, 2] * z - dR[:, 2, 0] * w
                     + dR[:, 2, 1] * z - 2 * dR[:, 2, 2] * y)
    out[:, 2] = 2 * (-2 * dR[:, 0, 0] * z - dR[:, 0, 1] * w + dR[:, 0, 2] * x
                     + dR[:, 1, 0] * w - 2 * dR[:, 1, 1] * z + dR[:, 1, 2] * y
                     + dR[:, 2, 0] * x + dR[:, 2, 1] * y)
    out[:, 3] = 2 * (-dR[:, 0, 1] * z + dR[:, 0, 2] * y + dR[:, 1, 0] * z
                     - dR[:, 1, 2] * x - dR[:, 2, 0] * y + dR[:, 2, 1] * x)
    return out


class _Projection(NamedTuple):
    rows: np.ndarray      # original splat indices for each projected row
    order: np.ndarray     # projected-row indices in composite order
    centers: np.ndarray
    conics: np.ndarray    # (V,3) upper-triangle of inverse cov2d
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    cov2d: np.ndarray
    p_cam: np.ndarray
    J: np.ndarray
    M: np.ndarray
    cov3d: np.ndarray
    Rmat: np.ndarray
    sigma: np.ndarray
    qunit: np.ndarray
    qnorm: np.ndarray
    viewdir: np.ndarray
    inv_dist: np.ndarray
    color_pre: np.ndarray
    Rcw: np.ndarray
    rx: np.ndarray
    ry: np.ndarray


def _project(gmap: GaussianMap, cam: Pose, K: CameraIntrinsics) -> _Projection:
    cam_inv = cam.inverse()
    Rcw = cam_inv.rotation_matrix()
    p_cam_all = gmap.means @ Rcw.T + cam_inv.t
    rows = np.flatnonzero(p_cam_all[:, 2] > Z_NEAR)

    p_cam = p_cam_all[rows]
    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    centers = np.stack([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy], axis=1)

    qraw = gmap.quats[rows]
    qnorm = np.linalg.norm(qraw, axis=1)
    qunit = qraw / qnorm[:, None]
    Rmat = _quat_to_rot(qunit)
    sigma = gmap.scales()[rows]
    L = Rmat * sigma[:, None, :]
    cov3d = L @ L.transpose(0, 2, 1)

    J = np.zeros((len(rows), 2, 3))
    J[:, 0, 0] = K.fx / Z
    J[:, 0, 2] = -K.fx * X / Z**2
    J[:, 1, 1] = K.fy / Z
    J[:, 1, 2] = -K.fy * Y / Z**2
    M = J @ Rcw
    cov2d = M @ cov3d @ M.transpose(0, 2, 1)
    cov2d[:, 0, 0] += DILATION_PX2
    cov2d[:, 1, 1] += DILATION_PX2

    rx = np.sqrt(2.0 * _kernels.POWER_MAX * cov2d[:, 0, 0]) + 1.0
    ry = np.sqrt(2.0 * _kernels.POWER_MAX * cov2d[:, 1, 1]) + 1.0
    on_image = ((centers[:, 0] + rx >= 0) & (centers[:, 0] - rx <= K.width - 1)
                & (centers[:, 1] + ry >= 0) & (centers[:, 1] - ry <= K.height - 1)
                & np.isfinite(centers).all(axis=1))

    rel = gmap.means[rows] - cam.t
    dist = np.linalg.norm(rel, axis=1)
    viewdir = rel / dist[:, None]
    sh = gmap.sh[rows]
    color_pre = (SH_C0 * sh[:, 0]
                 - SH_C1 * viewdir[:, 1:2] * sh[:, 1]
                 + SH_C1 * viewdir[:, 2:3] * sh[:, 2]
                 - SH_C1 * viewdir[:, 0:1] * sh[:, 3])
    colors = np.clip(color_pre, 0.0, 1.0)
    opacities = expit(gmap.opacity_logits[rows])

    keep = np.flatnonzero(on_image)
    det = (cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2)
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                       cov2d[:, 0, 0] / det], axis=1)
    # composite order: depth ascending, insertion id breaks ties
    order = keep[np.lexsort((rows[keep], Z[keep]))]

    return _Projection(rows, order, centers, conics, Z.copy(), opacities,
                       colors, cov2d, p_cam, J, M, cov3d, Rmat, sigma, qunit,
                       qnorm, viewdir, 1.0 / dist, color_pre, Rcw, rx, ry)


def _bin_tiles(proj: _Projection, K: CameraIntrinsics):
    ntx = -(-K.width // TILE_SIZE)
    nty = -(-K.height // TILE_SIZE)
    o = proj.order
    if len(o) == 0:
        return ntx, nty, np.zeros(ntx * nty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cx, cy = proj.centers[o, 0], proj.centers[o, 1]
    rx, ry = proj.rx[o], proj.ry[o]
    tx0 = np.clip(np.floor((cx - rx) / TILE_SIZE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((cx + rx) / TILE_SIZE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((cy - ry) / TILE_SIZE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((cy + ry) / TILE_SIZE), 0, nty - 1).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    cnt = nx * ny
    total = int(cnt.sum())
    rep = np.repeat(np.arange(len(o)), cnt)
    start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    local = np.arange(total) - np.repeat(start, cnt)
    nx_r = np.repeat(nx, cnt)
    tiles = ((np.repeat(ty0, cnt) + local // nx_r) * ntx
             + np.repeat(tx0, cnt) + local % nx_r)
    o2 = np.lexsort((rep, tiles))
    tile_ids = o[rep[o2]]
    counts = np.bincount(tiles, minlength=ntx * nty)
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return ntx, nty, offsets, tile_ids


def _background(bg):
    if bg is None:
        return np.zeros(3)
    return np.asarray(bg, dtype=float).reshape(3)


def render(gmap: GaussianMap, cam: Pose, K: CameraIntrinsics, bg=None,
           tiled: bool = True) -> RenderResult:
    """Rasterize the map from a camera-in-world pose."""
    bg = _background(bg)
    out_img = np.empty((K.height, K.width, 3))
    out_t = np.empty((K.height, K.width))
    if len(gmap) == 0:
        out_img[:] = bg
        out_t[:] = 1.0
        return RenderResult(out_img, out_t)
    proj = _project(gmap, cam, K)
    if tiled:
        ntx, nty, offsets, tile_ids = _bin_tiles(proj, K)
        _kernels.forward_tiled(K.width, K.height, TILE_SIZE, ntx, nty, offsets,
                               tile_ids, proj.centers, proj.conics,
                               proj.opacities, proj.colors, bg, out_img, out_t)
    else:
        _kernels.forward_naive(K.width, K.height, proj.order, proj.centers,
                               proj.conics, proj.opacities, proj.colors, bg,
                               out_img, out_t)
    return RenderResult(out_img, out_t)


def backprop_image_gradient(gmap: GaussianMap, cam: Pose, K: CameraIntrinsics,
                            grad_image: np.ndarray, bg=None) -> GaussianGrads:
    """Pull a dLoss/dImage field back to every splat parameter."""
    n = len(gmap)
    grads = GaussianGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                          np.zeros(n), np.zeros((n, 4, 3)))
    if n == 0:
        return grads
    bg = _background(bg)
    proj = _project(gmap, cam, K)
    V = len(proj.rows)
    if V == 0:
        return grads
    g_center = np.zeros((V, 2))
    g_conic = np.zeros((V, 3))
    g_opacity = np.zeros(V)
    g_color = np.zeros((V, 3))
    ntx, nty, offsets, tile_ids = _bin_tiles(proj, K)
    _kernels.backward_tiled(K.width, K.height, TILE_SIZE, ntx, nty, offsets,
                            tile_ids, proj.centers, proj.conics,
                            proj.opacities, proj.colors, bg,
                            np.ascontiguousarray(grad_image), g_center,
                            g_conic, g_opacity, g_color)

    # conic -> 2D covariance (gradient of a matrix inverse)
    G_lam = np.empty((V, 2, 2))
    G_lam[:, 0, 0] = g_conic[:, 0]
    G_lam[:, 0, 1] = G_lam[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_lam[:, 1, 1] = g_conic[:, 2]
    Lam = np.empty((V, 2, 2))
    Lam[:, 0, 0] = proj.conics[:, 0]
    Lam[:, 0, 1] = Lam[:, 1, 0] = proj.conics[:, 1]
    Lam[:, 1, 1] = proj.conics[:, 2]
    dSig2 = -np.einsum('nij,njk,nkl->nil', Lam, G_lam, Lam)

    # cov2d = M cov3d M^T (dilation is additive)
    sym2 = dSig2 + dSig2.transpose(0, 2, 1)
    dM = np.einsum('nij,njk,nkl->nil', sym2, proj.M, proj.cov3d)
    dCov3 = np.einsum('nja,njk,nkb->nab', proj.M, dSig2, proj.M)

    # M = J Rcw; J depends on the camera-frame point
    dJ = np.einsum('nij,kj->nik', dM, proj.Rcw)
    X, Y, Z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    iz2, iz3 = 1.0 / Z**2, 1.0 / Z**3
    fx, fy = K.fx, K.fy
    dpc = np.zeros((V, 3))
    dpc[:, 0] = dJ[:, 0, 2] * (-fx * iz2)
    dpc[:, 1] = dJ[:, 1, 2] * (-fy * iz2)
    dpc[:, 2] = (dJ[:, 0, 0] * (-fx * iz2) + dJ[:, 1, 1] * (-fy * iz2)
                 + dJ[:, 0, 2] * (2 * fx * X * iz3)
                 + dJ[:, 1, 2] * (2 * fy * Y * iz3))
    # screen center shares the projection Jacobian
    dpc += np.einsum('nij,ni->nj', proj.J, g_center)
    dmean = dpc @ proj.Rcw

    # cov3d = L L^T with L = R diag(sigma)
    L = proj.Rmat * proj.sigma[:, None, :]
    GL = np.einsum('nij,njk->nik', dCov3 + dCov3.transpose(0, 2, 1), L)
    dsigma = np.einsum('nij,nij->nj', proj.Rmat, GL)
    dRmat = GL * proj.sigma[:, None, :]

    # appearance: clamped channels stop the chain
    open_mask = (proj.color_pre > 0.0) & (proj.color_pre < 1.0)
    gcol = g_color * open_mask
    sh = gmap.sh[proj.rows]
    dsh = np.zeros((V, 4, 3))
    dsh[:, 0] = SH_C0 * gcol
    dsh[:, 1] = -SH_C1 * proj.viewdir[:, 1:2] * gcol
    dsh[:, 2] = SH_C1 * proj.viewdir[:, 2:3] * gcol
    dsh[:, 3] = -SH_C1 * proj.viewdir[:, 0:1] * gcol
    dv = np.zeros((V, 3))
    dv[:, 0] = -SH_C1 * (gcol * sh[:, 3]).sum(axis=1)
    dv[:, 1] = -SH_C1 * (gcol * sh[:, 1]).sum(axis=1)
    dv[:, 2] = SH_C1 * (gcol * sh[:, 2]).sum(axis=1)
    # viewdir = r/|r| also moves with the mean
    vdotg = (proj.viewdir * dv).sum(axis=1, keepdims=True)
    dmean += (dv - proj.viewdir * vdotg) * proj.inv_dist[:, None]

    # quaternion normalization then rotation
    dq_unit = _quat_rot_backward(proj.qunit, dRmat)
    qdot = (proj.qunit * dq_unit).sum(axis=1, keepdims=True)
    dq = (dq_unit - proj.qunit * qdot) / proj.qnorm[:, None]

    dlogit = g_opacity * proj.opacities * (1.0 - proj.opacities)

    raw = gmap.raw_scales[proj.rows]
    if gmap.scale_mode == "bounded":
        u = expit(raw)
        draw = dsigma * (gmap.bounds.sigma_max - gmap.bounds.sigma_min) * u * (1 - u)
    else:
        draw = dsigma * proj.sigma

    grads.means[proj.rows] = dmean
    grads.quats[proj.rows] = dq
    grads.raw_scales[proj.rows] = draw
    grads.opacity_logits[proj.rows] = dlogit
    grads.sh[proj.rows] = dsh
    return grads


def render_loss_and_grads(gmap: GaussianMap, cam: Pose, K: CameraIntrinsics,
                          observed: np.ndarray, lambda_ssim: float = 0.2,
                          bg=None):
    """Render, evaluate the photometric loss, and return parameter grads."""
    from .losses import render_loss_and_image_grad

    result = render(gmap, cam, K, bg=bg)
    loss, grad_img = render_loss_and_image_grad(result.image, observed,
                                                lambda_ssim)
    grads = backprop_image_gradient(gmap, cam, K, grad_img, bg=bg)
    return loss, result, grads


def splat_center_transmittance(gmap: GaussianMap, cam: Pose,
                               K: CameraIntrinsics) -> np.ndarray:
    """Per-splat transmittance left in front of it at its own center pixel.

    Splats behind the camera or with no footprint on the image get 0.0, so
    `result > threshold` is a combined frustum-and-occlusion visibility test.
    """
    out = np.zeros(len(gmap))
    if len(gmap) == 0:
        return out
    proj = _project(gmap, cam, K)
    q = proj.order
    if len(q) == 0:
        return out
    ntx, nty, offsets, tile_ids = _bin_tiles(proj, K)
    # query at the center, clamped onto the image; the clamped pixel's tile
    # still lies inside the splat's own tile span, so the splat is in the list
    qx = np.clip(proj.centers[q, 0], 0.0, K.width - 1.0)
    qy = np.clip(proj.centers[q, 1], 0.0, K.height - 1.0)
    qtile = ((qy // TILE_SIZE).astype(np.int64) * ntx
             + (qx // TILE_SIZE).astype(np.int64))
    t_vals = np.empty(len(q))
    _kernels.transmittance_to_splats(q, qx, qy, qtile, offsets, tile_ids,
                                     proj.centers, proj.conics,
                                     proj.opacities, t_vals)
    out[proj.rows[q]] = t_vals
    return out


def project_gaussian(g: Gaussian, cam: Pose, K: CameraIntrinsics,
                     b: ScaleBounds,
                     scale_mode: str = "bounded") -> Optional[ProjectedSplat]:
    """Project one splat; returns None when it is behind the camera."""
    gmap = GaussianMap(bounds=b, scale_mode=scale_mode)
    gmap.add([g])
    cam_inv = cam.inverse()
    p_cam = cam_inv.apply(g.mean)
    if p_cam[2] <= Z_NEAR:
        return None
    proj = _project(gmap, cam, K)
    return ProjectedSplat(center=proj.centers[0].copy(),
                          cov2d=proj.cov2d[0].copy(),
                          depth=float(proj.depths[0]),
                          opacity=float(proj.opacities[0]),
                          color=proj.colors[0].copy())
