"""Tile-based forward/backward rasterizer for 3D Gaussian splats.

Splats are projected with the EWA approximation (perspective Jacobian at the
view-space center, +0.3*I low-pass on the 2D covariance), depth-sorted
globally (ties broken by splat index) and alpha-composited front to back.
Per pixel, contributions with a Gaussian density below 1/255 are skipped and
accumulation stops once transmittance drops under 1e-4.

The backward pass is fully analytic and is validated against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .splats import (
    GaussianSplatSet,
    eval_sh,
    quat_rotation_partials,
    quat_to_rotation,
    sh_basis,
    sh_basis_grad,
    sh_coeff_count,
)
from .tensor import Tensor

TILE = 16
DENSITY_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_FLOOR = 1e-4
COV2D_REG = 0.3
CULL_SIGMA = float(np.sqrt(-2.0 * np.log(DENSITY_CUTOFF)))


@dataclass
class RenderOutput:
    color: np.ndarray                 # (H, W, 3)
    contributors: np.ndarray          # (H, W) int32
    overlay: np.ndarray | None = None  # (H, W) optional scalar channel


class StaleForwardState(RuntimeError):
    pass


@dataclass
class _ForwardState:
    cam: CameraModel
    k: int
    background: np.ndarray
    order: np.ndarray           # visible splat indices in composite order
    # per-ordered-splat projected quantities
    mean2d: np.ndarray
    conic: np.ndarray           # (K, 2, 2)
    color: np.ndarray           # (K, 3)
    opac: np.ndarray            # (K,)
    tiles: list = field(default_factory=list)  # (y0, y1, x0, x1, cand) per tile
    # raw inputs and intermediates needed for the parameter chain
    raw: dict = field(default_factory=dict)
    consumed: bool = False


def project_gaussian(mu, sigma, cam: CameraModel):
    """Project one 3D Gaussian.  Returns (mean2d, cov2d, depth) or None if culled."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    t = cam.rotation @ mu + cam.translation
    if t[2] < cam.near:
        return None
    x, y, z = t
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    m = cam.rotation @ sigma @ cam.rotation.T
    cov2 = J @ m @ J.T + COV2D_REG * np.eye(2)
    return mean2d, cov2, z


def eval_gaussian_2d(x, mean2d, cov2):
    """exp(-0.5 d^T cov2^{-1} d) for pixel position x."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    a, b, c = cov2[0, 0], cov2[0, 1], cov2[1, 1]
    det = a * c - b * b
    qf = (c * d[0] ** 2 - 2 * b * d[0] * d[1] + a * d[1] ** 2) / det
    return float(np.exp(-0.5 * qf))


def _project_all(mu, s, q, sh, alpha_raw, k, cam):
    """Vectorized projection + activation of all splats.  Returns intermediates."""
    dtype = mu.dtype
    Vr = cam.rotation.astype(dtype)
    Vt = cam.translation.astype(dtype)
    t = mu @ Vr.T + Vt
    vis = t[:, 2] >= cam.near

    scales = np.exp(s)
    opac = 1.0 / (1.0 + np.exp(-alpha_raw))
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(qnorm < 1e-6):
        raise ValueError("degenerate quaternion (norm < 1e-6)")
    qn = q / qnorm
    R = quat_to_rotation(qn)
    M3 = R * scales[:, None, :]
    sigma = M3 @ np.swapaxes(M3, 1, 2)

    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    zs = np.where(vis, z, 1.0)  # avoid div-by-zero for culled splats
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    J = np.zeros((mu.shape[0], 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2
    m = np.einsum("ab,nbc,dc->nad", Vr, sigma, Vr)
    cov2 = np.einsum("nab,nbc,ndc->nad", J, m, J) + COV2D_REG * np.eye(2, dtype=dtype)

    campos = cam.center.astype(dtype)
    v = mu - campos
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    vn = np.maximum(vn, 1e-12)
    dirs = v / vn
    basis = sh_basis(dirs, k)
    coeffs = sh.reshape(sh.shape[0], sh_coeff_count(k), 3)
    cpre = 0.5 + np.einsum("nm,nmc->nc", basis, coeffs)
    color = np.maximum(cpre, 0.0)

    return dict(t=t, vis=vis, scales=scales, opac=opac, qn=qn, qnorm=qnorm, R=R,
                M3=M3, m=m, J=J, mean2d=mean2d, cov2=cov2, campos=campos, v=v,
                vn=vn, dirs=dirs, basis=basis, coeffs=coeffs, cpre=cpre,
                color=color, depth=z)


def _conic_and_radius(cov2):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    # cull exactly at the density cutoff: g >= 1/255 iff qf <= 2 ln 255 (~3.33 sigma)
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    return conic, radius


def _tile_weights(px, py, mean2d, conic, opac):
    """Per-(pixel, splat) gaussian density and effective alpha for one tile."""
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    qf = (conic[None, :, 0, 0] * dx * dx
          + 2.0 * conic[None, :, 0, 1] * dx * dy
          + conic[None, :, 1, 1] * dy * dy)
    gdens = np.exp(-0.5 * qf)
    alpha = np.where(gdens >= DENSITY_CUTOFF, opac[None, :] * gdens, 0.0)
    # prefix of splats still meeting the transmittance floor
    t_before = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1), alpha.dtype), t_before[:, :-1]], axis=1)
    live = t_before >= TRANSMITTANCE_FLOOR
    alpha_eff = alpha * live
    one_minus = 1.0 - alpha_eff
    t_all = np.cumprod(one_minus, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1), alpha.dtype), t_all[:, :-1]], axis=1)
    return dx, dy, gdens, alpha_eff, t_before, t_all[:, -1]


def rasterize_arrays(mu, s, q, sh, alpha_raw, k, cam: CameraModel, background,
                     overlay_values=None, want_state=False):
    """Numpy forward pass.  Returns (RenderOutput, state | None)."""
    dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=dtype)
    image = np.empty((H, W, 3), dtype=dtype)
    image[:] = bg
    contributors = np.zeros((H, W), dtype=np.int32)
    overlay = np.zeros((H, W), dtype=dtype) if overlay_values is not None else None

    n = mu.shape[0]
    if n == 0:
        out = RenderOutput(image, contributors, overlay)
        return (out, _ForwardState(cam, k, bg, np.empty(0, np.int64),
                                   np.empty((0, 2)), np.empty((0, 2, 2)),
                                   np.empty((0, 3)), np.empty(0),
                                   raw=dict(n=0))) if want_state else (out, None)

    pr = _project_all(mu, s, q, sh, alpha_raw, k, cam)
    vis_idx = np.nonzero(pr["vis"])[0]
    depth = pr["depth"][vis_idx]
    order = vis_idx[np.lexsort((vis_idx, depth))]

    mean2d = pr["mean2d"][order]
    conic, radius = _conic_and_radius(pr["cov2"][order])
    color = pr["color"][order]
    opac = pr["opac"][order]
    ov = overlay_values[order].astype(dtype) if overlay_values is not None else None

    x0 = mean2d[:, 0] - radius
    x1 = mean2d[:, 0] + radius
    y0 = mean2d[:, 1] - radius
    y1 = mean2d[:, 1] + radius

    tiles = []
    for ty0 in range(0, H, TILE):
        ty1 = min(ty0 + TILE, H)
        row_hit = (y1 >= ty0) & (y0 <= ty1 - 1)
        if not row_hit.any():
            continue
        for tx0 in range(0, W, TILE):
            tx1 = min(tx0 + TILE, W)
            hit = row_hit & (x1 >= tx0) & (x0 <= tx1 - 1)
            cand = np.nonzero(hit)[0]
            if cand.size == 0:
                continue
            ys, xs = np.mgrid[ty0:ty1, tx0:tx1]
            px = xs.reshape(-1).astype(dtype)
            py = ys.reshape(-1).astype(dtype)
            _, _, _, alpha_eff, t_before, t_final = _tile_weights(
                px, py, mean2d[cand], conic[cand], opac[cand])
            w = alpha_eff * t_before
            tile_color = w @ color[cand] + t_final[:, None] * bg[None, :]
            image[ty0:ty1, tx0:tx1] = tile_color.reshape(ty1 - ty0, tx1 - tx0, 3)
            contributors[ty0:ty1, tx0:tx1] = (alpha_eff > 0).sum(axis=1).reshape(
                ty1 - ty0, tx1 - tx0)
            if ov is not None:
                overlay[ty0:ty1, tx0:tx1] = (w @ ov[cand]).reshape(ty1 - ty0, tx1 - tx0)
            tiles.append((ty0, ty1, tx0, tx1, cand))

    out = RenderOutput(image, contributors, overlay)
    if not want_state:
        return out, None
    raw = dict(pr)
    raw["n"] = n
    raw["mu"] = mu
    raw["sh_shape"] = sh.shape
    state = _ForwardState(cam, k, bg, order, mean2d, conic, color, opac,
                          tiles=tiles, raw=raw)
    return out, state


def rasterize_backward_arrays(state: _ForwardState, dimage):
    """Analytic gradients for {mu, s, q, sh, alpha_raw} given dL/dimage."""
    if state.consumed:
        raise StaleForwardState("forward state already consumed by a backward call")
    state.consumed = True
    cam, k = state.cam, state.k
    n = state.raw["n"]
    dtype = dimage.dtype
    grads = dict(
        mu=np.zeros((n, 3), dtype), s=np.zeros((n, 3), dtype),
        q=np.zeros((n, 4), dtype),
        sh=np.zeros((n, 3 * sh_coeff_count(k)), dtype) if n else np.zeros((0, 0), dtype),
        alpha_raw=np.zeros(n, dtype),
    )
    if n == 0 or state.order.size == 0:
        return grads

    K = state.order.size
    d_color = np.zeros((K, 3), dtype)
    d_opac = np.zeros(K, dtype)
    d_mean2d = np.zeros((K, 2), dtype)
    d_conic = np.zeros((K, 2, 2), dtype)
    bg = state.background

    for (ty0, ty1, tx0, tx1, cand) in state.tiles:
        g = dimage[ty0:ty1, tx0:tx1].reshape(-1, 3)
        if not np.any(g):
            continue
        ys, xs = np.mgrid[ty0:ty1, tx0:tx1]
        px = xs.reshape(-1).astype(dtype)
        py = ys.reshape(-1).astype(dtype)
        mean2d = state.mean2d[cand]
        conic = state.conic[cand]
        opac = state.opac[cand]
        color = state.color[cand]
        dx, dy, gdens, alpha_eff, t_before, t_final = _tile_weights(
            px, py, mean2d, conic, opac)

        w = alpha_eff * t_before                      # (P, K)
        d_color[cand] += np.einsum("pk,pc->kc", w, g)

        # suffix sums S(p,i) = sum_{j>i} c_j a_j T_j + bg * T_final, per channel
        contrib = w[:, :, None] * color[None, :, :]   # (P, K, 3)
        cum = np.cumsum(contrib, axis=1)
        total = cum[:, -1:, :] + bg[None, None, :] * t_final[:, None, None]
        S = total - cum                               # (P, K, 3)
        live = alpha_eff > 0
        dalpha = np.einsum("pc,pkc->pk", g, color[None, :, :] * t_before[:, :, None]
                           - S / (1.0 - alpha_eff)[:, :, None])
        dalpha *= live

        d_opac[cand] += (gdens * dalpha * live).sum(axis=0)
        dG = opac[None, :] * dalpha * live
        dqf = -0.5 * gdens * dG
        A = conic[None, :, 0, 0]
        B = conic[None, :, 0, 1]
        C = conic[None, :, 1, 1]
        ddx = dqf * (2 * A * dx + 2 * B * dy)
        ddy = dqf * (2 * B * dx + 2 * C * dy)
        d_mean2d[cand, 0] += -ddx.sum(axis=0)
        d_mean2d[cand, 1] += -ddy.sum(axis=0)
        d_conic[cand, 0, 0] += (dqf * dx * dx).sum(axis=0)
        d_conic[cand, 0, 1] += (dqf * dx * dy).sum(axis=0)
        d_conic[cand, 1, 0] += (dqf * dy * dx).sum(axis=0)
        d_conic[cand, 1, 1] += (dqf * dy * dy).sum(axis=0)

    # --- per-splat chain back to raw parameters (vectorized over visible set)
    order = state.order
    pr = state.raw
    sel = order  # indices into the full arrays

    # conic = inv(cov2)
    conic = state.conic
    d_cov2 = -np.einsum("nba,nbc,ncd->nad", conic, d_conic, conic)

    J = pr["J"][sel]
    m = pr["m"][sel]
    d_m = np.einsum("nba,nbc,ncd->nad", J, d_cov2, J)
    d_J = np.einsum("nab,nbc,ncd->nad", d_cov2 + np.swapaxes(d_cov2, 1, 2), J, m)
    Vr = cam.rotation.astype(dtype)
    d_sigma = np.einsum("ba,nbc,cd->nad", Vr, d_m, Vr)

    # view-space position gradient from mean2d and J
    t = pr["t"][sel]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    d_t = np.zeros((sel.size, 3), dtype)
    d_t[:, 0] += d_mean2d[:, 0] * fx / z
    d_t[:, 1] += d_mean2d[:, 1] * fy / z
    d_t[:, 2] += -d_mean2d[:, 0] * fx * x / z ** 2 - d_mean2d[:, 1] * fy * y / z ** 2
    d_t[:, 0] += d_J[:, 0, 2] * (-fx / z ** 2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy / z ** 2)
    d_t[:, 2] += (d_J[:, 0, 0] * (-fx / z ** 2) + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
                  + d_J[:, 1, 1] * (-fy / z ** 2) + d_J[:, 1, 2] * (2 * fy * y / z ** 3))
    d_mu = d_t @ Vr

    # covariance chain: sigma = M3 M3^T, M3 = R * scales
    M3 = pr["M3"][sel]
    d_M3 = np.einsum("nab,nbc->nac", d_sigma + np.swapaxes(d_sigma, 1, 2), M3)
    scales = pr["scales"][sel]
    R = pr["R"][sel]
    d_R = d_M3 * scales[:, None, :]
    d_scales = np.einsum("nik,nik->nk", d_M3, R)
    d_s = d_scales * scales

    qn = pr["qn"][sel]
    partials = quat_rotation_partials(qn)
    d_qn = np.einsum("nkij,nij->nk", partials, d_R)
    qnorm = pr["qnorm"][sel]
    d_q = (d_qn - qn * (qn * d_qn).sum(axis=1, keepdims=True)) / qnorm

    # color chain: c = max(0.5 + basis . coeffs, 0)
    mask = (pr["cpre"][sel] > 0).astype(dtype)
    d_cpre = d_color * mask
    basis = pr["basis"][sel]
    coeffs = pr["coeffs"][sel]
    d_coeffs = basis[:, :, None] * d_cpre[:, None, :]
    d_sh = d_coeffs.reshape(sel.size, -1)
    d_basis = np.einsum("nmc,nc->nm", coeffs, d_cpre)
    bgrad = sh_basis_grad(pr["dirs"][sel], k)
    d_dir = np.einsum("nm,nmd->nd", d_basis, bgrad)
    dirs = pr["dirs"][sel]
    vn = pr["vn"][sel]
    d_mu += (d_dir - dirs * (dirs * d_dir).sum(axis=1, keepdims=True)) / vn

    opac = state.opac
    d_alpha_raw = d_opac * opac * (1.0 - opac)

    grads["mu"][sel] += d_mu
    grads["s"][sel] += d_s
    grads["q"][sel] += d_q
    grads["sh"][sel] += d_sh
    grads["alpha_raw"][sel] += d_alpha_raw
    return grads


def rasterize(splats: GaussianSplatSet, cam: CameraModel, background=(0.0, 0.0, 0.0),
              overlay_values=None) -> RenderOutput:
    out, _ = rasterize_arrays(splats.mu, splats.s, splats.q, splats.sh,
                              splats.alpha_raw, splats.k, cam,
                              background, overlay_values=overlay_values)
    return out


def rasterize_diff(mu: Tensor, s: Tensor, q: Tensor, sh: Tensor, alpha_raw: Tensor,
                   k: int, cam: CameraModel, background=(0.0, 0.0, 0.0)) -> Tensor:
    """Differentiable rasterization: image Tensor with analytic backward."""
    out, state = rasterize_arrays(mu.data, s.data, q.data, sh.data, alpha_raw.data,
                                  k, cam, background, want_state=True)

    def back(g):
        grads = rasterize_backward_arrays(state, g)
        for t, key in ((mu, "mu"), (s, "s"), (q, "q"), (sh, "sh"), (alpha_raw, "alpha_raw")):
            if t.requires_grad:
                t._accumulate_grad(grads[key].astype(t.dtype))

    return Tensor._make(out.color, (mu, s, q, sh, alpha_raw), back)
