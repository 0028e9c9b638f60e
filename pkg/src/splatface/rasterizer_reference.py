"""Brute-force reference compositor: every splat evaluated at every pixel.

Kept deliberately independent of the tiled rasterizer: per-splat scalar
projection, explicit 2x2 inverse, sequential front-to-back loop.  Used as the
equivalence oracle in tests; far too slow for training.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraModel
from .rasterizer import COV2D_REG, DENSITY_CUTOFF, TRANSMITTANCE_FLOOR, RenderOutput
from .splats import GaussianSplatSet, build_covariance, eval_sh


def rasterize_reference(splats: GaussianSplatSet, cam: CameraModel,
                        background=(0.0, 0.0, 0.0)) -> RenderOutput:
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    n = splats.count

    entries = []
    if n:
        scales = splats.scales()
        opac = splats.opacities()
        qn = splats.unit_quaternions()
        campos = cam.center
        for i in range(n):
            sigma = build_covariance(scales[i], qn[i])
            proj = _project_one(splats.mu[i].astype(np.float64), sigma, cam)
            if proj is None:
                continue
            mean2d, cov2, depth = proj
            view = splats.mu[i].astype(np.float64) - campos
            view = view / max(np.linalg.norm(view), 1e-12)
            color = eval_sh(splats.sh[i].astype(np.float64), view, splats.k)
            entries.append((depth, i, mean2d, cov2, float(opac[i]), color))
    # ascending depth, ties by splat index
    entries.sort(key=lambda e: (e[0], e[1]))

    image = np.tile(bg, (H, W, 1))
    transmittance = np.ones((H, W), dtype=np.float64)
    contributors = np.zeros((H, W), dtype=np.int32)
    image[:] = 0.0
    for depth, i, mean2d, cov2, op, color in entries:
        a, b, c = cov2[0, 0], cov2[0, 1], cov2[1, 1]
        det = a * c - b * b
        ys, xs = np.mgrid[0:H, 0:W]
        dx = xs - mean2d[0]
        dy = ys - mean2d[1]
        qf = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        g = np.exp(-0.5 * qf)
        alpha = np.where(g >= DENSITY_CUTOFF, op * g, 0.0)
        alpha = np.where(transmittance >= TRANSMITTANCE_FLOOR, alpha, 0.0)
        image += (alpha * transmittance)[:, :, None] * color[None, None, :]
        contributors += (alpha > 0).astype(np.int32)
        transmittance *= 1.0 - alpha
    image += transmittance[:, :, None] * bg[None, None, :]
    return RenderOutput(image, contributors)


def _project_one(mu, sigma, cam: CameraModel):
    t = cam.rotation @ mu + cam.translation
    if t[2] < cam.near:
        return None
    x, y, z = t
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    cov2 = J @ cam.rotation @ sigma @ cam.rotation.T @ J.T + COV2D_REG * np.eye(2)
    return mean2d, cov2, float(z)
