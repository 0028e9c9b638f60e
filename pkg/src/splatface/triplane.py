"""Multi-resolution triplane encoder and canonical splat decoder.

A 3D point is normalized into the bounding box, bilinearly sampled on the
three axis-aligned planes of every level (features summed per level), and the
per-level features are concatenated.  A decoder MLP maps the feature to
residuals over the seed splat parameters; its final layer starts at zero so
the first rendered frame reproduces the seed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MlpSpec, init_mlp, mlp_apply
from .splats import GaussianSplatSet, SplatTensors, sh_coeff_count
from .tensor import Tensor, rownorm

# plane -> (u axis, v axis) in world coordinates
PLANE_AXES = (("xy", 0, 1), ("yz", 1, 2), ("xz", 0, 2))


@dataclass
class TriPlaneStack:
    planes: list      # planes[level] = {"xy": Tensor(R,R,C), "yz": ..., "xz": ...}
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray

    def __post_init__(self):
        res = [p["xy"].shape[0] for p in self.planes]
        if sorted(res) != res or len(set(res)) != len(res):
            raise ValueError(f"level resolutions must be strictly increasing, got {res}")
        for lvl in self.planes:
            shapes = {name: lvl[name].shape for name, _, _ in PLANE_AXES}
            if len(set(shapes.values())) != 1:
                raise ValueError(f"planes in a level must share shape, got {shapes}")

    @property
    def levels(self):
        return len(self.planes)

    @property
    def channels(self):
        return self.planes[0]["xy"].shape[2]

    @property
    def feature_width(self):
        return self.levels * self.channels

    def parameters(self):
        return [self.planes[i][name] for i in range(self.levels)
                for name, _, _ in PLANE_AXES]


def make_triplane(bbox_lo, bbox_hi, resolutions=(16, 32, 64), channels=16,
                  rng=None, init_std=0.01, dtype=np.float32) -> TriPlaneStack:
    rng = rng or np.random.default_rng(0)
    planes = []
    for lvl, r in enumerate(resolutions):
        level = {}
        for name, _, _ in PLANE_AXES:
            level[name] = Tensor(
                (rng.normal(0.0, init_std, size=(r, r, channels))).astype(dtype),
                requires_grad=True, name=f"triplane.level{lvl}.{name}")
        planes.append(level)
    return TriPlaneStack(planes, np.asarray(bbox_lo, np.float64),
                         np.asarray(bbox_hi, np.float64))


def _bilinear_forward(plane: np.ndarray, u: np.ndarray, v: np.ndarray):
    r = plane.shape[0]
    i0 = np.minimum(np.floor(u).astype(np.int64), r - 2)
    j0 = np.minimum(np.floor(v).astype(np.int64), r - 2)
    i0 = np.maximum(i0, 0)
    j0 = np.maximum(j0, 0)
    fu = u - i0
    fv = v - j0
    p00 = plane[i0, j0]
    p10 = plane[i0 + 1, j0]
    p01 = plane[i0, j0 + 1]
    p11 = plane[i0 + 1, j0 + 1]
    w00 = ((1 - fu) * (1 - fv))[:, None]
    w10 = (fu * (1 - fv))[:, None]
    w01 = ((1 - fu) * fv)[:, None]
    w11 = (fu * fv)[:, None]
    feat = w00 * p00 + w10 * p10 + w01 * p01 + w11 * p11
    dfeat_du = ((fv - 1)[:, None] * p00 + (1 - fv)[:, None] * p10
                - fv[:, None] * p01 + fv[:, None] * p11)
    dfeat_dv = ((fu - 1)[:, None] * p00 - fu[:, None] * p10
                + (1 - fu)[:, None] * p01 + fu[:, None] * p11)
    return feat, (i0, j0, w00, w10, w01, w11, dfeat_du, dfeat_dv)


def sample_triplane(stack: TriPlaneStack, mu: Tensor) -> Tensor:
    """Differentiable triplane lookup: (N, 3) positions -> (N, L*C) features.

    Positions outside the bounding box are clamped to the box surface (their
    position gradient is zero along clamped axes).
    """
    dtype = mu.dtype
    lo = stack.bbox_lo.astype(dtype)
    ext = (stack.bbox_hi - stack.bbox_lo).astype(dtype)
    nrm_raw = (mu.data - lo) / ext
    clamped = (nrm_raw < 0.0) | (nrm_raw > 1.0)
    nrm = np.clip(nrm_raw, 0.0, 1.0)

    level_feats = []
    saved = []
    for lvl in stack.planes:
        r = lvl["xy"].shape[0]
        feat = None
        per_plane = []
        for name, ua, va in PLANE_AXES:
            u = nrm[:, ua] * (r - 1)
            v = nrm[:, va] * (r - 1)
            f, cache = _bilinear_forward(lvl[name].data, u, v)
            feat = f if feat is None else feat + f
            per_plane.append((name, ua, va, cache))
        level_feats.append(feat)
        saved.append((r, per_plane))
    out_data = np.concatenate(level_feats, axis=1)

    parents = [mu] + stack.parameters()
    channels = stack.channels

    def back(g):
        dmu = np.zeros_like(mu.data) if mu.requires_grad else None
        for li, (r, per_plane) in enumerate(saved):
            gl = g[:, li * channels:(li + 1) * channels]
            for name, ua, va, cache in per_plane:
                i0, j0, w00, w10, w01, w11, dfu, dfv = cache
                plane_t = stack.planes[li][name]
                if plane_t.requires_grad:
                    if plane_t.grad is None:
                        plane_t.grad = np.zeros_like(plane_t.data)
                    np.add.at(plane_t.grad, (i0, j0), w00 * gl)
                    np.add.at(plane_t.grad, (i0 + 1, j0), w10 * gl)
                    np.add.at(plane_t.grad, (i0, j0 + 1), w01 * gl)
                    np.add.at(plane_t.grad, (i0 + 1, j0 + 1), w11 * gl)
                if dmu is not None:
                    du = (gl * dfu).sum(axis=1) * (r - 1) / ext[ua]
                    dv = (gl * dfv).sum(axis=1) * (r - 1) / ext[va]
                    dmu[:, ua] += np.where(clamped[:, ua], 0.0, du)
                    dmu[:, va] += np.where(clamped[:, va], 0.0, dv)
        if dmu is not None:
            mu._accumulate_grad(dmu)

    return Tensor._make(out_data, parents, back)


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    """Exact O(N^2) nearest-neighbor distance per point."""
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    return np.sqrt(d2.min(axis=1))


def init_canonical(points: np.ndarray, k=1, resolutions=(16, 32, 64), channels=16,
                   rng=None, bbox_inflate=0.1):
    """Seed splats at the given points plus a freshly initialized triplane."""
    points = np.asarray(points, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError(f"need a non-empty (N, 3) point array, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite coordinates")
    n = points.shape[0]
    if n > 1:
        mean_nn = float(nearest_neighbor_distances(points.astype(np.float64)).mean())
    else:
        mean_nn = 0.1
    seed = GaussianSplatSet(
        mu=points.copy(),
        s=np.full((n, 3), np.log(mean_nn), dtype=np.float32),
        q=np.tile(np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32), (n, 1)),
        sh=np.zeros((n, 3 * sh_coeff_count(k)), dtype=np.float32),
        alpha_raw=np.zeros(n, dtype=np.float32),
        k=k,
    )
    lo = points.min(axis=0).astype(np.float64)
    hi = points.max(axis=0).astype(np.float64)
    span = np.maximum(hi - lo, 1e-6)
    lo = lo - bbox_inflate * span
    hi = hi + bbox_inflate * span
    stack = make_triplane(lo, hi, resolutions, channels, rng=rng)
    return seed, stack


class CanonicalGenerator:
    """Triplane + decoder producing canonical splat parameters as seed residuals."""

    def __init__(self, seed: GaussianSplatSet, stack: TriPlaneStack,
                 decoder_hidden=(128, 128), rng=None, dtype=np.float32):
        self.seed = seed
        self.stack = stack
        self.k = seed.k
        out = 11 + 3 * sh_coeff_count(seed.k)
        self.decoder_spec = MlpSpec((stack.feature_width,) + tuple(decoder_hidden) + (out,))
        rng = rng or np.random.default_rng(0)
        self.decoder_params = init_mlp(self.decoder_spec, rng, dtype=dtype,
                                       zero_last=True, name="decoder")

    def parameters(self):
        return self.stack.parameters() + self.decoder_params

    def forward(self):
        """Returns (canonical SplatTensors, per-splat feature f_p)."""
        dtype = self.decoder_params[0].dtype
        seed_mu = Tensor(self.seed.mu.astype(dtype))
        f_p = sample_triplane(self.stack, seed_mu)
        res = mlp_apply(self.decoder_spec, self.decoder_params, f_p)
        m = 3 * sh_coeff_count(self.k)
        mu = seed_mu + res[:, 0:3]
        s = Tensor(self.seed.s.astype(dtype)) + res[:, 3:6]
        q = rownorm(Tensor(self.seed.q.astype(dtype)) + res[:, 6:10])
        sh = Tensor(self.seed.sh.astype(dtype)) + res[:, 10:10 + m]
        alpha = Tensor(self.seed.alpha_raw.astype(dtype)) + res[:, 10 + m]
        return SplatTensors(mu, s, q, sh, alpha, self.k), f_p
