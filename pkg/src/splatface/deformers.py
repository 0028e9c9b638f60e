"""Emotional and stylized deformation predictors and delta application.

Deltas live in raw (pre-activation) parameter space: log-scales and opacity
logits add, quaternions are re-normalized after the add, so any delta keeps
the splat-set invariants valid.  Predictor final layers start at zero so
training begins from the undeformed canonical face.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import EMOTION_DIM, POSITION_CODE_DIM, STYLE_CODE_DIM
from .nn import MlpSpec, init_mlp, mlp_apply
from .splats import SplatTensors, sh_coeff_count
from .tensor import Tensor, concat, rownorm


@dataclass
class DeformationDelta:
    mu: Tensor        # (N, 3)
    s: Tensor         # (N, 3) log-space
    q: Tensor         # (N, 4) raw
    sh: Tensor        # (N, 3*(k+1)^2)
    alpha: Tensor     # (N,) logit-space
    k: int = 1

    def flat(self) -> Tensor:
        """All fields concatenated per splat (used by the smoothness loss)."""
        return concat([self.mu, self.s, self.q, self.sh,
                       self.alpha.reshape(-1, 1)], axis=1)

    @staticmethod
    def zeros(n, k=1, dtype=np.float32):
        m = 3 * sh_coeff_count(k)
        return DeformationDelta(
            Tensor(np.zeros((n, 3), dtype)), Tensor(np.zeros((n, 3), dtype)),
            Tensor(np.zeros((n, 4), dtype)), Tensor(np.zeros((n, m), dtype)),
            Tensor(np.zeros(n, dtype)), k)


def delta_output_width(k: int) -> int:
    return 11 + 3 * sh_coeff_count(k)


def _split_delta(out: Tensor, k: int) -> DeformationDelta:
    m = 3 * sh_coeff_count(k)
    return DeformationDelta(
        mu=out[:, 0:3], s=out[:, 3:6], q=out[:, 6:10],
        sh=out[:, 10:10 + m], alpha=out[:, 10 + m], k=k)


class EmotionDeformer:
    """P_emo: [z_B, e, p] -> per-splat delta."""

    def __init__(self, d_model=32, k=1, hidden=(128, 128), rng=None, dtype=np.float32):
        self.k = k
        width = d_model + EMOTION_DIM + POSITION_CODE_DIM
        self.spec = MlpSpec((width,) + tuple(hidden) + (delta_output_width(k),))
        self.params = init_mlp(self.spec, rng or np.random.default_rng(0),
                               dtype=dtype, zero_last=True, name="p_emo")

    def __call__(self, z: Tensor, e: np.ndarray, p: Tensor) -> DeformationDelta:
        n = z.shape[0]
        dtype = self.params[0].dtype
        e_rows = Tensor(np.tile(np.asarray(e, dtype=dtype), (n, 1)))
        x = concat([z, e_rows, p], axis=1)
        return _split_delta(mlp_apply(self.spec, self.params, x), self.k)


class StyleDeformer:
    """P_sty: [z_B, e, p, s] -> per-splat delta."""

    def __init__(self, d_model=32, k=1, hidden=(128, 128), rng=None, dtype=np.float32):
        self.k = k
        width = d_model + EMOTION_DIM + POSITION_CODE_DIM + STYLE_CODE_DIM
        self.spec = MlpSpec((width,) + tuple(hidden) + (delta_output_width(k),))
        self.params = init_mlp(self.spec, rng or np.random.default_rng(0),
                               dtype=dtype, zero_last=True, name="p_sty")

    def __call__(self, z: Tensor, e: np.ndarray, p: Tensor,
                 style_code: Tensor) -> DeformationDelta:
        n = z.shape[0]
        dtype = self.params[0].dtype
        e_rows = Tensor(np.tile(np.asarray(e, dtype=dtype), (n, 1)))
        s_rows = style_code.reshape(1, -1) * Tensor(np.ones((n, 1), dtype=dtype))
        x = concat([z, e_rows, p, s_rows], axis=1)
        return _split_delta(mlp_apply(self.spec, self.params, x), self.k)


def apply_deformation(canonical: SplatTensors, delta: DeformationDelta) -> SplatTensors:
    """Raw-space add with quaternion renormalization."""
    if canonical.mu.shape[0] != delta.mu.shape[0]:
        raise ValueError("splat count mismatch between canonical set and delta")
    q_sum = canonical.q + delta.q
    if np.any(np.linalg.norm(q_sum.data, axis=1) < 1e-6):
        raise ValueError("deformation drives a quaternion to near-zero norm")
    return SplatTensors(
        mu=canonical.mu + delta.mu,
        s=canonical.s + delta.s,
        q=rownorm(q_sum),
        sh=canonical.sh + delta.sh,
        alpha_raw=canonical.alpha_raw + delta.alpha,
        k=canonical.k,
    )
