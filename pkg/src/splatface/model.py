"""Assembled talking-head model: canonical generator + attention + deformers.

Per-frame forward path:

    seed points -> triplane sample -> decoder -> canonical splats G_can, f_p
    f_p + (audio window, blink, viewpoint, emotion) -> attention stack -> z
    E_mu(G_can positions) -> p
    P_emo(z, e, p) -> emotional delta -> G_emo
    [E_s(style descriptor) -> s;  P_sty(z, e, p, s) -> style delta -> G_sty]
    rasterize(G)

Parameter groups and the per-stage trainable sets live here so the trainer,
checkpointing, CLI, and service all share one registry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .camera import CameraModel
from .deformers import EmotionDeformer, StyleDeformer, apply_deformation
from .esam import EsamParams, run_esam
from .features import (STYLE_DESCRIPTOR_DIM, PositionEncoder, StyleExtractor)
from .rasterizer import rasterize_diff
from .splats import SplatTensors
from .tensor import Tensor, concat, inv33, stack
from .triplane import CanonicalGenerator, init_canonical

STAGES = ("neutral", "emotion", "stylization")

# parameter groups trainable per stage; everything else is frozen
STAGE_TRAINABLE = {
    "neutral": ("generator", "esam", "pos_encoder", "p_emo"),
    "emotion": ("esam", "pos_encoder", "p_emo"),
    "stylization": ("style_extractor", "p_sty"),
}


@dataclass
class ModelConfig:
    sh_degree: int = 1
    d_model: int = 32
    n_blocks: int = 2
    ff_hidden: int = 64
    audio_radius: int = 2
    triplane_resolutions: tuple = (16, 32, 64)
    triplane_channels: int = 16
    decoder_hidden: tuple = (128, 128)
    deformer_hidden: tuple = (128, 128)
    pos_hidden: tuple = (64,)
    style_hidden: tuple = (64,)
    seed: int = 0

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d):
        cfg = ModelConfig(**d)
        for k in ("triplane_resolutions", "decoder_hidden", "deformer_hidden",
                  "pos_hidden", "style_hidden"):
            setattr(cfg, k, tuple(getattr(cfg, k)))
        return cfg


@dataclass
class ForwardResult:
    splats: SplatTensors          # final deformed set
    canonical: SplatTensors
    f_p: Tensor
    z: Tensor
    delta_emo: object             # DeformationDelta
    delta_sty: object | None
    style_code: Tensor | None
    attention: object | None
    # differentiable per-block (N, M) attention weights, for regularization
    aga_weights: list | None = None
    ega_weights: list | None = None


class FaceModel:
    def __init__(self, points: np.ndarray, cfg: ModelConfig, dtype=np.float32,
                 seed_splats=None, bbox=None):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 100]))
        if seed_splats is not None and bbox is not None:
            from .triplane import TriPlaneStack, make_triplane
            stack = make_triplane(bbox[0], bbox[1], cfg.triplane_resolutions,
                                  cfg.triplane_channels, rng=rng, dtype=dtype)
            seed = seed_splats
        else:
            seed, stack = init_canonical(points, k=cfg.sh_degree,
                                         resolutions=cfg.triplane_resolutions,
                                         channels=cfg.triplane_channels, rng=rng)
        self.generator = CanonicalGenerator(seed, stack,
                                            decoder_hidden=cfg.decoder_hidden,
                                            rng=rng, dtype=dtype)
        self.esam = EsamParams.create(stack.feature_width, d_model=cfg.d_model,
                                      n_blocks=cfg.n_blocks, ff_hidden=cfg.ff_hidden,
                                      rng=rng, dtype=dtype)
        self.pos_encoder = PositionEncoder(stack.bbox_lo, stack.bbox_hi,
                                           hidden=cfg.pos_hidden, rng=rng, dtype=dtype)
        self.p_emo = EmotionDeformer(d_model=cfg.d_model, k=cfg.sh_degree,
                                     hidden=cfg.deformer_hidden, rng=rng, dtype=dtype)
        self.style_extractor = StyleExtractor(hidden=cfg.style_hidden, rng=rng,
                                              dtype=dtype)
        self.p_sty = StyleDeformer(d_model=cfg.d_model, k=cfg.sh_degree,
                                   hidden=cfg.deformer_hidden, rng=rng, dtype=dtype)
        self._check_names()

    # -- parameter registry ------------------------------------------------------

    def groups(self) -> dict:
        return {
            "generator": self.generator.parameters(),
            "esam": self.esam.parameters(),
            "pos_encoder": self.pos_encoder.params,
            "p_emo": self.p_emo.params,
            "style_extractor": self.style_extractor.params,
            "p_sty": self.p_sty.params,
        }

    def parameters(self) -> list:
        return [p for ps in self.groups().values() for p in ps]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def trainable(self, stage: str) -> list:
        if stage not in STAGE_TRAINABLE:
            raise ValueError(f"unknown stage {stage!r} (expected one of {STAGES})")
        g = self.groups()
        return [p for name in STAGE_TRAINABLE[stage] for p in g[name]]

    def _check_names(self):
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise RuntimeError("parameter names must be unique and non-empty")

    @property
    def k(self):
        return self.cfg.sh_degree

    # -- forward -----------------------------------------------------------------

    def canonical_forward(self):
        """(canonical SplatTensors, f_p); recompute per step while the
        generator trains, cache via `frozen_canonical` once it is frozen."""
        return self.generator.forward()

    def frozen_canonical(self):
        """Constant snapshot of the canonical output (no generator gradients)."""
        can, f_p = self.generator.forward()
        const = SplatTensors(
            Tensor(can.mu.data.copy()), Tensor(can.s.data.copy()),
            Tensor(can.q.data.copy()), Tensor(can.sh.data.copy()),
            Tensor(can.alpha_raw.data.copy()), can.k)
        return const, Tensor(f_p.data.copy())

    def forward(self, window: np.ndarray, e: np.ndarray, y: float, v: np.ndarray,
                style_descriptor: np.ndarray | None = None,
                record_attention=False, canonical=None, z=None) -> ForwardResult:
        """Full per-frame deformation prediction (no rasterization).

        `canonical` = optional (SplatTensors, f_p) cache; `z` = optional cached
        attention output (frozen-attention stages only).
        """
        can, f_p = canonical if canonical is not None else self.canonical_forward()
        record = None
        aga_weights = None
        ega_weights = None
        if z is None:
            frame = SimpleNamespace(e=np.asarray(e), y=float(y), v=np.asarray(v))
            aga_weights, ega_weights = [], []
            z, record = run_esam(f_p, frame, window, self.esam,
                                 record_attention=record_attention,
                                 aga_sink=aga_weights, ega_sink=ega_weights)
        p = self.pos_encoder(can.mu)
        delta_emo = self.p_emo(z, e, p)
        splats = apply_deformation(can, delta_emo)

        delta_sty = None
        style_code = None
        if style_descriptor is not None:
            dtype = self.style_extractor.params[0].dtype
            style_code = self.style_extractor(
                Tensor(np.asarray(style_descriptor, dtype=dtype)))
            delta_sty = self.p_sty(z, e, p, style_code)
            splats = apply_deformation(splats, delta_sty)

        return ForwardResult(splats=splats, canonical=can, f_p=f_p, z=z,
                             delta_emo=delta_emo, delta_sty=delta_sty,
                             style_code=style_code, attention=record,
                             aga_weights=aga_weights, ega_weights=ega_weights)

    def render(self, result: ForwardResult, cam: CameraModel,
               background=(0.0, 0.0, 0.0)) -> Tensor:
        g = result.splats
        return rasterize_diff(g.mu, g.s, g.q, g.sh, g.alpha_raw, g.k, cam, background)


def project_landmarks(mu: Tensor, indices, cam: CameraModel) -> Tensor:
    """Differentiable perspective projection of selected splat centers, (L, 2)."""
    idx = np.asarray(indices, dtype=np.int64)
    sub = mu[idx, :]
    R = Tensor(cam.rotation.astype(mu.dtype))
    t = Tensor(cam.translation.astype(mu.dtype))
    view = sub @ R.T + t
    x = view[:, 0] / view[:, 2] * cam.fx + cam.cx
    y = view[:, 1] / view[:, 2] * cam.fy + cam.cy
    return stack([x, y], axis=1)


N_COLOR_SLOTS = 9  # leading descriptor entries holding the 3x3 color matrix


def color_slots(descriptor: Tensor) -> Tensor:
    """Descriptor restricted to its color-matrix slots, rest zeroed."""
    mask = np.zeros(STYLE_DESCRIPTOR_DIM, dtype=descriptor.dtype)
    mask[:N_COLOR_SLOTS] = 1.0
    return descriptor * Tensor(mask)


def recover_style_descriptor(reference: Tensor, stylized: Tensor,
                             eps=1e-3) -> Tensor:
    """Estimate the style descriptor's color matrix from an image pair.

    Least-squares fit of the 3x3 matrix M minimizing
    ||(stylized - 0.5) - (reference - 0.5) M^T||^2 over pixels, differentiable
    in both images.  Returns a 32-d descriptor with M in the leading 9 slots
    (row-major) and zeros elsewhere; only those slots are comparable with a
    ground-truth descriptor (see `color_slots`).
    """
    dtype = reference.dtype
    X = reference.reshape(-1, 3) - 0.5
    Y = stylized.reshape(-1, 3) - 0.5
    A = X.T @ X + Tensor(eps * np.eye(3, dtype=dtype))
    M = inv33(A) @ (X.T @ Y)          # (3, 3); stylized ~= X @ M
    desc9 = M.T.reshape(-1)           # row-major color matrix
    pad = Tensor(np.zeros(STYLE_DESCRIPTOR_DIM - N_COLOR_SLOTS, dtype=dtype))
    return concat([desc9, pad], axis=0)
