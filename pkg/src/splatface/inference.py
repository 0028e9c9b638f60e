"""Checkpoint-backed inference: the shared render path for the CLI and the
render service.

A session owns one restored model plus one feature manifest.  The canonical
splat set is computed once (the generator is frozen at inference); per-frame
attention outputs are cached keyed by everything they depend on (frame,
emotion vector, viewpoint), so camera orbits and emotion interpolation stay
correct.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraModel
from .checkpoint import Checkpoint, load_checkpoint, restore_model
from .features import interpolate_feature, load_feature_sequence
from .model import STAGES, FaceModel
from .rasterizer import rasterize_arrays
from .splats import SplatTensors
from .tensor import Tensor

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


class CapabilityError(RuntimeError):
    """Checkpoint stage does not support the requested operation."""


def stage_at_least(stage: str, required: str) -> bool:
    return STAGES.index(stage) >= STAGES.index(required)


def render_splats(splats: SplatTensors, cam: CameraModel, background,
                  overlay_values=None):
    """Non-differentiable render of a forward result (inference path)."""
    out, _ = rasterize_arrays(splats.mu.data, splats.s.data, splats.q.data,
                              splats.sh.data, splats.alpha_raw.data, splats.k,
                              cam, background, overlay_values=overlay_values)
    return out


class InferenceSession:
    def __init__(self, checkpoint_path: str, manifest_path: str):
        self.ckpt: Checkpoint = load_checkpoint(checkpoint_path)
        self.model: FaceModel = restore_model(self.ckpt)
        self.stage = self.ckpt.stage
        self.meta = self.ckpt.meta
        self.seq = load_feature_sequence(manifest_path)
        self.background = tuple(self.meta.get("background", DEFAULT_BACKGROUND))
        self.canonical = self.model.frozen_canonical()
        self._z_cache: dict = {}

    # -- metadata ---------------------------------------------------------------

    @property
    def emotions(self) -> list:
        return list(self.meta.get("emotion_vectors", {}))

    @property
    def styles(self) -> list:
        return list(self.meta.get("style_labels", []))

    @property
    def frame_count(self) -> int:
        return len(self.seq)

    def emotion_vector(self, label: str) -> np.ndarray:
        table = self.meta.get("emotion_vectors", {})
        if label not in table:
            raise KeyError(f"unknown emotion {label!r} (have {sorted(table)})")
        return np.asarray(table[label], dtype=np.float32)

    def style_descriptor(self, label: str) -> np.ndarray:
        labels = self.meta.get("style_labels", [])
        if label not in labels:
            raise KeyError(f"unknown style {label!r} (have {labels})")
        descs = self.meta["style_descriptors"]
        return np.asarray(descs[labels.index(label)], dtype=np.float32)

    def interpolated_emotion(self, a: str, b: str, alpha: float) -> np.ndarray:
        return interpolate_feature(self.emotion_vector(a),
                                   self.emotion_vector(b), alpha)

    def interpolated_style(self, a: str, b: str, alpha: float) -> np.ndarray:
        return interpolate_feature(self.style_descriptor(a),
                                   self.style_descriptor(b), alpha)

    def camera(self, t: int) -> CameraModel:
        return self.seq.records[t].cam

    def require_stage(self, required: str, what: str):
        if not stage_at_least(self.stage, required):
            raise CapabilityError(
                f"{what} needs a checkpoint trained through stage {required!r}; "
                f"this checkpoint is stage {self.stage!r}")

    # -- rendering --------------------------------------------------------------

    def invalidate_caches(self):
        self.canonical = self.model.frozen_canonical()
        self._z_cache.clear()

    def _frame(self, t: int):
        if not 0 <= t < len(self.seq):
            raise IndexError(f"frame {t} outside manifest of {len(self.seq)} frames")
        return self.seq.records[t]

    def forward(self, t: int, cam: CameraModel | None = None,
                e: np.ndarray | None = None,
                style_descriptor: np.ndarray | None = None,
                record_attention: bool = False):
        """ForwardResult for manifest frame t with optional overrides."""
        r = self._frame(t)
        cam = cam if cam is not None else r.cam
        e = np.asarray(e if e is not None else r.e, dtype=np.float32)
        v = cam.viewpoint_encoding()
        window = self.seq.audio_window(t, self.model.cfg.audio_radius)

        z = None
        key = (t, e.tobytes(), v.astype(np.float32).tobytes())
        if not record_attention:
            z = self._z_cache.get(key)
        res = self.model.forward(window, e, r.y, v,
                                 style_descriptor=style_descriptor,
                                 record_attention=record_attention,
                                 canonical=self.canonical, z=z)
        if z is None and not record_attention:
            self._z_cache[key] = Tensor(res.z.data.copy())
        return res

    def render_frame(self, t: int, cam: CameraModel | None = None,
                     e: np.ndarray | None = None,
                     style_descriptor: np.ndarray | None = None,
                     overlay_values=None, record_attention=False):
        """(RenderOutput, ForwardResult) for one frame."""
        r = self._frame(t)
        cam = cam if cam is not None else r.cam
        res = self.forward(t, cam=cam, e=e, style_descriptor=style_descriptor,
                           record_attention=record_attention)
        out = render_splats(res.splats, cam, self.background,
                            overlay_values=overlay_values)
        return out, res
