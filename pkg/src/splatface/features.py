"""Per-frame driving features: manifest IO, audio windowing, encoders, interpolation.

Audio content blocks (16x29 per frame), 64-d expression vectors, blink
scalars and viewpoint encodings are ingested from a JSON manifest; the
external extractors that would produce them for real footage are out of
scope and replaced by the synthetic dataset generator.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .imageio import read_mask_png, read_png
from .nn import MlpSpec, init_mlp, mlp_apply
from .tensor import Tensor

AUDIO_ROWS = 16
AUDIO_COLS = 29
AUDIO_FRAME_FLOATS = AUDIO_ROWS * AUDIO_COLS  # stride 464
EMOTION_DIM = 64
STYLE_DESCRIPTOR_DIM = 32
STYLE_CODE_DIM = 128
POSITION_CODE_DIM = 64


class ManifestError(ValueError):
    pass


@dataclass
class FrameFeatureRecord:
    index: int
    audio: np.ndarray            # (16, 29)
    e: np.ndarray                # (64,)
    y: float
    cam: CameraModel
    v: np.ndarray                # (12,)
    target_path: str | None = None
    mask_path: str | None = None
    landmarks: np.ndarray | None = None  # (L, 3): x, y, weight
    emotion: str | None = None
    style: np.ndarray | None = None      # (32,) descriptor, stage-3 clips only
    clip: str | None = None
    audio_frame: int = 0

    _target_cache: np.ndarray | None = field(default=None, repr=False)
    _mask_cache: np.ndarray | None = field(default=None, repr=False)

    def target_image(self):
        if self.target_path is None:
            return None
        if self._target_cache is None:
            self._target_cache = read_png(self.target_path)
        return self._target_cache

    def mouth_mask(self):
        if self.mask_path is None:
            return None
        if self._mask_cache is None:
            self._mask_cache = read_mask_png(self.mask_path)
        return self._mask_cache


@dataclass
class FeatureSequence:
    fps: float
    records: list
    manifest_path: str
    raw_doc: dict | None = None   # parsed manifest, kept for re-serialization

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def audio_window(self, t: int, radius: int) -> np.ndarray:
        clip = [r for r in self.records if r.clip == self.records[t].clip] or self.records
        pos = clip.index(self.records[t])
        blocks = [r.audio for r in clip]
        return window_audio(blocks, pos, radius)

    def emotions(self):
        seen = []
        for r in self.records:
            if r.emotion is not None and r.emotion not in seen:
                seen.append(r.emotion)
        return seen


def window_audio(sequence, t: int, radius: int) -> np.ndarray:
    """Frames t-radius .. t+radius with edge-clamped boundaries: (2r+1, 16, 29)."""
    n = len(sequence)
    if n == 0:
        raise ValueError("empty audio sequence")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    idx = np.clip(np.arange(t - radius, t + radius + 1), 0, n - 1)
    return np.stack([np.asarray(sequence[i]) for i in idx])


def interpolate_feature(f1, f2, alpha: float) -> np.ndarray:
    """alpha * f1 + (1 - alpha) * f2 (exact at the endpoints)."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"feature length mismatch: {f1.shape} vs {f2.shape}")
    if not 0.0 <= alpha <= 1.0:
        warnings.warn(f"interpolation weight {alpha} outside [0, 1] (extrapolating)")
    if alpha == 1.0:
        return f1.copy()
    if alpha == 0.0:
        return f2.copy()
    return alpha * f1 + (1.0 - alpha) * f2


# -- manifest -------------------------------------------------------------------

def _check(cond, frame, fieldname, msg):
    if not cond:
        raise ManifestError(f"frame {frame}, field '{fieldname}': {msg}")


def load_feature_sequence(manifest_path) -> FeatureSequence:
    with open(manifest_path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    audio_cache = {}
    records = []
    for i, fr in enumerate(doc["frames"]):
        apath = resolve(fr["audio"])
        if apath not in audio_cache:
            if not os.path.exists(apath):
                raise ManifestError(f"frame {i}, field 'audio': missing file {apath}")
            raw = np.fromfile(apath, dtype="<f4")
            if raw.size % AUDIO_FRAME_FLOATS:
                raise ManifestError(
                    f"frame {i}, field 'audio': clip size {raw.size} not a multiple of "
                    f"{AUDIO_FRAME_FLOATS}")
            audio_cache[apath] = raw.reshape(-1, AUDIO_ROWS, AUDIO_COLS)
        clip_blocks = audio_cache[apath]
        aframe = int(fr.get("audio_frame", i))
        _check(0 <= aframe < clip_blocks.shape[0], i, "audio_frame",
               f"index {aframe} outside clip of {clip_blocks.shape[0]} frames")
        audio = clip_blocks[aframe]
        _check(np.all(np.isfinite(audio)), i, "audio", "non-finite values")

        e = np.asarray(fr["e"], dtype=np.float32)
        _check(e.shape == (EMOTION_DIM,), i, "e", f"expected {EMOTION_DIM} values, got {e.shape}")
        _check(np.all(np.isfinite(e)), i, "e", "non-finite values")

        y = float(fr["y"])
        _check(0.0 <= y <= 1.0, i, "y", f"blink {y} outside [0, 1]")

        try:
            cam = CameraModel.from_dict(fr["cam"])
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"frame {i}, field 'cam': {exc}") from exc

        lm = None
        if fr.get("landmarks") is not None:
            lm = np.asarray(fr["landmarks"], dtype=np.float32)
            _check(lm.ndim == 2 and lm.shape[1] == 3, i, "landmarks",
                   f"expected (L, 3) [x, y, weight], got {lm.shape}")
            _check(np.all(np.isfinite(lm)), i, "landmarks", "non-finite values")
            _check(np.all(lm[:, 2] >= 0), i, "landmarks", "negative weight")

        style = None
        if fr.get("style") is not None:
            style = np.asarray(fr["style"], dtype=np.float32)
            _check(style.shape == (STYLE_DESCRIPTOR_DIM,), i, "style",
                   f"expected {STYLE_DESCRIPTOR_DIM} values, got {style.shape}")

        tpath = resolve(fr["target"]) if fr.get("target") else None
        if tpath is not None:
            _check(os.path.exists(tpath), i, "target", f"missing file {tpath}")
        mpath = resolve(fr["mouth_mask"]) if fr.get("mouth_mask") else None
        if mpath is not None:
            _check(os.path.exists(mpath), i, "mouth_mask", f"missing file {mpath}")

        records.append(FrameFeatureRecord(
            index=i, audio=audio, e=e, y=y, cam=cam,
            v=cam.viewpoint_encoding(), target_path=tpath, mask_path=mpath,
            landmarks=lm, emotion=fr.get("emotion"), style=style,
            clip=fr.get("clip"), audio_frame=aframe,
        ))
    return FeatureSequence(fps=float(doc.get("fps", 25.0)), records=records,
                           manifest_path=os.path.abspath(manifest_path),
                           raw_doc=doc)


def save_feature_sequence(seq: FeatureSequence, path):
    """Re-serialize a loaded sequence (byte-identical for generated manifests)."""
    if seq.raw_doc is None:
        raise ValueError("sequence was not loaded from a manifest")
    with open(path, "w") as f:
        json.dump(seq.raw_doc, f, indent=1, sort_keys=True)


# -- learned encoders -------------------------------------------------------------

class PositionEncoder:
    """MLP mapping bbox-normalized 3D positions to 64-d codes."""

    def __init__(self, bbox_lo, bbox_hi, hidden=(64,), rng=None, dtype=np.float32):
        self.bbox_lo = np.asarray(bbox_lo, np.float64)
        self.bbox_hi = np.asarray(bbox_hi, np.float64)
        self.spec = MlpSpec((3,) + tuple(hidden) + (POSITION_CODE_DIM,))
        self.params = init_mlp(self.spec, rng or np.random.default_rng(0),
                               dtype=dtype, name="pos_encoder")

    def __call__(self, mu: Tensor) -> Tensor:
        dtype = self.params[0].dtype
        lo = Tensor(self.bbox_lo.astype(dtype))
        ext = Tensor((self.bbox_hi - self.bbox_lo).astype(dtype))
        return mlp_apply(self.spec, self.params, (mu - lo) / ext)


class StyleExtractor:
    """MLP mapping 32-d style descriptors to 128-d style codes."""

    def __init__(self, hidden=(64,), rng=None, dtype=np.float32):
        self.spec = MlpSpec((STYLE_DESCRIPTOR_DIM,) + tuple(hidden) + (STYLE_CODE_DIM,))
        self.params = init_mlp(self.spec, rng or np.random.default_rng(0),
                               dtype=dtype, name="style_extractor")

    def __call__(self, descriptor: Tensor) -> Tensor:
        return mlp_apply(self.spec, self.params, descriptor)
