"""Synthetic ground-truth generator: a procedural Gaussian avatar with known
audio-, emotion-, and style-response functions.

The avatar is an ellipsoidal splat cloud with designated mouth, eye, and
landmark splats.  Per frame:

  * mouth splats translate vertically by ``mouth_amplitude * d_t`` where the
    driver signal ``d_t`` is written into row 0 of the frame's audio block,
  * eye splats scale by ``(1 - y_t)`` for blink degree ``y_t``,
  * each non-neutral emotion displaces eye+mouth splats by a fixed offset
    field,
  * a style applies a known color rotation to the SH coefficients and a
    silhouette scale about the head centroid.

Frames are rendered with the repo's own rasterizer, so the supervision is
exactly representable and training measures recovery of the deformation
functions rather than representation error.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, orbit_camera
from .features import AUDIO_COLS, AUDIO_ROWS, EMOTION_DIM, STYLE_DESCRIPTOR_DIM
from .imageio import write_mask_png, write_png, write_raw_f32
from .rasterizer import rasterize
from .splats import GaussianSplatSet, SH_C0, build_covariance, save_splats

# Mid-gray background makes composited color an affine function of splat
# colors about 0.5 (transmittance terms telescope to 1), which keeps the
# style color rotation recoverable from rendered image pairs.
BACKGROUND = (0.5, 0.5, 0.5)


@dataclass
class OracleConfig:
    seed: int = 0
    n_splats: int = 500
    image_size: int = 64
    frames_per_clip: int = 120
    audio_radius: int = 2
    emotions: tuple = ("neutral", "happy", "sad", "surprised")
    n_styles: int = 2
    mouth_amplitude: float = 0.12
    emotion_amplitude: float = 0.05
    blink_max: float = 0.8
    # magnitude of the per-style silhouette scale deviation (descriptor slot 9
    # = 1 +/- this).  Default 0: a global zoom between the reference and the
    # stylized render biases the color-matrix recovery behind the style
    # consistency loss, so default styles differ in color only.
    style_silhouette: float = 0.0
    camera_radius: float = 2.2
    camera_sweep: float = 0.25      # peak-to-peak azimuth sweep (radians)
    focal: float = 95.0
    sh_degree: int = 1

    # region sizes
    n_mouth: int = 40
    n_eye: int = 14                  # per eye

    def __post_init__(self):
        if self.frames_per_clip < 3:
            raise ValueError("frames_per_clip must be >= 3 (smoothness needs triples)")
        if self.n_splats < self.n_mouth + 2 * self.n_eye:
            raise ValueError("n_splats too small for the mouth/eye regions")
        if "neutral" not in self.emotions:
            raise ValueError("emotion list must include 'neutral'")


# -- avatar geometry ----------------------------------------------------------------

_SEMI_AXES = np.array([0.45, 0.60, 0.40])
_MOUTH_ANCHOR_XY = (0.0, -0.30)
_EYE_ANCHORS_XY = ((-0.18, 0.18), (0.18, 0.18))


def _fibonacci_ellipsoid(n: int) -> np.ndarray:
    """Deterministic quasi-uniform points on the head ellipsoid."""
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)
    return pts * _SEMI_AXES


def _front_anchor(x, y) -> np.ndarray:
    """Point on the +z ellipsoid surface above the (x, y) face location."""
    a, b, c = _SEMI_AXES
    z = c * np.sqrt(max(0.0, 1.0 - (x / a) ** 2 - (y / b) ** 2))
    return np.array([x, y, z])


def _nearest(points, anchor, count, exclude=()):
    d = np.linalg.norm(points - anchor, axis=1)
    if len(exclude):
        d[np.fromiter(exclude, dtype=int)] = np.inf
    return np.argsort(d, kind="stable")[:count]


@dataclass
class OracleAvatar:
    base: GaussianSplatSet
    mouth: np.ndarray            # splat indices
    eyes: np.ndarray
    landmarks: np.ndarray        # splat indices used as landmarks
    landmark_weights: np.ndarray
    emotion_vectors: dict        # label -> (64,)
    emotion_offsets: dict        # label -> (N, 3) position offset field
    style_descriptors: np.ndarray  # (n_styles, 32)
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _base_colors(points: np.ndarray, mouth, eyes) -> np.ndarray:
    """Per-splat RGB in [0,1]: skin-like gradient, red mouth, dark eyes."""
    n = points.shape[0]
    c = np.empty((n, 3))
    shade = 0.5 + 0.5 * (points[:, 1] / _SEMI_AXES[1] + 1.0) / 2.0
    c[:, 0] = 0.80 * shade
    c[:, 1] = 0.62 * shade
    c[:, 2] = 0.52 * shade
    c[mouth] = (0.65, 0.15, 0.18)
    c[eyes] = (0.10, 0.12, 0.30)
    return c


def build_avatar(cfg: OracleConfig) -> OracleAvatar:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = cfg.n_splats
    pts = _fibonacci_ellipsoid(n)

    mouth = _nearest(pts, _front_anchor(*_MOUTH_ANCHOR_XY), cfg.n_mouth)
    eye_l = _nearest(pts, _front_anchor(*_EYE_ANCHORS_XY[0]), cfg.n_eye, exclude=mouth)
    eye_r = _nearest(pts, _front_anchor(*_EYE_ANCHORS_XY[1]), cfg.n_eye,
                     exclude=np.concatenate([mouth, eye_l]))
    eyes = np.sort(np.concatenate([eye_l, eye_r]))
    mouth = np.sort(mouth)

    # landmarks: mouth corners (weight 2), mouth top/bottom, eye centers, face outline
    lm_anchors = [
        _front_anchor(-0.14, -0.30), _front_anchor(0.14, -0.30),   # mouth corners
        _front_anchor(0.0, -0.24), _front_anchor(0.0, -0.36),      # mouth top/bottom
        _front_anchor(*_EYE_ANCHORS_XY[0]), _front_anchor(*_EYE_ANCHORS_XY[1]),
        _front_anchor(-0.40, 0.0), _front_anchor(0.40, 0.0),       # cheeks
        _front_anchor(0.0, 0.52), _front_anchor(0.0, -0.54),       # brow / chin
    ]
    landmarks, taken = [], []
    for a in lm_anchors:
        idx = int(_nearest(pts, a, 1, exclude=taken)[0])
        landmarks.append(idx)
        taken.append(idx)
    landmarks = np.array(landmarks)
    landmark_weights = np.ones(len(landmarks))
    landmark_weights[:2] = 2.0  # mouth corners

    # per-splat scale from mean nearest-neighbor spacing
    from .triplane import nearest_neighbor_distances
    mean_nn = float(np.mean(nearest_neighbor_distances(pts)))
    s = np.full((n, 3), np.log(mean_nn))
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    alpha_raw = np.full(n, 2.0)

    colors = _base_colors(pts, mouth, eyes)
    m = 3 * (cfg.sh_degree + 1) ** 2
    sh = np.zeros((n, m))
    sh[:, 0:3] = (colors - 0.5) / SH_C0
    if cfg.sh_degree >= 1:
        sh[:, 3:12] = rng.normal(0.0, 0.02, (n, 9))

    base = GaussianSplatSet(mu=pts.astype(np.float32), s=s.astype(np.float32),
                            q=q.astype(np.float32), sh=sh.astype(np.float32),
                            alpha_raw=alpha_raw.astype(np.float32), k=cfg.sh_degree)

    # emotion vectors: orthogonal random unit 64-vectors (one per label)
    raw = rng.normal(0.0, 1.0, (EMOTION_DIM, EMOTION_DIM))
    qmat, _ = np.linalg.qr(raw)
    evecs = {lab: qmat[:, i].copy() for i, lab in enumerate(cfg.emotions)}

    # fixed per-emotion offset fields on eye+mouth splats only
    region = np.sort(np.concatenate([mouth, eyes]))
    offsets = {}
    for lab in cfg.emotions:
        off = np.zeros((n, 3))
        if lab != "neutral":
            off[region] = rng.normal(0.0, cfg.emotion_amplitude, (region.size, 3))
        offsets[lab] = off

    # style descriptors: [0:9] color rotation (row-major), [9] silhouette scale
    styles = np.zeros((cfg.n_styles, STYLE_DESCRIPTOR_DIM))
    for i in range(cfg.n_styles):
        angle = (0.5 + 0.4 * i) * (1 if i % 2 == 0 else -1)
        axis = rng.normal(0.0, 1.0, 3)
        axis /= np.linalg.norm(axis)
        K = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
        styles[i, 0:9] = R.reshape(-1)
        styles[i, 9] = 1.0 + cfg.style_silhouette * (1 if i % 2 == 0 else -1)

    return OracleAvatar(base=base, mouth=mouth, eyes=eyes, landmarks=landmarks,
                        landmark_weights=landmark_weights, emotion_vectors=evecs,
                        emotion_offsets=offsets, style_descriptors=styles,
                        centroid=pts.mean(axis=0))


# -- per-frame signals --------------------------------------------------------------

def driver_signal(t: int, total: int) -> float:
    """Mouth-opening driver in [0, 1]: mix of two incommensurate oscillations."""
    u = t / max(total, 1)
    v = 0.5 + 0.35 * np.sin(2 * np.pi * 3.0 * u) + 0.15 * np.sin(2 * np.pi * 7.3 * u + 1.0)
    return float(np.clip(v, 0.0, 1.0))


def blink_signal(t: int, total: int, blink_max: float) -> float:
    """Periodic short blinks: gaussian bumps every ~40 frames."""
    period = 40
    phase = (t % period) - period // 2
    return float(blink_max * np.exp(-0.5 * (phase / 2.0) ** 2))


def make_audio_block(d: float, rng) -> np.ndarray:
    """16x29 feature block; row 0 carries the driver signal, the rest is noise."""
    block = rng.normal(0.0, 0.05, (AUDIO_ROWS, AUDIO_COLS))
    block[0, :] = d
    return block.astype(np.float32)


def frame_camera(cfg: OracleConfig, t: int) -> CameraModel:
    size = cfg.image_size
    az = 0.5 * cfg.camera_sweep * np.sin(2 * np.pi * t / cfg.frames_per_clip)
    el = 0.1 * np.sin(2 * np.pi * t / cfg.frames_per_clip + 0.7)
    return orbit_camera(az, el, cfg.camera_radius, (0.0, 0.0, 0.0),
                        fx=cfg.focal, fy=cfg.focal, cx=size / 2.0, cy=size / 2.0,
                        width=size, height=size)


# -- splat-space response functions -------------------------------------------------

def oracle_splats_for_frame(avatar: OracleAvatar, cfg: OracleConfig, d: float,
                            y: float, emotion: str,
                            style: np.ndarray | None = None) -> GaussianSplatSet:
    base = avatar.base
    mu = base.mu.astype(np.float64).copy()
    s = base.s.astype(np.float64).copy()
    sh = base.sh.astype(np.float64).copy()

    mu[avatar.mouth, 1] -= cfg.mouth_amplitude * d
    y_eff = min(y, 0.95)
    s[avatar.eyes] += np.log(1.0 - y_eff) if y_eff > 0 else 0.0
    mu += avatar.emotion_offsets[emotion]

    if style is not None:
        R = np.asarray(style[0:9], dtype=np.float64).reshape(3, 3)
        scale = float(style[9])
        m = sh.shape[1] // 3
        sh = (sh.reshape(-1, m, 3) @ R.T).reshape(-1, 3 * m)
        mu = avatar.centroid + scale * (mu - avatar.centroid)
        s += np.log(scale)

    return GaussianSplatSet(mu=mu.astype(np.float32), s=s.astype(np.float32),
                            q=base.q.copy(), sh=sh.astype(np.float32),
                            alpha_raw=base.alpha_raw.copy(), k=base.k)


def project_points(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Perspective projection of world points to pixel coordinates, (N, 2)."""
    t = points @ cam.rotation.T + cam.translation
    return np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx,
                     cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)


def oracle_landmarks(splats: GaussianSplatSet, avatar: OracleAvatar,
                     cam: CameraModel) -> np.ndarray:
    """(L, 3) rows of [x, y, weight] from the designated landmark splats."""
    xy = project_points(splats.mu[avatar.landmarks].astype(np.float64), cam)
    return np.concatenate([xy, avatar.landmark_weights[:, None]], axis=1)


def mouth_mask(splats: GaussianSplatSet, avatar: OracleAvatar,
               cam: CameraModel) -> np.ndarray:
    """Boolean (H, W) union of 3-sigma footprints of the mouth splats."""
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.astype(np.float64)   # renderer samples at integer pixel coordinates
    py = ys.astype(np.float64)
    mask = np.zeros((H, W), dtype=bool)
    idx = avatar.mouth
    cov3 = build_covariance(np.exp(splats.s[idx].astype(np.float64)),
                            splats.unit_quaternions()[idx].astype(np.float64))
    from .rasterizer import project_gaussian
    for j, i in enumerate(idx):
        proj = project_gaussian(splats.mu[i].astype(np.float64), cov3[j], cam)
        if proj is None:
            continue
        mean2d, cov2, _ = proj
        a, b, c = cov2[0, 0], cov2[0, 1], cov2[1, 1]
        det = a * c - b * b
        dx = px - mean2d[0]
        dy = py - mean2d[1]
        qf = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        mask |= qf <= 9.0
    return mask


# -- dataset emission ---------------------------------------------------------------

def _emit_clip(out_dir, clip_name, avatar, cfg, emotion, style_index, rng_audio,
               rng_e, frames_meta):
    """Render one clip of T frames; appends manifest frame dicts to frames_meta."""
    T = cfg.frames_per_clip
    style = (avatar.style_descriptors[style_index]
             if style_index is not None else None)
    evec = avatar.emotion_vectors[emotion]

    audio_blocks = []
    for t in range(T):
        d = driver_signal(t, T)
        y = blink_signal(t, T, cfg.blink_max)
        audio_blocks.append(make_audio_block(d, rng_audio))
        splats = oracle_splats_for_frame(avatar, cfg, d, y, emotion, style)
        cam = frame_camera(cfg, t)

        out = rasterize(splats, cam, BACKGROUND)
        frame_png = f"frames/{clip_name}_{t:04d}.png"
        write_png(os.path.join(out_dir, frame_png), out.color)
        write_raw_f32(os.path.join(out_dir, f"frames/{clip_name}_{t:04d}.raw"),
                      out.color.astype(np.float32))

        mask = mouth_mask(splats, avatar, cam)
        mask_png = f"masks/{clip_name}_{t:04d}.png"
        write_mask_png(os.path.join(out_dir, mask_png), mask)

        save_splats(os.path.join(out_dir, f"splats/{clip_name}_{t:04d}.esgf"), splats)

        lm = oracle_landmarks(splats, avatar, cam)
        e_noisy = evec + rng_e.normal(0.0, 0.01, EMOTION_DIM)

        frame = {
            "audio": f"audio/{clip_name}.f32",
            "audio_frame": t,
            "e": [float(v) for v in e_noisy],
            "y": float(min(blink_signal(t, T, cfg.blink_max), 1.0)),
            "cam": cam.to_dict(),
            "target": frame_png,
            "mouth_mask": mask_png,
            "landmarks": [[float(a), float(b), float(w)] for a, b, w in lm],
            "emotion": emotion,
            "clip": clip_name,
        }
        if style_index is not None:
            frame["style"] = [float(v) for v in style]
        frames_meta.append(frame)

    clip = np.stack(audio_blocks).reshape(T, -1).astype("<f4")
    clip.tofile(os.path.join(out_dir, f"audio/{clip_name}.f32"))


def generate_dataset(cfg: OracleConfig, out_dir) -> dict:
    """Emit {neutral, emotional, stylized} manifests plus the avatar side files.

    Returns a dict mapping stage name to manifest path.
    """
    avatar = build_avatar(cfg)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("frames", "masks", "splats", "audio"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    write_raw_f32(os.path.join(out_dir, "points.raw"),
                  avatar.base.mu.astype(np.float32))
    save_splats(os.path.join(out_dir, "avatar_base.esgf"), avatar.base)

    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in cfg.__dict__.items()},
        "mouth": [int(i) for i in avatar.mouth],
        "eyes": [int(i) for i in avatar.eyes],
        "landmarks": [int(i) for i in avatar.landmarks],
        "landmark_weights": [float(w) for w in avatar.landmark_weights],
        "emotion_vectors": {k: [float(x) for x in v]
                            for k, v in avatar.emotion_vectors.items()},
        "style_descriptors": [[float(x) for x in row]
                              for row in avatar.style_descriptors],
        "style_labels": [f"style{i}" for i in range(cfg.n_styles)],
    }
    with open(os.path.join(out_dir, "oracle.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)

    manifests = {}
    non_neutral = [e for e in cfg.emotions if e != "neutral"]

    def write_manifest(stage, frames):
        path = os.path.join(out_dir, f"manifest_{stage}.json")
        with open(path, "w") as f:
            json.dump({"fps": 25.0, "frames": frames}, f, indent=1, sort_keys=True)
        manifests[stage] = path

    # stage 1: one neutral clip
    frames = []
    _emit_clip(out_dir, "neutral", avatar, cfg, "neutral", None,
               np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 0])),
               np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 0])),
               frames)
    write_manifest("neutral", frames)

    # stage 2: same audio/camera per clip, one clip per non-neutral emotion
    frames = []
    for ci, emo in enumerate(non_neutral):
        _emit_clip(out_dir, f"emo_{emo}", avatar, cfg, emo, None,
                   np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 0])),
                   np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 1 + ci])),
                   frames)
    write_manifest("emotional", frames)

    # stage 3: stylized clips (first non-neutral emotion, one clip per style)
    frames = []
    for si in range(cfg.n_styles):
        _emit_clip(out_dir, f"sty{si}_{non_neutral[0]}", avatar, cfg, non_neutral[0],
                   si,
                   np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 0])),
                   np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 10 + si])),
                   frames)
    write_manifest("stylized", frames)

    return manifests


def load_oracle_meta(out_dir) -> dict:
    with open(os.path.join(out_dir, "oracle.json")) as f:
        return json.load(f)
