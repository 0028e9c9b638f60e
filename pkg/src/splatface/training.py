"""Three-stage training orchestrator with freeze contracts and checkpoints.

Stage "neutral" fits the canonical generator, attention stack, position
encoder, and emotional predictor on neutral clips; stage "emotion" freezes the
generator and continues the rest on multi-emotion clips; stage "stylization"
trains only the style extractor and style predictor on stylized clips.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import (Checkpoint, checkpoint_from_model, group_checksums,
                         save_checkpoint)
from .deformers import apply_deformation
from .features import FeatureSequence
from .losses import LossWeights, compute_losses
from .metrics import lmd, psnr, ssim
from .model import (STAGE_TRAINABLE, FaceModel, color_slots, project_landmarks,
                    recover_style_descriptor)
from .optim import Adam
from .splats import SplatTensors
from .tensor import Tensor

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str
    iterations: int
    learning_rate: float = 5e-3
    checkpoint_every: int = 1000
    heldout_every: int = 10          # every Nth frame of each clip is held out
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    background: tuple = DEFAULT_BACKGROUND
    # L1 pressure on the emotion-layer attention mass assigned to the emotion
    # token.  Splats whose deformation does not depend on the expression drift
    # to the null token, so the attention map localizes to the regions the
    # emotion actually moves; splats that need the conditioning keep it because
    # the reconstruction losses dominate.  Active only in the emotion stage
    # (the neutral stage has no expression variance, so the penalty there only
    # saturates the softmax toward the null token and the later stage cannot
    # recover through the dead gradient) and only in its second half (the
    # conditioning pathways must form before pruning starts).  The audio layer
    # is never regularized: audio tokens change every frame, so splats that
    # audio does not move shed that attention on their own.
    attention_locality: float = 0.02

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def split_frames(seq: FeatureSequence, heldout_every: int):
    """(train indices, held-out indices); every Nth frame per clip held out."""
    train, heldout = [], []
    for i, r in enumerate(seq.records):
        if heldout_every > 0 and r.audio_frame % heldout_every == heldout_every - 1:
            heldout.append(i)
        else:
            train.append(i)
    return np.array(train), np.array(heldout)


def clip_interior(seq: FeatureSequence, indices):
    """Indices whose clip neighbors (t-1, t+1) exist in the sequence."""
    out = []
    for i in indices:
        r = seq.records[i]
        ok_prev = i > 0 and seq.records[i - 1].clip == r.clip
        ok_next = i + 1 < len(seq) and seq.records[i + 1].clip == r.clip
        if ok_prev and ok_next:
            out.append(i)
    return np.array(out)


# -- cached forward helpers -----------------------------------------------------------


class StageRunner:
    """Per-stage forward with the caching that each freeze contract allows."""

    def __init__(self, model: FaceModel, stage: str):
        self.model = model
        self.stage = stage
        trainable = STAGE_TRAINABLE[stage]
        self.canonical = (None if "generator" in trainable
                          else model.frozen_canonical())
        self._z_cache = {} if "esam" not in trainable else None
        self._emo_cache = {} if "p_emo" not in trainable else None

    def _z(self, seq, t):
        if self._z_cache is None:
            return None
        key = (id(seq), t)
        if key not in self._z_cache:
            r = seq.records[t]
            window = seq.audio_window(t, self.model.cfg.audio_radius)
            res = self.model.forward(window, r.e, r.y, r.v,
                                     canonical=self.canonical)
            self._z_cache[key] = Tensor(res.z.data.copy())
        return self._z_cache[key]

    def iteration_canonical(self):
        """Canonical pair shared by every forward within one optimization step
        (the canonical generator is frame-independent)."""
        return self.canonical if self.canonical is not None \
            else self.model.canonical_forward()

    def forward(self, seq, t, with_style: bool, record_attention=False,
                canonical=None):
        r = seq.records[t]
        window = seq.audio_window(t, self.model.cfg.audio_radius)
        style = r.style if (with_style and r.style is not None) else None
        return self.model.forward(window, r.e, r.y, r.v, style_descriptor=style,
                                  record_attention=record_attention,
                                  canonical=(canonical if canonical is not None
                                             else self.iteration_canonical()),
                                  z=self._z(seq, t)), r

    def delta_flat(self, seq, t, with_style: bool, canonical=None) -> Tensor:
        """Per-splat flattened deformation delta for the smoothness loss."""
        res, _ = self.forward(seq, t, with_style, canonical=canonical)
        flat = res.delta_emo.flat()
        if res.delta_sty is not None:
            flat = flat + res.delta_sty.flat()
        return flat


def _constant_splats(s: SplatTensors) -> SplatTensors:
    return SplatTensors(Tensor(s.mu.data), Tensor(s.s.data), Tensor(s.q.data),
                        Tensor(s.sh.data), Tensor(s.alpha_raw.data), s.k)


# -- training loop --------------------------------------------------------------------

LOG_COLUMNS = ("iter", "L_rgb", "L_per", "L_ssim", "L_lip", "L_ld", "L_smo",
               "L_exs", "total")


def train_stage(model: FaceModel, seq: FeatureSequence, cfg: StageConfig,
                landmark_indices, out_dir, meta=None, log_path=None,
                progress=None) -> Checkpoint:
    """Optimize the stage's trainable set; returns (and writes) a checkpoint.

    `landmark_indices` are the splat indices whose projected centers are the
    model's predicted landmarks.  `meta` is carried into the checkpoint.
    """
    meta = dict(meta or {})
    stage = cfg.stage
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    trainable = model.trainable(stage)
    opt = Adam(trainable, lr=cfg.learning_rate)
    lm_idx = np.asarray(landmark_indices, dtype=np.int64)

    frozen_groups = [g for g in model.groups() if g not in STAGE_TRAINABLE[stage]]
    checks_before = group_checksums(model)

    train_idx, heldout_idx = split_frames(seq, cfg.heldout_every)
    sample_pool = clip_interior(seq, train_idx)
    if cfg.iterations > 0 and sample_pool.size == 0:
        raise TrainingError("no trainable frames with clip-interior neighbors")

    runner = StageRunner(model, stage)
    with_style = stage == "stylization"
    os.makedirs(out_dir, exist_ok=True)
    log_file = open(log_path, "w", newline="") if log_path else None
    log = csv.writer(log_file) if log_file else None
    if log:
        log.writerow(LOG_COLUMNS)

    history = []
    ckpt_path = os.path.join(out_dir, f"{stage}.esgc")
    try:
        for it in range(cfg.iterations):
            t = int(sample_pool[rng.integers(sample_pool.size)])
            canonical = runner.iteration_canonical()
            res, r = runner.forward(seq, t, with_style, canonical=canonical)
            img = model.render(res, r.cam, cfg.background)

            lm_pred = project_landmarks(res.splats.mu, lm_idx, r.cam)
            lm_target = r.landmarks[:, :2]
            lm_weights = r.landmarks[:, 2]

            delta_prev = runner.delta_flat(seq, t - 1, with_style, canonical=canonical)
            delta_next = runner.delta_flat(seq, t + 1, with_style, canonical=canonical)
            delta_cur = res.delta_emo.flat()
            if res.delta_sty is not None:
                delta_cur = delta_cur + res.delta_sty.flat()

            style_codes = None
            if with_style and r.style is not None:
                emo_splats = apply_deformation(res.canonical, res.delta_emo)
                ref_img = model.render(
                    _replace_splats(res, emo_splats), r.cam, cfg.background)
                recovered = recover_style_descriptor(ref_img, img)
                dtype = model.style_extractor.params[0].dtype
                gt_desc = Tensor(np.asarray(r.style, dtype=dtype))
                style_codes = (
                    model.style_extractor(color_slots(gt_desc)),
                    model.style_extractor(color_slots(recovered)),
                )

            terms, total, _ = compute_losses(
                img, r.target_image(), r.mouth_mask(), lm_pred, lm_target,
                lm_weights, (delta_prev, delta_cur, delta_next), stage,
                cfg.weights, style_codes)

            if (cfg.attention_locality > 0 and res.ega_weights
                    and stage == "emotion" and it >= cfg.iterations // 2):
                # column 0 is the emotion token (column 1 the null token)
                mass = sum(w[:, 0].mean() for w in res.ega_weights)
                total = total + (cfg.attention_locality / len(res.ega_weights)) * mass

            if not np.isfinite(total.data):
                raise TrainingError(
                    f"non-finite loss at iteration {it}, frame {t} "
                    f"(clip {r.clip!r}, audio_frame {r.audio_frame}): "
                    + ", ".join(f"{k}={float(v.data):.4g}" for k, v in terms.items()))

            for p in model.parameters():
                p.grad = None
            total.backward()
            opt.step()

            row = [it] + [float(terms[k].data) for k in
                          ("rgb", "per", "ssim", "lip", "ld", "smo", "exs")]
            row.append(float(total.data))
            history.append(row)
            if log:
                log.writerow([f"{v:.6g}" if isinstance(v, float) else v
                              for v in row])
            if progress:
                progress(it, row)

            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                _assert_frozen(model, checks_before, frozen_groups)
                save_checkpoint(ckpt_path, _make_ckpt(model, cfg, it + 1, meta,
                                                      history, rng))
    finally:
        if log_file:
            log_file.close()

    _assert_frozen(model, checks_before, frozen_groups)
    ckpt = _make_ckpt(model, cfg, cfg.iterations, meta, history, rng)
    save_checkpoint(ckpt_path, ckpt)
    return ckpt


def _replace_splats(res, splats):
    from dataclasses import replace
    return replace(res, splats=splats)


def _assert_frozen(model, checks_before, frozen_groups):
    after = group_checksums(model)
    for g in frozen_groups:
        if after[g] != checks_before[g]:
            raise TrainingError(f"frozen parameter group {g!r} changed during training")


def _make_ckpt(model, cfg: StageConfig, iteration, meta, history, rng):
    meta = dict(meta)
    meta["loss_history_tail"] = history[-20:]
    meta["rng_state"] = rng.bit_generator.state
    meta["stage_config"] = {
        "stage": cfg.stage, "iterations": cfg.iterations,
        "learning_rate": cfg.learning_rate, "heldout_every": cfg.heldout_every,
        "seed": cfg.seed, "weights": cfg.weights.to_dict(),
        "background": list(cfg.background),
        "attention_locality": cfg.attention_locality,
    }
    return checkpoint_from_model(model, cfg.stage, iteration, meta)


def bootstrap_model(data_dir, model_cfg=None):
    """Fresh FaceModel seeded from a generated dataset directory.

    Returns (model, meta): `meta` carries the dataset's emotion/style tables,
    landmark splat indices, and region index sets into every checkpoint so the
    render service and CLI are self-contained given a checkpoint.
    """
    import json

    from .imageio import read_raw_f32
    from .model import ModelConfig

    with open(os.path.join(data_dir, "oracle.json")) as f:
        oracle_meta = json.load(f)
    points = read_raw_f32(os.path.join(data_dir, "points.raw"))
    model = FaceModel(points.astype(np.float32), model_cfg or ModelConfig())
    meta = {
        "emotion_vectors": oracle_meta["emotion_vectors"],
        "style_descriptors": oracle_meta["style_descriptors"],
        "style_labels": oracle_meta["style_labels"],
        "landmark_indices": oracle_meta["landmarks"],
        "landmark_weights": oracle_meta["landmark_weights"],
        "regions": {"mouth": oracle_meta["mouth"], "eyes": oracle_meta["eyes"]},
        "background": list(DEFAULT_BACKGROUND),
    }
    return model, meta


# -- evaluation -----------------------------------------------------------------------

def evaluate(model: FaceModel, seq: FeatureSequence, indices, landmark_indices,
             background=DEFAULT_BACKGROUND, stage="emotion") -> dict:
    """PSNR/SSIM/LMD of the current model on the given frame indices."""
    if len(indices) == 0:
        raise ValueError("no frames to evaluate")
    runner = StageRunner(model, stage)
    lm_idx = np.asarray(landmark_indices, dtype=np.int64)
    with_style = any(seq.records[i].style is not None for i in indices)
    ps, ss, lds = [], [], []
    for i in indices:
        res, r = runner.forward(seq, int(i), with_style)
        img = model.render(res, r.cam, background).data
        target = r.target_image()
        ps.append(psnr(img, target))
        ss.append(ssim(img, target))
        if r.landmarks is not None:
            lm_pred = project_landmarks(res.splats.mu, lm_idx, r.cam).data
            lds.append(lmd(lm_pred, r.landmarks[:, :2]))
    out = {"PSNR": float(np.mean(ps)), "SSIM": float(np.mean(ss))}
    if lds:
        out["LMD"] = float(np.mean(lds))
    return out
