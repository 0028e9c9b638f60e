"""Training losses (differentiable) for the staged optimization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, avg_pool2, conv2d_valid


@dataclass
class LossWeights:
    rgb: float = 1.0
    per: float = 0.1
    ssim: float = 0.2
    lip: float = 0.5
    ld: float = 0.01
    smo: float = 0.1
    exs: float = 0.1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @staticmethod
    def from_dict(d):
        return LossWeights(**d)

    def to_dict(self):
        return dict(self.__dict__)


LOSS_NAMES = ("rgb", "per", "ssim", "lip", "ld", "smo", "exs")


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim_tensor(pred: Tensor, target: Tensor, window=None) -> Tensor:
    """Mean SSIM over an (H,W,3) image pair, differentiable in `pred`."""
    w = gaussian_window() if window is None else window
    mu1 = conv2d_valid(pred, w)
    mu2 = conv2d_valid(target, w)
    s11 = conv2d_valid(pred * pred, w) - mu1 * mu1
    s22 = conv2d_valid(target * target, w) - mu2 * mu2
    s12 = conv2d_valid(pred * target, w) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + _SSIM_C1) * (2.0 * s12 + _SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + _SSIM_C1) * (s11 + s22 + _SSIM_C2)
    return (num / den).mean()


def _image_gradients(img: Tensor):
    gx = img[:, 1:] - img[:, :-1]
    gy = img[1:, :] - img[:-1, :]
    return gx, gy


def perceptual_proxy(pred: Tensor, target: Tensor, levels=3) -> Tensor:
    """Multi-scale L1 between image-gradient pyramids (`per_proxy` in logs).

    Stands in the perceptual-loss slot; pretrained feature backbones are out
    of scope here.
    """
    total = None
    p, t = pred, target
    for _ in range(levels):
        for gp, gt in zip(_image_gradients(p), _image_gradients(t)):
            term = (gp - gt).abs().mean()
            total = term if total is None else total + term
        p = avg_pool2(p)
        t = avg_pool2(t)
    return total / float(2 * levels)


def lip_loss(pred: Tensor, target: Tensor, mask: np.ndarray):
    """Mean absolute error over mouth-mask pixels; 0 (with a warning flag) if empty."""
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return Tensor(np.zeros((), pred.dtype)), True
    mw = (m[:, :, None] / float(count * 3)).astype(pred.dtype)
    return ((pred - target).abs() * Tensor(mw)).sum(), False


def landmark_loss(pred_lm: Tensor, target_lm: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean squared landmark distance: sum w_i ||d_i||^2 / sum w_i."""
    wsum = float(np.sum(weights))
    if wsum <= 0:
        return Tensor(np.zeros((), pred_lm.dtype))
    d = pred_lm - Tensor(np.asarray(target_lm, dtype=pred_lm.dtype))
    w = Tensor((np.asarray(weights, dtype=pred_lm.dtype) / wsum)[:, None])
    return ((d * d) * w).sum()


def smoothness_loss(delta_prev: Tensor, delta_cur: Tensor, delta_next: Tensor) -> Tensor:
    """Mean squared second difference of the per-splat delta sequence."""
    r = delta_cur - 0.5 * (delta_prev + delta_next)
    return (r * r).mean()


def style_code_loss(code_target: Tensor, code_pred: Tensor) -> Tensor:
    return (code_target - code_pred).abs().mean()


def compute_losses(pred: Tensor, target_img: np.ndarray, mouth_mask, landmarks_pred,
                   landmarks_target, landmark_weights, delta_triple, stage,
                   weights: LossWeights, style_codes=None):
    """All loss terms plus the weighted total.

    `delta_triple` = (flat delta at t-1, t, t+1) or None when the smoothness
    weight is zero; `style_codes` = (target code, predicted code) in the
    stylization stage.
    """
    if pred.shape != target_img.shape:
        raise ValueError(f"image shape mismatch: {pred.shape} vs {target_img.shape}")
    target = Tensor(np.asarray(target_img, dtype=pred.dtype))

    terms = {}
    terms["rgb"] = (pred - target).abs().mean()
    terms["per"] = perceptual_proxy(pred, target)
    terms["ssim"] = 1.0 - ssim_tensor(pred, target)

    empty_mask = False
    if mouth_mask is not None:
        terms["lip"], empty_mask = lip_loss(pred, target, mouth_mask)
    else:
        terms["lip"] = Tensor(np.zeros((), pred.dtype))

    if landmarks_pred is not None and landmarks_target is not None:
        terms["ld"] = landmark_loss(landmarks_pred, landmarks_target, landmark_weights)
    else:
        terms["ld"] = Tensor(np.zeros((), pred.dtype))

    if delta_triple is not None and weights.smo > 0:
        terms["smo"] = smoothness_loss(*delta_triple)
    else:
        terms["smo"] = Tensor(np.zeros((), pred.dtype))

    if stage == "stylization" and style_codes is not None:
        terms["exs"] = style_code_loss(*style_codes)
    else:
        terms["exs"] = Tensor(np.zeros((), pred.dtype))

    total = (weights.rgb * terms["rgb"] + weights.per * terms["per"]
             + weights.ssim * terms["ssim"] + weights.lip * terms["lip"]
             + weights.ld * terms["ld"] + weights.smo * terms["smo"])
    if stage == "stylization":
        total = total + weights.exs * terms["exs"]
    return terms, total, empty_mask
