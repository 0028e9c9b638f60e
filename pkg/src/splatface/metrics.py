"""Evaluation metrics: PSNR, SSIM, landmark distance (plain numpy)."""

from __future__ import annotations

import numpy as np

from .losses import _SSIM_C1, _SSIM_C2, gaussian_window

PSNR_CAP = 100.0


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _conv_valid(img, w):
    win = np.lib.stride_tricks.sliding_window_view(img, w.shape, axis=(0, 1))
    return np.einsum("hwcij,ij->hwc", win, w)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred, np.float64)
    t = np.asarray(target, np.float64)
    if p.ndim == 2:
        p, t = p[:, :, None], t[:, :, None]
    w = gaussian_window()
    mu1, mu2 = _conv_valid(p, w), _conv_valid(t, w)
    s11 = _conv_valid(p * p, w) - mu1 * mu1
    s22 = _conv_valid(t * t, w) - mu2 * mu2
    s12 = _conv_valid(p * t, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + _SSIM_C1) * (2 * s12 + _SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + _SSIM_C1) * (s11 + s22 + _SSIM_C2)
    return float((num / den).mean())


def lmd(pred_landmarks, target_landmarks) -> float:
    """Mean Euclidean pixel distance over all landmark pairs (and frames)."""
    p = np.asarray(pred_landmarks, np.float64)
    t = np.asarray(target_landmarks, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"landmark shape mismatch: {p.shape} vs {t.shape}")
    return float(np.linalg.norm(p[..., :2] - t[..., :2], axis=-1).mean())


def evaluate_metrics(pred_frames, target_frames, landmark_pairs=None) -> dict:
    """Averages over a frame set; landmark_pairs is a list of (pred, target)."""
    if len(pred_frames) == 0 or len(pred_frames) != len(target_frames):
        raise ValueError("frame sets must be non-empty and equally sized")
    out = {
        "PSNR": float(np.mean([psnr(p, t) for p, t in zip(pred_frames, target_frames)])),
        "SSIM": float(np.mean([ssim(p, t) for p, t in zip(pred_frames, target_frames)])),
    }
    if landmark_pairs:
        out["LMD"] = float(np.mean([lmd(p, t) for p, t in landmark_pairs]))
    return out
