"""Pinhole camera with a 3x4 world-to-camera matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CameraModel:
    W: np.ndarray  # 3x4 world-to-camera [R | t]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64).reshape(3, 4)
        R = self.W[:, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-5:
            raise ValueError("camera rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    @property
    def rotation(self):
        return self.W[:, :3]

    @property
    def translation(self):
        return self.W[:, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def viewpoint_encoding(self):
        """12-float row-major flatten of W."""
        return self.W.reshape(-1).astype(np.float32)

    def scaled(self, factor: float):
        """Resolution-scaled copy (draft-quality rendering)."""
        return CameraModel(
            W=self.W.copy(),
            fx=self.fx * factor, fy=self.fy * factor,
            cx=self.cx * factor, cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
            near=self.near,
        )

    def to_dict(self):
        return {
            "W": [float(v) for v in self.W.reshape(-1)],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "w": self.width, "h": self.height,
        }

    @staticmethod
    def from_dict(d, near=0.05):
        return CameraModel(
            W=np.asarray(d["W"], dtype=np.float64).reshape(3, 4),
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["w"]), height=int(d["h"]), near=near,
        )


def encode_viewpoint(cam: CameraModel) -> np.ndarray:
    return cam.viewpoint_encoding()


def unflatten_viewpoint(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != 12:
        raise ValueError(f"viewpoint encoding must have 12 values, got {v.size}")
    return v.reshape(3, 4)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera 3x4 looking from `eye` toward `target` (camera +z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    t = -R @ eye
    return np.concatenate([R, t[:, None]], axis=1)


def orbit_camera(azimuth, elevation, radius, target, fx, fy, cx, cy, width, height,
                 near=0.05) -> CameraModel:
    target = np.asarray(target, dtype=np.float64)
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    eye = target + radius * np.array([sa * ce, se, ca * ce])
    return CameraModel(W=look_at(eye, target), fx=fx, fy=fy, cx=cx, cy=cy,
                       width=width, height=height, near=near)
