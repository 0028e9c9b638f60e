"""Gaussian splat set: storage, activations, covariance, spherical harmonics, file IO.

Scales are stored as logs and opacities as logits so optimization is
unconstrained; quaternions are normalized at the point of use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SPLAT_MAGIC = b"ESGF"
SPLAT_VERSION = 1


def sh_coeff_count(k: int) -> int:
    return (k + 1) ** 2


@dataclass
class GaussianSplatSet:
    mu: np.ndarray        # (N, 3) world positions
    s: np.ndarray         # (N, 3) log-scales
    q: np.ndarray         # (N, 4) quaternions (w, x, y, z), normalized at use
    sh: np.ndarray        # (N, 3*(k+1)^2)
    alpha_raw: np.ndarray  # (N,) opacity logits
    k: int = 1

    def __post_init__(self):
        n = self.mu.shape[0]
        expect = 3 * sh_coeff_count(self.k)
        if self.sh.shape != (n, expect):
            raise ValueError(f"sh must be (N, {expect}) for degree {self.k}, got {self.sh.shape}")
        for name, arr, sh_ in (("mu", self.mu, (n, 3)), ("s", self.s, (n, 3)),
                               ("q", self.q, (n, 4)), ("alpha_raw", self.alpha_raw, (n,))):
            if arr.shape != sh_:
                raise ValueError(f"{name} must have shape {sh_}, got {arr.shape}")

    @property
    def count(self):
        return self.mu.shape[0]

    def copy(self):
        return GaussianSplatSet(self.mu.copy(), self.s.copy(), self.q.copy(),
                                self.sh.copy(), self.alpha_raw.copy(), self.k)

    def astype(self, dtype):
        return GaussianSplatSet(self.mu.astype(dtype), self.s.astype(dtype),
                                self.q.astype(dtype), self.sh.astype(dtype),
                                self.alpha_raw.astype(dtype), self.k)

    # -- activated views -----------------------------------------------------
    def scales(self):
        return np.exp(self.s)

    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.alpha_raw))

    def unit_quaternions(self):
        n = np.linalg.norm(self.q, axis=1, keepdims=True)
        if np.any(n < 1e-6):
            raise ValueError("degenerate quaternion (norm < 1e-6)")
        return self.q / n


@dataclass
class SplatTensors:
    """Differentiable splat fields (autodiff tensors), mirroring GaussianSplatSet."""

    mu: object        # Tensor (N, 3)
    s: object         # Tensor (N, 3)
    q: object         # Tensor (N, 4), raw (normalized by the rasterizer)
    sh: object        # Tensor (N, 3*(k+1)^2)
    alpha_raw: object  # Tensor (N,)
    k: int = 1

    def to_splat_set(self) -> "GaussianSplatSet":
        return GaussianSplatSet(
            mu=np.asarray(self.mu.data, dtype=np.float32),
            s=np.asarray(self.s.data, dtype=np.float32),
            q=np.asarray(self.q.data, dtype=np.float32),
            sh=np.asarray(self.sh.data, dtype=np.float32),
            alpha_raw=np.asarray(self.alpha_raw.data, dtype=np.float32),
            k=self.k,
        )


# -- covariance ---------------------------------------------------------------

def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w,x,y,z) -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotation_partials(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (..., 4, 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    d = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    d[..., 0, :, :] = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    d[..., 1, :, :] = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    d[..., 2, :, :] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    d[..., 3, :, :] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    return d


def build_covariance(s_activated: np.ndarray, q_unit: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for activated scales and unit quaternions (batched)."""
    R = quat_to_rotation(np.asarray(q_unit, dtype=np.float64))
    M = R * np.asarray(s_activated, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# -- spherical harmonics --------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(dirs: np.ndarray, k: int) -> np.ndarray:
    """Real SH basis values for unit directions: (..., (k+1)^2)."""
    if not 0 <= k <= 3:
        raise ValueError(f"SH degree must be in [0, 3], got {k}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if k >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if k >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if k >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, k: int) -> np.ndarray:
    """d(basis)/d(dir): (..., (k+1)^2, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [np.stack([zero, zero, zero], -1)]
    if k >= 1:
        one = np.ones_like(x)
        rows += [np.stack([zero, -SH_C1 * one, zero], -1),
                 np.stack([zero, zero, SH_C1 * one], -1),
                 np.stack([-SH_C1 * one, zero, zero], -1)]
    if k >= 2:
        rows += [np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], -1),
                 np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], -1),
                 np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], -1),
                 np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], -1),
                 np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], -1)]
    if k >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            np.stack([SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero], -1),
            np.stack([SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y], -1),
            np.stack([-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy),
                      SH_C3[2] * 8 * y * z], -1),
            np.stack([-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z,
                      SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)], -1),
            np.stack([SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y,
                      SH_C3[4] * 8 * x * z], -1),
            np.stack([2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)], -1),
            np.stack([SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero], -1),
        ]
    return np.stack(rows, axis=-2)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, k: int) -> np.ndarray:
    """Per-channel color 0.5 + sum(Y_lm * sh_lm), clamped to >= 0.

    `sh` is (..., 3*(k+1)^2) ordered coefficient-major: [c0_rgb, c1_rgb, ...].
    """
    m = sh_coeff_count(k)
    if sh.shape[-1] != 3 * m:
        raise ValueError(f"sh length {sh.shape[-1]} inconsistent with degree {k}")
    basis = sh_basis(view_dir, k)
    coeffs = sh.reshape(sh.shape[:-1] + (m, 3))
    color = 0.5 + np.einsum("...m,...mc->...c", basis, coeffs)
    return np.maximum(color, 0.0)


# -- binary splat file ---------------------------------------------------------

def save_splats(path, splats: GaussianSplatSet):
    n, k = splats.count, splats.k
    m = 3 * sh_coeff_count(k)
    rec = np.empty((n, 11 + m), dtype="<f4")
    rec[:, 0:3] = splats.mu
    rec[:, 3:6] = splats.s
    rec[:, 6:10] = splats.q
    rec[:, 10:10 + m] = splats.sh
    rec[:, 10 + m] = splats.alpha_raw
    with open(path, "wb") as f:
        f.write(SPLAT_MAGIC)
        f.write(struct.pack("<III", SPLAT_VERSION, n, k))
        f.write(rec.tobytes())


def load_splats(path) -> GaussianSplatSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPLAT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, n, k = struct.unpack("<III", f.read(12))
        if version != SPLAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        m = 3 * sh_coeff_count(k)
        rec = np.frombuffer(f.read(n * (11 + m) * 4), dtype="<f4").reshape(n, 11 + m)
    return GaussianSplatSet(
        mu=rec[:, 0:3].astype(np.float32),
        s=rec[:, 3:6].astype(np.float32),
        q=rec[:, 6:10].astype(np.float32),
        sh=rec[:, 10:10 + m].astype(np.float32),
        alpha_raw=rec[:, 10 + m].astype(np.float32).copy(),
        k=k,
    )
