"""Canonical Gaussian scene model and camera projection math."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor
from .mask import apply_mask

DILATION = 0.3  # px^2 added to the screen-space covariance diagonal


@dataclass
class GaussianCloud:
    """Per-point canonical parameters (all float64 arrays)."""

    mu: np.ndarray            # (N, 3)
    rot: np.ndarray           # (N, 4) quaternion (w, x, y, z)
    log_scale: np.ndarray     # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    mask_logit: np.ndarray    # (N,)

    FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "mask_logit")

    def __post_init__(self):
        n = len(self.mu)
        for name in self.FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if len(arr) != n:
                raise ValueError(f"GaussianCloud.{name} has {len(arr)} rows, expected {n}")
            setattr(self, name, arr)

    def __len__(self):
        return len(self.mu)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return dk.sigmoid_np(self.opacity_logit)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[idx] for f in self.FIELDS))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in self.FIELDS))


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward)."""

    world_to_cam: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    time: float = 0.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        R = self.world_to_cam[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("Camera: world_to_cam rotation block is not orthonormal")
        if not self.near < self.far:
            raise ValueError("Camera: near must be smaller than far")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"Camera: time {self.time} outside [0, 1]")

    @classmethod
    def look_at(cls, eye, target, up, fov_x: float, width: int, height: int, time: float = 0.0):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(W, f, f, width / 2.0, height / 2.0, width, height, time=time)

    @property
    def center(self):
        R, t = self.world_to_cam[:3, :3], self.world_to_cam[:3, 3]
        return -R.T @ t

    def at_time(self, t: float) -> "Camera":
        return replace(self, time=t)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def normalize_quat(q: Tensor) -> Tensor:
    return q / dk.norm_l2(q, axis=-1, keepdims=True)


def rotmat_tensor(q: Tensor) -> Tensor:
    """(N, 4) normalized quaternions -> (N, 3, 3) rotation matrices."""
    w, x, y, z = (q[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ]
    return dk.stack([dk.stack(r, axis=-1) for r in rows], axis=-2)


def covariance_tensor(q: Tensor, scale: Tensor) -> Tensor:
    """Batched R diag(s)^2 R^T; ``q`` is normalized here."""
    R = rotmat_tensor(normalize_quat(q))
    M = R * dk.reshape(scale, (-1, 1, 3))
    return M @ dk.swapaxes(M, -1, -2)


def covariance_3d(r, s) -> np.ndarray:
    """3x3 covariance for a single quaternion ``r`` and scale vector ``s``."""
    r = np.asarray(r, dtype=np.float64)
    if not np.linalg.norm(r) > 0:
        raise ValueError("covariance_3d: zero quaternion")
    sig = covariance_tensor(Tensor(r[None]), Tensor(np.asarray(s, dtype=np.float64)[None]))
    return sig.data[0]


@dataclass
class Projection:
    mu2d: Tensor     # (N, 2) px
    cov2d: Tensor    # (N, 2, 2)
    depth: Tensor    # (N,)
    visible: np.ndarray  # (N,) bool: in front of the near plane


def project_tensor(mu: Tensor, cov: Tensor, cam: Camera) -> Projection:
    """EWA projection of N world-space Gaussians.

    Rows behind the near plane are still computed (with their depth clamped
    to keep the arithmetic finite) and flagged through ``visible``.
    """
    W = cam.world_to_cam
    Rw, tw = W[:3, :3], W[:3, 3]
    pc = mu @ Tensor(Rw.T) + Tensor(tw)
    visible = pc.data[:, 2] > cam.near
    z_safe = np.where(visible, 0.0, cam.near - pc.data[:, 2] + 1.0)
    x, y = pc[:, 0], pc[:, 1]
    z = pc[:, 2] + Tensor(z_safe)
    inv_z = 1.0 / z
    u = cam.fx * x * inv_z + cam.cx
    v = cam.fy * y * inv_z + cam.cy
    mu2d = dk.stack([u, v], axis=-1)
    zero = Tensor(np.zeros(len(visible)))
    inv_z2 = inv_z * inv_z
    J = dk.stack([
        dk.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z2], axis=-1),
        dk.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z2], axis=-1),
    ], axis=-2)
    T = J @ Tensor(Rw)
    cov2d = T @ cov @ dk.swapaxes(T, -1, -2) + Tensor(DILATION * np.eye(2))
    return Projection(mu2d, cov2d, pc[:, 2], visible)


def project(mu, Sigma, cam: Camera):
    """Single-point projection; returns None when the point is culled."""
    p = project_tensor(Tensor(np.asarray(mu, dtype=np.float64)[None]),
                       Tensor(np.asarray(Sigma, dtype=np.float64)[None]), cam)
    if not p.visible[0]:
        return None
    return p.mu2d.data[0], p.cov2d.data[0], float(p.depth.data[0])


@dataclass
class DeformedGaussians:
    """World-space Gaussians ready for projection at one timestamp."""

    mu: Tensor
    rot: Tensor      # normalized
    scale: Tensor    # linear
    opacity: Tensor  # (N,)
    color: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return self.mu.shape[0]


def compose_deformed(mu: Tensor, rot: Tensor, log_scale: Tensor, opacity_logit: Tensor,
                     offsets, M: Tensor) -> DeformedGaussians:
    """Apply deformation offsets and the binary mask to canonical parameters.

    position mu + d_mu, rotation normalize(r + d_rot),
    scale M * exp(log_scale) + sg(M) * d_scale, opacity M * sigmoid(logit).
    """
    n = mu.shape[0]
    for name in ("d_mu", "d_rot", "d_scale", "d_color"):
        if getattr(offsets, name).shape[0] != n:
            raise ValueError(f"compose_deformed: offsets.{name} has {getattr(offsets, name).shape[0]} rows, expected {n}")
    if M.shape[0] != n:
        raise ValueError(f"compose_deformed: mask has {M.shape[0]} rows, expected {n}")
    scale, opacity = apply_mask(dk.exp(log_scale), dk.sigmoid(opacity_logit), offsets.d_scale, M)
    return DeformedGaussians(
        mu=mu + offsets.d_mu,
        rot=normalize_quat(rot + offsets.d_rot),
        scale=scale,
        opacity=opacity,
    )
