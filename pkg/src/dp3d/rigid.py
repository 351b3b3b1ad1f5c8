"""SE(3) exponential/logarithm maps and rigid-transform algebra.

All transforms act on row vectors: ``apply(g, p) = p @ R + T``. A twist is
stored as ``(omega, v)`` with the rotation log first. Every function accepts
arbitrary leading batch dimensions and is differentiable with torch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64
# Below this angle the trigonometric coefficients switch to their Taylor series.
SMALL_ANGLE = 1e-3
BRANCH_MARGIN = 1e-6


class BranchCutError(ValueError):
    """Rotation angle too close to pi for an unambiguous logarithm."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.from_numpy(np.array(x, dtype=np.float64))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` (..., 3, 3) and translation ``T`` (..., 3)."""

    R: torch.Tensor
    T: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=()) -> "RigidTransform":
        R = torch.eye(3, dtype=DTYPE).expand(*batch_shape, 3, 3).clone()
        return cls(R, torch.zeros(*batch_shape, 3, dtype=DTYPE))

    @classmethod
    def from_arrays(cls, R, T) -> "RigidTransform":
        return cls(as_tensor(R), as_tensor(T))

    def apply(self, p):
        return apply(self, p)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def numpy(self):
        return self.R.detach().numpy(), self.T.detach().numpy()

    def __getitem__(self, idx) -> "RigidTransform":
        return RigidTransform(self.R[idx], self.T[idx])


def hat(w: torch.Tensor) -> torch.Tensor:
    """Skew matrix ``[w]x`` with ``hat(w) @ x == cross(w, x)``."""
    z = torch.zeros_like(w[..., 0])
    return torch.stack([
        torch.stack([z, -w[..., 2], w[..., 1]], -1),
        torch.stack([w[..., 2], z, -w[..., 0]], -1),
        torch.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def _exp_coefficients(theta2):
    """sin(t)/t, (1-cos t)/t^2 and (t-sin t)/t^3 as functions of t^2."""
    small = theta2 < SMALL_ANGLE ** 2
    t2 = torch.where(small, torch.ones_like(theta2), theta2)
    t = torch.sqrt(t2)
    a = torch.sin(t) / t
    b = (1 - torch.cos(t)) / t2
    c = (t - torch.sin(t)) / (t2 * t)
    s = theta2
    a_s = 1 - s / 6 + s ** 2 / 120 - s ** 3 / 5040
    b_s = 0.5 - s / 24 + s ** 2 / 720 - s ** 3 / 40320
    c_s = 1.0 / 6 - s / 120 + s ** 2 / 5040 - s ** 3 / 362880
    return torch.where(small, a_s, a), torch.where(small, b_s, b), torch.where(small, c_s, c)


def so3_exp_column(omega: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for column vectors: returns ``Rc`` with ``x' = Rc x``."""
    theta2 = (omega * omega).sum(-1)
    a, b, _ = _exp_coefficients(theta2)
    W = hat(omega)
    eye = torch.eye(3, dtype=omega.dtype)
    return eye + a[..., None, None] * W + b[..., None, None] * (W @ W)


def se3_exp(h) -> RigidTransform:
    """Exponential map of a twist ``h = (omega, v)`` (..., 6)."""
    h = as_tensor(h)
    omega, v = h[..., :3], h[..., 3:]
    theta2 = (omega * omega).sum(-1)
    a, b, c = _exp_coefficients(theta2)
    W = hat(omega)
    WW = W @ W
    eye = torch.eye(3, dtype=h.dtype)
    Rc = eye + a[..., None, None] * W + b[..., None, None] * WW
    V = eye + b[..., None, None] * W + c[..., None, None] * WW
    T = (V @ v[..., None])[..., 0]
    return RigidTransform(Rc.transpose(-1, -2), T)


def rotation_angle(R) -> torch.Tensor:
    R = as_tensor(R)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    axis = torch.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], -1)
    return torch.atan2(0.5 * axis.norm(dim=-1), 0.5 * (tr - 1))


def se3_log(g: RigidTransform) -> torch.Tensor:
    """Logarithm on the canonical branch ``|omega| < pi``.

    Raises
    ------
    BranchCutError
        If any rotation angle is within ``1e-6`` of pi.
    """
    Rc = as_tensor(g.R).transpose(-1, -2)
    T = as_tensor(g.T)
    # skew part of Rc is sin(theta) * hat(axis)
    s = torch.stack([Rc[..., 2, 1] - Rc[..., 1, 2], Rc[..., 0, 2] - Rc[..., 2, 0],
                     Rc[..., 1, 0] - Rc[..., 0, 1]], -1) * 0.5
    cos = 0.5 * (Rc[..., 0, 0] + Rc[..., 1, 1] + Rc[..., 2, 2] - 1)
    sin = s.norm(dim=-1)
    theta = torch.atan2(sin, cos)
    if torch.any(theta >= np.pi - BRANCH_MARGIN):
        worst = float(theta.max())
        raise BranchCutError(f"rotation angle {worst:.9f} is within {BRANCH_MARGIN} of pi")
    theta2 = theta * theta
    small = theta < SMALL_ANGLE
    safe_sin = torch.where(small, torch.ones_like(sin), sin)
    safe_theta = torch.where(small, torch.ones_like(theta), theta)
    scale = torch.where(small, 1 + theta2 / 6 + 7 * theta2 ** 2 / 360, safe_theta / safe_sin)
    omega = scale[..., None] * s

    a, b, _ = _exp_coefficients(theta2)
    safe_t2 = torch.where(small, torch.ones_like(theta2), theta2)
    d = torch.where(small, 1.0 / 12 + theta2 / 720 + theta2 ** 2 / 30240,
                    (1 - a / (2 * b)) / safe_t2)
    W = hat(omega)
    eye = torch.eye(3, dtype=Rc.dtype)
    V_inv = eye - 0.5 * W + d[..., None, None] * (W @ W)
    v = (V_inv @ T[..., None])[..., 0]
    return torch.cat([omega, v], -1)


def apply(g: RigidTransform, p) -> torch.Tensor:
    """Transform row-vector points ``p`` (..., N, 3) or (..., 3)."""
    p = as_tensor(p)
    if p.dim() == g.T.dim():
        return (p[..., None, :] @ g.R)[..., 0, :] + g.T
    return p @ g.R + g.T[..., None, :]


def compose(g1: RigidTransform, g2: RigidTransform) -> RigidTransform:
    """The transform applying ``g1`` first and then ``g2``."""
    return RigidTransform(g1.R @ g2.R, (g1.T[..., None, :] @ g2.R)[..., 0, :] + g2.T)


def invert(g: RigidTransform) -> RigidTransform:
    Rt = g.R.transpose(-1, -2)
    return RigidTransform(Rt, -(g.T[..., None, :] @ Rt)[..., 0, :])


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to column rotation matrices."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def random_rotation(rng: np.random.Generator, size=()) -> RigidTransform:
    """Haar-uniform rotations from normalised Gaussian quaternions; zero translation."""
    size = (size,) if isinstance(size, int) else tuple(size)
    q = rng.standard_normal(size + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    R = quaternion_to_matrix(q)
    return RigidTransform(torch.as_tensor(R), torch.zeros(size + (3,), dtype=DTYPE))
