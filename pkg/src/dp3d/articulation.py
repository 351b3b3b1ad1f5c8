"""Soft part segmentation on the LBO basis and linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .mesh import SpectralBasis
from .rigid import DTYPE, as_tensor, compose, se3_exp

DEFAULT_PARTS = 10
DEFAULT_SIGMA_BAR = 32.0
DEFAULT_N_U = 64


@dataclass
class PartModel:
    """Segmentation weights ``W`` (N_u, M) and rest-pose logs (M, 6).

    ``rest_logs[m]`` is the twist of the *inverse* rest pose of part ``m``.
    """

    W: torch.Tensor
    rest_logs: torch.Tensor
    basis: SpectralBasis

    @property
    def n_parts(self) -> int:
        return self.W.shape[1]

    @property
    def n_u(self) -> int:
        return self.W.shape[0]

    def segmentation(self) -> torch.Tensor:
        return part_segmentation(self.basis.U, self.W)


@dataclass
class PoseParams:
    """``twists[0]`` is the camera, ``twists[1:]`` the M parts."""

    twists: torch.Tensor
    blend_coeffs: torch.Tensor | None = None

    @property
    def camera(self) -> torch.Tensor:
        return self.twists[..., 0, :]

    @property
    def parts(self) -> torch.Tensor:
        return self.twists[..., 1:, :]


@dataclass
class BlendshapeModel:
    """D displacement fields, each a linear image of the LBO basis.

    ``W_b`` has shape (D, N_u, 3): blendshape ``d`` moves vertex ``k`` by
    ``U[k] @ W_b[d]``.
    """

    W_b: torch.Tensor

    @property
    def n_shapes(self) -> int:
        return self.W_b.shape[0]


def init_part_model(basis: SpectralBasis, m: int = DEFAULT_PARTS, sigma_bar: float = DEFAULT_SIGMA_BAR,
                    rng: np.random.Generator | None = None) -> PartModel:
    """Draw ``W[i, m] ~ N(0, std=exp(-i / sigma_bar) / sqrt(M))``.

    Row ``i`` belongs to the ``i``-th eigenfunction, so high frequencies start
    small. Rest poses start at the identity.
    """
    if m < 1:
        raise ValueError(f"number of parts must be >= 1, got {m}")
    if sigma_bar <= 0:
        raise ValueError(f"sigma_bar must be positive, got {sigma_bar}")
    rng = np.random.default_rng() if rng is None else rng
    std = np.exp(-np.arange(basis.n_u) / sigma_bar) / np.sqrt(m)
    W = rng.standard_normal((basis.n_u, m)) * std[:, None]
    return PartModel(torch.as_tensor(W), torch.zeros(m, 6, dtype=DTYPE), basis)


def part_segmentation(U, W) -> torch.Tensor:
    """Row-stochastic ``softmax(U @ W)`` over the part axis."""
    return torch.softmax(as_tensor(U) @ as_tensor(W), dim=-1)


def part_transforms(part_twists, rest_logs):
    """Per-part transforms ``g_m o g_0m^-1`` as (R, T) of shapes (..., M, 3, 3), (..., M, 3)."""
    g = se3_exp(part_twists)
    g0_inv = se3_exp(rest_logs)
    c = compose(g0_inv, g)
    return c.R, c.T


def skin(vertices, P, part_twists, rest_logs) -> torch.Tensor:
    """Linear blend skinning in the object frame.

    Parameters
    ----------
    vertices : (K, 3) or (B, K, 3)
        Template (possibly blendshape-deformed) vertex positions.
    P : (K, M)
        Part memberships.
    part_twists : (M, 6) or (B, M, 6)
        Twists of the part transforms, camera excluded.
    rest_logs : (M, 6)
        Twists of the inverse rest poses.

    Returns
    -------
    X : (K, 3) or (B, K, 3)
        ``X[k] = sum_m P[k, m] * g_m(g_0m^-1(V[k]))``.
    """
    V = as_tensor(vertices)
    P = as_tensor(P)
    R, T = part_transforms(as_tensor(part_twists), as_tensor(rest_logs))
    # blend displacements rather than positions, so identity transforms return V bit-exactly
    eye = torch.eye(3, dtype=R.dtype)
    moved = torch.einsum("...kd,km,...mde->...ke", V, P, R - eye)
    return V + moved + torch.einsum("km,...me->...ke", P, T)


def skin_pose(vertices, model: PartModel, pose: PoseParams) -> torch.Tensor:
    """:func:`skin` with the segmentation and rest poses taken from ``model``."""
    return skin(vertices, model.segmentation(), pose.parts, model.rest_logs)


def blend_displacement(U, W_b, alpha) -> torch.Tensor:
    """``sum_d alpha[d] * U @ W_b[d]`` for ``alpha`` of shape (D,) or (B, D)."""
    return torch.einsum("...d,dnc,kn->...kc", as_tensor(alpha), as_tensor(W_b), as_tensor(U))


def skin_linear(vertices, U, W_b, alpha) -> torch.Tensor:
    """Template plus the alpha-weighted blendshape displacement."""
    return as_tensor(vertices) + blend_displacement(U, W_b, alpha)
