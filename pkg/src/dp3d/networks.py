"""Keypoint-to-pose regressor, canonicalizer and per-keypoint uncertainty head."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .rigid import DTYPE, as_tensor


def _layer(n_in, n_out):
    return [nn.Linear(n_in, n_out, dtype=DTYPE), nn.BatchNorm1d(n_out, dtype=DTYPE), nn.ReLU()]


class ResBlock(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(*_layer(width, hidden), *_layer(hidden, hidden), *_layer(hidden, width))

    def forward(self, x):
        return x + self.net(x)


class ResidualMLP(nn.Module):
    """Fully-connected lift to ``width`` followed by bottleneck residual blocks.

    Every hidden layer is followed by batch normalisation and ReLU; the
    output head is a plain linear layer. ``zero_head`` starts the head at
    zero so an untrained network predicts zeros.
    """

    def __init__(self, input_dim: int, output_dim: int, width: int = 1024, hidden: int = 256,
                 n_blocks: int = 6, zero_head: bool = True):
        super().__init__()
        self.input_dim, self.output_dim = input_dim, output_dim
        self.stem = nn.Sequential(*_layer(input_dim, width))
        self.blocks = nn.Sequential(*[ResBlock(width, hidden) for _ in range(n_blocks)])
        self.head = nn.Linear(width, output_dim, dtype=DTYPE)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input of size {self.input_dim}, got {x.shape[-1]}")
        return self.head(self.blocks(self.stem(x)))


def encode_keypoints(y, z) -> torch.Tensor:
    """Centre on the visible mean, zero invisible entries and append the flags.

    Returns a (B, 3K) tensor laid out per keypoint as ``(u*z, v*z, z)``.
    """
    y = as_tensor(y)
    z = torch.as_tensor(z).to(DTYPE)
    if y.dim() == 2:
        y, z = y[None], z[None]
    # masked garbage must not leak, even NaN
    y = torch.where(z[..., None] > 0, y, torch.zeros_like(y))
    centre = (y * z[..., None]).sum(-2) / z.sum(-1, keepdim=True).clamp(min=1)
    yc = (y - centre[:, None, :]) * z[..., None]
    return torch.cat([yc, z[..., None]], -1).reshape(y.shape[0], -1)


class PoseRegressor(nn.Module):
    """Maps keypoints and visibilities to ``M + 1`` twists (camera first).

    With ``n_blend > 0`` it also predicts blendshape coefficients.
    """

    def __init__(self, n_keypoints: int, n_parts: int, n_blend: int = 0, **mlp_kwargs):
        super().__init__()
        self.n_keypoints, self.n_parts, self.n_blend = n_keypoints, n_parts, n_blend
        self.mlp = ResidualMLP(3 * n_keypoints, 6 * (n_parts + 1) + n_blend, **mlp_kwargs)

    def forward(self, y, z):
        x = encode_keypoints(y, z)
        if x.shape[-1] != self.mlp.input_dim:
            raise ValueError(f"expected {self.n_keypoints} keypoints, got {x.shape[-1] // 3}")
        out = self.mlp(x)
        n_tw = 6 * (self.n_parts + 1)
        twists = out[:, :n_tw].reshape(-1, self.n_parts + 1, 6)
        alpha = out[:, n_tw:] if self.n_blend else None
        return twists, alpha


class Canonicalizer(nn.Module):
    """Predicts the unrotated shape from a randomly rotated one, (B, K, 3) -> (B, K, 3)."""

    def __init__(self, n_points: int, **mlp_kwargs):
        super().__init__()
        self.n_points = n_points
        self.mlp = ResidualMLP(3 * n_points, 3 * n_points, **mlp_kwargs)

    def forward(self, x):
        if x.shape[-2:] != (self.n_points, 3):
            raise ValueError(f"expected shape (B, {self.n_points}, 3), got {tuple(x.shape)}")
        return self.mlp(x.reshape(x.shape[0], -1)).reshape(x.shape)


class UncertaintyHead(nn.Module):
    """Two-layer perceptron with softplus output giving per-keypoint scales ``b > 0``.

    Input per keypoint: its LBO descriptor (row of ``U``) concatenated with
    the twist of its blended vertex transform.
    """

    def __init__(self, n_u: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(n_u + 6, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, lbo_rows, vertex_twists):
        lbo_rows = as_tensor(lbo_rows)
        vertex_twists = as_tensor(vertex_twists)
        if vertex_twists.dim() == 3 and lbo_rows.dim() == 2:
            lbo_rows = lbo_rows.expand(vertex_twists.shape[0], *lbo_rows.shape)
        h = F.relu(self.fc1(torch.cat([lbo_rows, vertex_twists], -1)))
        return F.softplus(self.fc2(h))[..., 0]


def vertex_twists(P, part_twists) -> torch.Tensor:
    """Per-vertex transform twist ``sum_m P[k, m] h_m`` (blend in the Lie algebra)."""
    return torch.einsum("km,...mc->...kc", as_tensor(P), as_tensor(part_twists))
