"""The full articulated model: segmentation, skinning, regressors and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import articulation, losses
from .mesh import SpectralBasis, TriMesh
from .networks import Canonicalizer, PoseRegressor, UncertaintyHead, vertex_twists
from .rigid import DTYPE, RigidTransform, as_tensor, se3_exp

VARIANTS = ("parts", "no_parts_linear", "parts_plus_blendshapes")


@dataclass
class ModelConfig:
    n_parts: int = articulation.DEFAULT_PARTS
    n_u: int = articulation.DEFAULT_N_U
    sigma_bar: float = articulation.DEFAULT_SIGMA_BAR
    variant: str = "parts"
    n_blend: int = 0
    width: int = 1024
    hidden: int = 256
    n_blocks: int = 6
    uncertainty: bool = False
    uncertainty_hidden: int = 64
    camera_scale: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_parts < 1:
            raise ValueError("n_parts must be >= 1")
        if self.n_u < 1:
            raise ValueError("n_u must be >= 1")
        if self.variant == "no_parts_linear" and self.n_blend < 1:
            self.n_blend = 10
        if self.variant == "parts_plus_blendshapes" and self.n_blend < 1:
            self.n_blend = 5
        if self.variant == "parts" and self.n_blend:
            raise ValueError("the plain parts variant takes no blendshapes")


class DP3D(nn.Module):
    """Template-based articulated reconstruction model.

    Given keypoints ``y`` (B, K, 2) and visibilities ``z`` (B, K), the
    regressor predicts a camera twist and one twist per part; the template
    is optionally deformed by blendshapes and then posed by linear blend
    skinning with the soft segmentation ``softmax(U W)``.
    """

    def __init__(self, template: TriMesh, basis: SpectralBasis, config: ModelConfig,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.template = template
        if basis.n_u < config.n_u:
            raise ValueError(f"basis has {basis.n_u} eigenvectors, {config.n_u} requested")
        basis = basis.truncate(config.n_u)
        self.basis = basis
        k = template.n_vertices
        self.register_buffer("V", as_tensor(template.vertices))
        self.register_buffer("U", as_tensor(basis.U))
        self.register_buffer("areas", as_tensor(basis.areas))
        self.arap = losses.ArapTerm(template)

        torch.manual_seed(int(rng.integers(2 ** 31)))
        mlp = dict(width=config.width, hidden=config.hidden, n_blocks=config.n_blocks)
        if config.variant == "no_parts_linear":
            self.W = None
            self.rest_logs = None
            self.phi = PoseRegressor(k, 0, config.n_blend, **mlp)
        else:
            pm = articulation.init_part_model(basis, config.n_parts, config.sigma_bar, rng)
            self.W = nn.Parameter(pm.W.clone())
            self.rest_logs = nn.Parameter(pm.rest_logs.clone())
            self.phi = PoseRegressor(k, config.n_parts, config.n_blend, **mlp)
        if config.n_blend:
            std = np.exp(-np.arange(config.n_u) / config.sigma_bar) * 1e-2
            Wb = rng.standard_normal((config.n_blend, config.n_u, 3)) * std[None, :, None]
            self.W_b = nn.Parameter(torch.as_tensor(Wb))
        else:
            self.W_b = None
        self.psi = Canonicalizer(k, **mlp)
        self.uncertainty = UncertaintyHead(config.n_u, config.uncertainty_hidden) if config.uncertainty else None
        self.log_scale = nn.Parameter(torch.zeros((), dtype=DTYPE)) if config.camera_scale else None

    # -- shape model ------------------------------------------------------

    def segmentation(self) -> torch.Tensor | None:
        if self.W is None:
            return None
        return articulation.part_segmentation(self.U, self.W)

    def shape(self, twists, alpha=None) -> torch.Tensor:
        """Object-frame vertices for part twists (B, M+1, 6) and blend coefficients."""
        base = self.V
        if self.W_b is not None:
            base = articulation.skin_linear(self.V, self.U, self.W_b, alpha)
        if self.W is None:
            return base if base.dim() == 3 else base.expand(twists.shape[0], *base.shape)
        return articulation.skin(base, self.segmentation(), twists[:, 1:], self.rest_logs)

    def forward(self, y, z) -> dict:
        twists, alpha = self.phi(y, z)
        return self.decode(twists, alpha)

    def decode(self, twists, alpha=None) -> dict:
        X = self.shape(twists, alpha)
        cam = se3_exp(twists[:, 0])
        return {"twists": twists, "alpha": alpha, "X": X, "cam": cam}

    @property
    def scale(self):
        return None if self.log_scale is None else torch.exp(self.log_scale)

    def project(self, out) -> torch.Tensor:
        return losses.project_ortho(out["X"], out["cam"], self.scale)

    # -- objectives -------------------------------------------------------

    def loss_terms(self, out, y, z, rng: np.random.Generator, weights: losses.LossWeights,
                   canon: bool = True) -> dict:
        eps = weights.pseudo_huber_eps
        scale = None if self.scale is None else self.scale.expand(out["X"].shape[0])
        terms = {}
        if self.uncertainty is not None:
            b = self.keypoint_scales(out)
            terms["rep"] = losses.loss_reprojection_hetero(out["X"], out["cam"], y, z, self.areas, b, eps,
                                                           weights.b_min, scale)
        else:
            terms["rep"] = losses.loss_reprojection(out["X"], out["cam"], y, z, self.areas, eps, scale)
        P = self.segmentation()
        if P is not None and weights.w_entropy > 0:
            terms["entropy"] = losses.loss_entropy(P)
        if canon and weights.w_canon > 0:
            terms["canon"] = losses.loss_canonicalization(out["X"], self.psi, rng, eps)
        if weights.w_arap > 0:
            terms["arap"] = losses.loss_arap(out["X"], self.arap, eps)
        return terms

    def keypoint_scales(self, out) -> torch.Tensor:
        P = self.segmentation()
        if P is None:
            vt = out["twists"][:, :1].expand(-1, self.V.shape[0], -1)
        else:
            vt = vertex_twists(P, out["twists"][:, 1:])
        return self.uncertainty(self.U, vt)

    def loss(self, y, z, rng, weights: losses.LossWeights):
        out = self(y, z)
        return losses.loss_total(self.loss_terms(out, y, z, rng, weights), weights)

    def part_model(self) -> articulation.PartModel | None:
        if self.W is None:
            return None
        return articulation.PartModel(self.W.detach(), self.rest_logs.detach(), self.basis)

    @torch.no_grad()
    def predict(self, y, z, batch_size: int = 512):
        """Eval-mode camera-frame vertices (B, K, 3) plus the raw outputs."""
        was_training = self.training
        self.eval()
        try:
            outs = []
            for i in range(0, len(y), batch_size):
                out = self(as_tensor(y[i:i + batch_size]), torch.as_tensor(z[i:i + batch_size]))
                outs.append(out)
        finally:
            self.train(was_training)
        X = torch.cat([o["X"] for o in outs])
        R = torch.cat([o["cam"].R for o in outs])
        T = torch.cat([o["cam"].T for o in outs])
        twists = torch.cat([o["twists"] for o in outs])
        cam = RigidTransform(R, T)
        X_cam = X @ R + T[:, None, :]
        if self.scale is not None:
            X_cam = X_cam * self.scale
        return {"X": X, "cam": cam, "X_cam": X_cam, "twists": twists}
