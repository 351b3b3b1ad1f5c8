"""Training objectives: reprojection, canonicalization, ARAP and entropy.

Batched inputs carry a leading instance axis; every loss is averaged over
instances. Robust penalties use the pseudo-Huber function wherever a plain
norm would appear.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .mesh import TriMesh
from .rigid import DTYPE, RigidTransform, as_tensor, random_rotation


@dataclass
class LossWeights:
    w_entropy: float = 0.001
    w_canon: float = 0.1
    w_arap: float = 0.3
    pseudo_huber_eps: float = 0.01
    b_min: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        for name in ("w_entropy", "w_canon", "w_arap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pseudo_huber_eps <= 0 or self.b_min <= 0:
            raise ValueError("pseudo_huber_eps and b_min must be positive")


def pseudo_huber_sq(r2, eps: float) -> torch.Tensor:
    """Pseudo-Huber penalty of a norm given its square ``r2``.

    Working from the square keeps the gradient finite at zero residual.
    """
    return eps * (torch.sqrt(1 + r2 / eps ** 2) - 1)


def pseudo_huber(r, eps: float) -> torch.Tensor:
    r = as_tensor(r)
    return pseudo_huber_sq(r * r, eps)


def _batched(x, *others):
    """Add a leading batch axis to unbatched (K, d) inputs."""
    x = as_tensor(x)
    if x.dim() == 2:
        return True, x[None], [None if o is None else as_tensor(o)[None] for o in others]
    return False, x, [None if o is None else as_tensor(o) for o in others]


def project_ortho(x, cam: RigidTransform, scale=None) -> torch.Tensor:
    """Orthographic image coordinates of ``x @ R0 + T0``.

    ``scale`` is an optional isotropic image-scale factor (off by default).
    """
    x = as_tensor(x)
    p = x @ cam.R + cam.T[..., None, :]
    uv = p[..., :2]
    if scale is not None:
        uv = as_tensor(scale)[..., None, None] * uv
    return uv


def _visibility_weights(z, areas):
    w = as_tensor(z).to(DTYPE) * as_tensor(areas)
    denom = w.sum(-1)
    if torch.any(denom <= 0):
        bad = int(torch.nonzero(denom.reshape(-1) <= 0)[0, 0])
        raise ValueError(f"instance {bad} has no visible keypoints")
    return w, denom


def reprojection_residuals(x, cam, y, scale=None) -> torch.Tensor:
    """Squared 2D reprojection error per keypoint."""
    d = as_tensor(y) - project_ortho(x, cam, scale)
    return (d * d).sum(-1)


def loss_reprojection(x, cam: RigidTransform, y, z, areas, eps: float = 0.01, scale=None) -> torch.Tensor:
    """Area- and visibility-weighted mean pseudo-Huber reprojection error."""
    x = as_tensor(x)
    y, z = as_tensor(y), torch.as_tensor(z)
    rho = pseudo_huber_sq(reprojection_residuals(x, cam, y, scale), eps)
    w, denom = _visibility_weights(z, areas)
    per_instance = (w * rho).sum(-1) / denom
    return per_instance.mean()


def loss_reprojection_hetero(x, cam: RigidTransform, y, z, areas, b, eps: float = 0.01,
                             b_min: float = 0.1, scale=None) -> torch.Tensor:
    """Laplace negative log-likelihood ``log b + rho / max(b, b_min)`` per keypoint.

    Only the denominator is clipped; ``log b`` sees the raw scale.
    """
    b = as_tensor(b)
    rho = pseudo_huber_sq(reprojection_residuals(x, cam, as_tensor(y), scale), eps)
    nll = torch.log(b) + rho / torch.clamp(b, min=b_min)
    w, denom = _visibility_weights(torch.as_tensor(z), areas)
    return ((w * nll).sum(-1) / denom).mean()


def loss_canonicalization(x_hat, psi, rng: np.random.Generator, eps: float = 0.01) -> torch.Tensor:
    """Mean over vertices of ``rho(|x_hat - psi(x_hat @ R~)|)``, one fresh R~ per instance."""
    unbatched, x_hat, _ = _batched(x_hat)
    rot = random_rotation(rng, size=x_hat.shape[0])
    pred = psi(x_hat @ rot.R)
    d = x_hat - pred
    per_instance = pseudo_huber_sq((d * d).sum(-1), eps).mean(-1)
    return per_instance.mean()


class ArapTerm:
    """Precomputed one-ring structure of a template for the ARAP energy.

    Edge weights are one third of the summed area of the faces incident to
    the edge, divided by the total surface area.
    """

    def __init__(self, template: TriMesh):
        f = template.faces
        fa = template.face_areas()
        e = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv.ravel(), np.repeat(fa, 3) / 3.0)
        w /= fa.sum()
        k = template.n_vertices
        degree = np.bincount(uniq.ravel(), minlength=k)
        low = np.flatnonzero(degree < 2)
        if low.size:
            raise ValueError(f"vertex {low[0]} has {degree[low[0]]} neighbours; ARAP needs at least 2")
        # directed edges k -> q in both orientations
        self.src = torch.as_tensor(np.concatenate([uniq[:, 0], uniq[:, 1]]))
        self.dst = torch.as_tensor(np.concatenate([uniq[:, 1], uniq[:, 0]]))
        self.weights = torch.as_tensor(np.concatenate([w, w]))
        self.n_vertices = k
        V = as_tensor(template.vertices)
        self.rest_edges = V[self.dst] - V[self.src]


def arap_rotations(x, term: ArapTerm) -> torch.Tensor:
    """Per-vertex rotations best mapping deformed one-ring edges back onto the template.

    Solves ``min_R sum_q w |V_kq - X_kq R|^2`` by SVD with the determinant
    fixed to +1. The result carries no gradient.
    """
    unbatched, x, _ = _batched(x)
    with torch.no_grad():
        xe = x[:, term.dst] - x[:, term.src]
        outer = term.weights[:, None, None] * term.rest_edges[:, :, None] * xe[:, :, None, :]
        N = torch.zeros(x.shape[0], term.n_vertices, 3, 3, dtype=DTYPE)
        N.index_add_(1, term.src, outer)
        U, _, Vh = torch.linalg.svd(N)
        R = Vh.transpose(-1, -2) @ U.transpose(-1, -2)
        det = torch.linalg.det(R)
        D = torch.ones(*det.shape, 3, dtype=DTYPE)
        D[..., 2] = torch.sign(det)
        R = Vh.transpose(-1, -2) @ (D[..., :, None] * U.transpose(-1, -2))
    return R[0] if unbatched else R


def loss_arap(x, term: ArapTerm, eps: float = 0.01, rotations=None) -> torch.Tensor:
    """As-rigid-as-possible energy of the deformation template -> ``x``.

    Rotations are fitted per vertex (see :func:`arap_rotations`) unless given,
    and gradients do not flow through them.
    """
    unbatched, x, _ = _batched(x)
    if rotations is None:
        rotations = arap_rotations(x, term)
    elif unbatched:
        rotations = as_tensor(rotations)[None]
    xe = x[:, term.dst] - x[:, term.src]
    R = rotations[:, term.src]
    d = term.rest_edges - (xe[:, :, None, :] @ R)[:, :, 0, :]
    rho = pseudo_huber_sq((d * d).sum(-1), eps)
    return (term.weights * rho).sum(-1).mean()


def loss_entropy(P) -> torch.Tensor:
    """Mean per-vertex entropy of the part distribution (``0 log 0 = 0``)."""
    P = as_tensor(P)
    return -torch.special.xlogy(P, P).sum(-1).mean(-1)


TERMS = ("rep", "entropy", "canon", "arap")


def loss_total(terms: dict, weights: LossWeights):
    """Weighted sum of the available terms.

    ``terms`` maps ``rep``/``entropy``/``canon``/``arap`` to scalar tensors;
    missing terms count as zero. Returns the total and a float breakdown.
    """
    total = terms["rep"]
    for name in ("entropy", "canon", "arap"):
        if name in terms and terms[name] is not None:
            total = total + getattr(weights, f"w_{name}") * terms[name]
    breakdown = {name: float(terms[name].detach()) for name in TERMS if terms.get(name) is not None}
    breakdown["total"] = float(total.detach())
    return total, breakdown
