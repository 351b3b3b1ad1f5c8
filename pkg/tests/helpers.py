"""Shared builders for the gradient suite, used by test_optim and test_acceptance."""

from contextlib import contextmanager

import numpy as np
import torch

from dp3d import losses
from dp3d.mesh import spectral_basis
from dp3d.model import DP3D, ModelConfig
from dp3d.optim import ParamSet, check_gradients
from dp3d.rigid import as_tensor
from dp3d.shapes import icosahedron

FD_STEP = 1e-5
FD_TOL = 1e-4

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def tiny_setup(uncertainty=False, seed=0, batch=3):
    mesh = icosahedron()
    basis = spectral_basis(mesh, 4)
    cfg = ModelConfig(n_parts=2, n_u=4, width=16, hidden=8, n_blocks=1, uncertainty=uncertainty)
    model = DP3D(mesh, basis, cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    # perturb the zero-initialised heads so every path carries gradient
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.as_tensor(rng.normal(scale=0.1, size=tuple(p.shape))))
    y = as_tensor(rng.normal(scale=0.5, size=(batch, mesh.n_vertices, 2)))
    z = torch.as_tensor(rng.uniform(size=(batch, mesh.n_vertices)) < 0.8)
    return model, y, z


@contextmanager
def frozen_arap_rotations(rotations):
    """Make every ARAP evaluation use the given rotations instead of refitting."""
    orig = losses.arap_rotations
    losses.arap_rotations = lambda x, term: rotations
    try:
        yield
    finally:
        losses.arap_rotations = orig


def term_closure(model, y, z, name, weights=None):
    weights = weights or losses.LossWeights()

    def f():
        out = model(y, z)
        return model.loss_terms(out, y, z, np.random.default_rng(7), weights)[name]

    return f


def total_closure(model, y, z, weights=None):
    weights = weights or losses.LossWeights()
    return lambda: model.loss(y, z, np.random.default_rng(7), weights)[0]


def current_rotations(model, y, z):
    with torch.no_grad():
        return losses.arap_rotations(model(y, z)["X"], model.arap)


def gradient_suite(max_coords=25):
    """Finite-difference reports for every loss term and the weighted total.

    ARAP rotations are frozen at their current values during the perturbed
    evaluations, matching the stop-gradient semantics of the loss.
    """
    reports = {}
    model, y, z = tiny_setup()
    params = ParamSet.from_module(model)
    R = current_rotations(model, y, z)
    with frozen_arap_rotations(R):
        for name in ("rep", "entropy", "canon", "arap"):
            ps = params
            if name == "entropy":
                ps = ParamSet(dict(model.named_parameters()), [n for n, _ in model.named_parameters() if n != "W"])
            elif name != "canon":
                ps = ParamSet(dict(model.named_parameters()), [n for n, _ in model.named_parameters()
                                                              if n.startswith("psi.")])
            reports[name] = check_gradients(term_closure(model, y, z, name), ps, FD_STEP, FD_TOL, max_coords)
        reports["total"] = check_gradients(total_closure(model, y, z), params, FD_STEP, FD_TOL, max_coords)
    hmodel, hy, hz = tiny_setup(uncertainty=True, seed=3)
    reports["hetero"] = check_gradients(term_closure(hmodel, hy, hz, "rep"), ParamSet.from_module(hmodel),
                                        FD_STEP, FD_TOL, max_coords)
    return reports
