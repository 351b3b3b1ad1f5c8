"""Soft parts and skinning on a hinged cylinder.

A random segmentation matrix W gives soft parts P = softmax(U W). Bending one
part with a rigid twist moves its vertices, and ARAP measures how much the
surface had to stretch to follow.
"""
import numpy as np
import torch

from dp3d.articulation import init_part_model, skin
from dp3d.losses import ArapTerm, loss_arap
from dp3d.mesh import normalize_mesh, spectral_basis
from dp3d.shapes import hinged_cylinder

rng = np.random.default_rng(0)

# %% Template and basis
shape = hinged_cylinder()
mesh = normalize_mesh(shape.mesh)
basis = spectral_basis(mesh, 32)
print(f"template: {mesh.n_vertices} vertices, ground-truth parts {np.bincount(shape.labels)}")

# %% Initial soft parts
model = init_part_model(basis, m=4, rng=rng)
P = model.segmentation()
print("vertices per hard part:", np.bincount(P.argmax(1).numpy(), minlength=4))
print(f"mean max membership {P.max(1).values.mean():.3f}")

# %% Rest pose is a fixed point
twists = torch.zeros(4, 6, dtype=torch.float64)
X0 = skin(mesh.vertices, P, twists, model.rest_logs)
print("rest pose equals template:", torch.equal(X0, torch.tensor(mesh.vertices)))

# %% Bend part 1 by 30 degrees about x
twists[1, 0] = np.deg2rad(30)
X = skin(mesh.vertices, P, twists, model.rest_logs)
moved = (X - X0).norm(dim=1)
print(f"largest displacement {moved.max():.3f}, median {moved.median():.3f}")

# %% Soft parts stretch the surface; a rigid motion of everything does not
arap = ArapTerm(mesh)
print(f"ARAP after bending part 1: {loss_arap(X, arap).item():.2e}")
twists[:] = 0
twists[:, 0] = np.deg2rad(30)
print(f"ARAP after rotating all parts together: {loss_arap(skin(mesh.vertices, P, twists, model.rest_logs), arap).item():.2e}")
