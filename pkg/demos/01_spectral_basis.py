"""Spectral basis of a sphere.

The low Laplace-Beltrami eigenvalues of the unit sphere are l(l+1), each with
multiplicity 2l+1. A subdivided icosahedron gets close to that.
"""
import numpy as np

from dp3d.mesh import barycell_areas, spectral_basis
from dp3d.shapes import icosphere

# %% Build the mesh
sphere = icosphere(3)
print(f"icosphere: {sphere.n_vertices} vertices, {len(sphere.faces)} faces")
print(f"surface area {barycell_areas(sphere).sum():.4f} (exact 4*pi = {4 * np.pi:.4f})")

# %% First nine eigenvalues
basis = spectral_basis(sphere, 9)
for i, lam in enumerate(basis.lambdas):
    print(f"lambda_{i} = {lam:9.5f}")

# %% The basis is orthonormal under the lumped mass matrix
gram = basis.U.T @ (basis.areas[:, None] * basis.U)
print("max |U^T A U - I| =", np.abs(gram - np.eye(9)).max())

# %% The first function is constant; the next three are nearly linear in x, y, z
coef, *_ = np.linalg.lstsq(sphere.vertices, basis.U[:, 1:4], rcond=None)
fit = sphere.vertices @ coef
print("linear fit residual of modes 1..3:", np.abs(fit - basis.U[:, 1:4]).max())
