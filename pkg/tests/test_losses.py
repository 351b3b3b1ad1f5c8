import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dp3d import losses
from dp3d.losses import (ArapTerm, LossWeights, arap_rotations, loss_arap, loss_canonicalization, loss_entropy,
                         loss_reprojection, loss_reprojection_hetero, loss_total, project_ortho, pseudo_huber)
from dp3d.mesh import TriMesh, barycell_areas
from dp3d.rigid import RigidTransform, as_tensor, random_rotation, se3_exp

D = torch.float64


def cam(R=None, T=None):
    R = np.eye(3) if R is None else R
    T = np.zeros(3) if T is None else T
    return RigidTransform.from_arrays(R, T)


def rz(deg):
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# -- projection ----------------------------------------------------------

def test_project_identity():
    assert project_ortho(np.array([[1.0, 2, 3]]), cam()).tolist() == [[1.0, 2.0]]


def test_project_depth_translation():
    x = np.array([[1.0, 2, 3]])
    assert project_ortho(x, cam(T=[0, 0, 100])).tolist() == [[1.0, 2.0]]


def test_project_quarter_turn():
    # row convention: a 90 degree turn about z sends x to y
    uv = project_ortho(np.array([[1.0, 0, 0]]), cam(R=rz(90).T))
    assert torch.allclose(uv, torch.tensor([[0.0, 1.0]], dtype=D), atol=1e-15)


# -- reprojection --------------------------------------------------------

def test_perfect_reprojection_zero(sphere, rng):
    c = se3_exp(rng.normal(size=6))
    y = project_ortho(sphere.vertices, c)
    z = np.ones(sphere.n_vertices, bool)
    assert loss_reprojection(sphere.vertices, c, y, z, barycell_areas(sphere)) == 0


def test_area_rescaling_invariance(sphere, rng):
    c = se3_exp(rng.normal(size=6))
    y = rng.normal(size=(sphere.n_vertices, 2))
    z = rng.uniform(size=sphere.n_vertices) < 0.5
    a = barycell_areas(sphere)
    l1 = loss_reprojection(sphere.vertices, c, y, z, a)
    l7 = loss_reprojection(sphere.vertices, c, y, z, 7 * a)
    assert abs(l1 - l7) <= 1e-12 * abs(l1)


def test_quadratic_regime_closed_form():
    eps, r = 1e3, 1.0
    x = np.zeros((2, 3))
    y = np.array([[0.0, 0.0], [r, 0.0]])
    loss = loss_reprojection(x, cam(), y, np.ones(2, bool), np.ones(2), eps).item()
    closed = eps * (math.sqrt(1 + (r / eps) ** 2) - 1) / 2
    assert abs(loss - closed) < 1e-6
    assert abs(loss - r * r / (4 * eps)) < 1e-6


def test_no_visible_keypoints():
    with pytest.raises(ValueError, match="no visible"):
        loss_reprojection(np.zeros((3, 3)), cam(), np.zeros((3, 2)), np.zeros(3, bool), np.ones(3))


def test_invisible_keypoints_ignored(rng):
    x = rng.normal(size=(5, 3))
    y = project_ortho(x, cam()).numpy()
    z = np.array([1, 1, 1, 0, 0], bool)
    y[3:] += 100
    assert loss_reprojection(x, cam(), y, z, np.ones(5)) == 0


def test_pseudo_huber_regimes():
    eps = 0.01
    assert abs(pseudo_huber(1e-4, eps).item() - 1e-8 / (2 * eps)) < 1e-10
    assert abs(pseudo_huber(10.0, eps).item() - (10.0 - eps)) < 1e-5


# -- heteroscedastic -----------------------------------------------------

def residual_for_rho(rho, eps):
    return eps * math.sqrt((1 + rho / eps) ** 2 - 1)


def test_hetero_argmin_equals_residual():
    eps = 0.01
    r = residual_for_rho(0.5, eps)
    x = np.zeros((1, 3))
    y = np.array([[r, 0.0]])
    grid = np.linspace(0.2, 2.0, 1801)
    vals = [loss_reprojection_hetero(x, cam(), y, np.ones(1, bool), np.ones(1), np.array([b]), eps).item()
            for b in grid]
    best = grid[int(np.argmin(vals))]
    assert abs(best - 0.5) <= grid[1] - grid[0]


def test_hetero_clips_denominator_only():
    eps, b, b_min = 0.01, 0.05, 0.1
    r = residual_for_rho(0.3, eps)
    x = np.zeros((1, 3))
    y = np.array([[0.0, r]])
    val = loss_reprojection_hetero(x, cam(), y, np.ones(1, bool), np.ones(1), np.array([b]), eps, b_min).item()
    assert abs(val - (math.log(b) + 0.3 / b_min)) < 1e-12


def test_hetero_default_b_min():
    assert LossWeights().b_min == 0.1


# -- canonicalization ----------------------------------------------------

def test_canon_perfect_canonicalizer(rng):
    x = as_tensor(rng.normal(size=(3, 20, 3)))
    R = random_rotation(np.random.default_rng(9), size=3).R

    def psi(xr):
        return xr @ R.transpose(-1, -2)

    assert loss_canonicalization(x, psi, np.random.default_rng(9)).item() < 1e-9


def test_canon_identity_draw(rng, monkeypatch):
    monkeypatch.setattr(losses, "random_rotation", lambda g, size: RigidTransform.identity((size,)))
    x = as_tensor(rng.normal(size=(2, 10, 3)))
    assert loss_canonicalization(x, lambda v: v, rng).item() == 0


def test_canon_zero_map(rng):
    x = as_tensor(rng.normal(size=(10, 3)))
    got = loss_canonicalization(x, lambda v: torch.zeros_like(v), rng).item()
    eps = 0.01
    direct = np.mean([eps * (math.sqrt(1 + (np.linalg.norm(p) / eps) ** 2) - 1) for p in x.numpy()])
    assert abs(got - direct) < 1e-12


# -- ARAP ----------------------------------------------------------------

def test_arap_weights_area_proportional(sphere):
    term = ArapTerm(sphere)
    # each face contributes a third of its area to each of its 3 edges, both directions
    assert abs(term.weights.sum().item() - 2.0) < 1e-12


def test_arap_rigid_motion_zero(sphere, rng):
    g = se3_exp(rng.normal(size=6))
    X = as_tensor(sphere.vertices) @ g.R + g.T
    assert loss_arap(X, ArapTerm(sphere)).item() < 1e-10


def test_arap_stretch_positive(sphere):
    X = sphere.vertices.copy()
    X[:, 0] *= 2
    assert loss_arap(X, ArapTerm(sphere)).item() > 1e-3


def test_arap_invariant_to_rigid_motion(sphere, rng):
    term = ArapTerm(sphere)
    X = as_tensor(sphere.vertices + 0.05 * rng.normal(size=sphere.vertices.shape))
    g = se3_exp(rng.normal(size=6))
    assert abs(loss_arap(X, term) - loss_arap(X @ g.R + g.T, term)).item() < 1e-10


def test_arap_needs_two_neighbours():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]])
    f = np.array([[0, 1, 2], [3, 4, 5]])
    ArapTerm(TriMesh(v, f))  # every vertex of a lone triangle has two neighbours
    with pytest.raises(ValueError, match="neighbours"):
        v2 = np.vstack([v, [[9.0, 9, 9]]])
        ArapTerm(TriMesh(v2, np.vstack([f, [[6, 0, 1]]])[:2]))


def grid_rotations(axis_step=5.0, angle_step=1.0):
    """Brute-force rotation set: axes on a lat/long grid times angles in 1 degree steps."""
    lat = np.deg2rad(np.arange(0, 90 + 1e-9, axis_step))
    lon = np.deg2rad(np.arange(0, 360, axis_step))
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    axes = np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], -1).reshape(-1, 3)
    axes = np.unique(np.round(axes, 12), axis=0)
    angles = np.deg2rad(np.arange(-180, 180, angle_step))
    for a in axes:
        K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        s, c = np.sin(angles)[:, None, None], np.cos(angles)[:, None, None]
        yield np.eye(3) + s * K + (1 - c) * (K @ K)  # column rotations


def test_arap_rotation_matches_grid_search():
    # tetrahedron: every vertex has exactly 3 neighbours
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0.2, 1, 0], [0.3, 0.3, 1]])
    F = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    mesh = TriMesh(V, F)
    Rz = rz(45).T  # row convention
    X = V @ Rz
    term = ArapTerm(mesh)
    R = arap_rotations(as_tensor(X), term)[0].numpy()
    # fitted R maps deformed edges back: V_kq = X_kq R, so R is the inverse rotation
    assert np.abs(R - Rz.T).max() < 1e-9

    sel = (term.src == 0).numpy()
    rest = term.rest_edges.numpy()[sel]
    xe = (X[term.dst.numpy()] - X[term.src.numpy()])[sel]
    w = term.weights.numpy()[sel]

    def residual(Rrow):
        return np.sum(w[:, None] * (rest - xe @ Rrow) ** 2)

    best = min(np.min(np.einsum("e,ne->n", w, ((rest[None] - np.einsum("ed,ndf->nef", xe, Rc.transpose(0, 2, 1))) ** 2).sum(-1)))
               for Rc in grid_rotations())
    fit = residual(R)
    assert fit < 1e-10
    assert fit <= best + 1e-9


def test_arap_frozen_rotations_argument(sphere, rng):
    term = ArapTerm(sphere)
    X = as_tensor(sphere.vertices + 0.02 * rng.normal(size=sphere.vertices.shape))
    R = arap_rotations(X, term)
    assert torch.equal(loss_arap(X, term), loss_arap(X, term, rotations=R))


# -- entropy and total ---------------------------------------------------

@pytest.mark.parametrize("M", [2, 7, 10])
def test_entropy_uniform(M):
    P = torch.full((50, M), 1.0 / M, dtype=D)
    assert abs(loss_entropy(P).item() - math.log(M)) < 1e-14


def test_entropy_ln10_value():
    P = torch.full((5, 10), 0.1, dtype=D)
    assert abs(loss_entropy(P).item() - 2.302585092994046) < 1e-14


def test_entropy_one_hot():
    assert loss_entropy(torch.eye(4, dtype=D)).item() == 0


def test_entropy_half_half_row():
    P = torch.zeros(1, 5, dtype=D)
    P[0, :2] = 0.5
    assert abs(loss_entropy(P).item() - math.log(2)) < 1e-15


def test_total_defaults():
    w = LossWeights()
    assert (w.w_entropy, w.w_arap, w.w_canon) == (0.001, 0.3, 0.1)


def terms():
    return {k: torch.tensor(v, dtype=D) for k, v in dict(rep=0.7, entropy=1.3, canon=0.25, arap=0.4).items()}


def test_total_zero_weights():
    total, parts = loss_total(terms(), LossWeights(0, 0, 0))
    assert total.item() == 0.7 and parts["total"] == 0.7


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_linear_in_arap_weight(we, wc, wa):
    t = terms()
    a, _ = loss_total(t, LossWeights(we, wc, wa))
    b, _ = loss_total(t, LossWeights(we, wc, 2 * wa))
    assert abs((b - a).item() - wa * 0.4) < 1e-12


def test_total_breakdown_keys():
    _, parts = loss_total(terms(), LossWeights())
    assert set(parts) == {"rep", "entropy", "canon", "arap", "total"}


@pytest.mark.parametrize("kw", [dict(w_arap=-1), dict(pseudo_huber_eps=0), dict(b_min=-0.1),
                                dict(w_canon=float("nan"))])
def test_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_losses_nonnegative_and_finite(sphere, rng):
    term = ArapTerm(sphere)
    X = as_tensor(sphere.vertices + 0.1 * rng.normal(size=sphere.vertices.shape))
    y = rng.normal(size=(sphere.n_vertices, 2))
    z = np.ones(sphere.n_vertices, bool)
    a = barycell_areas(sphere)
    vals = [loss_reprojection(X, cam(), y, z, a), loss_arap(X, term), loss_entropy(torch.softmax(X, -1)),
            loss_canonicalization(X, lambda v: v, rng)]
    assert all(torch.isfinite(v) and v >= 0 for v in vals)
