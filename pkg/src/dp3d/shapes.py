"""Procedural template meshes used by the tests, demos and synthetic tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh


def icosahedron(radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Loop-style 1-to-4 subdivision of the icosahedron, projected to the sphere.

    Three subdivisions give 642 vertices and 1280 faces.
    """
    mesh = icosahedron()
    v, f = mesh.vertices.copy(), mesh.faces.copy()
    for _ in range(subdivisions):
        edges = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = (len(v) + inv.reshape(-1, 3))  # midpoints of edges (01, 12, 20)
        v = np.vstack([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.vstack([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return TriMesh(radius * v, f)


@dataclass(frozen=True, eq=False)
class ArticulatedShape:
    """A template with a known rigid-part decomposition.

    ``labels`` holds the part index of every vertex, ``pivots`` the joint
    location each part rotates about and ``parents`` the kinematic parent
    (``-1`` for the root).
    """

    mesh: TriMesh
    labels: np.ndarray
    pivots: np.ndarray
    parents: np.ndarray

    @property
    def n_parts(self) -> int:
        return len(self.pivots)


def hinged_cylinder(n_segments: int = 2, n_around: int = 24, rings_per_segment: int = 12,
                    radius: float = 0.5, segment_length: float = 2.0) -> ArticulatedShape:
    """Closed cylinder along z split into ``n_segments`` equal rigid parts.

    Parts are chained root-first from the bottom; each joint sits on the
    axis at the boundary between consecutive segments. The default two
    segments give 24 * 24 + 2 = 578 vertices.
    """
    n_rings = n_segments * rings_per_segment
    length = n_segments * segment_length
    # ring centres avoid the segment boundaries so every vertex has one clear owner
    z = (np.arange(n_rings) + 0.5) / n_rings * length
    theta = 2 * np.pi * np.arange(n_around) / n_around
    ring = np.stack([radius * np.cos(theta), radius * np.sin(theta)], 1)
    side = np.concatenate([np.column_stack([ring, np.full(n_around, zi)]) for zi in z])
    bottom, top = len(side), len(side) + 1
    v = np.vstack([side, [[0.0, 0.0, 0.0], [0.0, 0.0, length]]])

    faces = []
    for r in range(n_rings - 1):
        for j in range(n_around):
            a = r * n_around + j
            b = r * n_around + (j + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [[a, b, d], [a, d, c]]
    last = (n_rings - 1) * n_around
    for j in range(n_around):
        jn = (j + 1) % n_around
        faces.append([bottom, jn, j])
        faces.append([top, last + j, last + jn])
    v[:, 2] -= length / 2

    seg = np.clip(((v[:, 2] + length / 2) // segment_length).astype(int), 0, n_segments - 1)
    pivots = np.zeros((n_segments, 3))
    pivots[:, 2] = np.arange(n_segments) * segment_length - length / 2
    pivots[0, 2] = -length / 2 + segment_length / 2
    parents = np.arange(n_segments) - 1
    return ArticulatedShape(TriMesh(v, np.array(faces)), seg, pivots, parents)


def hinge_chain(n_hinges: int = 5, **kwargs) -> ArticulatedShape:
    """A cylinder with ``n_hinges`` joints, i.e. ``n_hinges + 1`` rigid segments."""
    kwargs.setdefault("rings_per_segment", 6)
    kwargs.setdefault("segment_length", 1.0)
    kwargs.setdefault("n_around", 16)
    kwargs.setdefault("radius", 0.3)
    return hinged_cylinder(n_segments=n_hinges + 1, **kwargs)
