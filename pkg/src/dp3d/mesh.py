"""Triangle meshes: I/O, cotangent Laplacian, lumped mass and the
Laplace-Beltrami eigenbasis."""

from __future__ import annotations

import hashlib
import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

logger = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
# Above this vertex count the basis is computed with sparse shift-invert Lanczos.
DENSE_EIGEN_LIMIT = 3000


class MeshError(ValueError):
    """Invalid mesh data or a malformed mesh file."""


class SpectralError(RuntimeError):
    """The eigensolver failed to converge."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with validated topology.

    Parameters
    ----------
    vertices : array_like, shape (K, 3)
        Vertex positions in model units.
    faces : array_like, shape (F, 3)
        Zero-based vertex indices of each triangle.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (K, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertices contain non-finite values")
        bad = np.flatnonzero(((f < 0) | (f >= len(v))).any(axis=1))
        if bad.size:
            raise MeshError(f"face {bad[0]}: vertex index out of range [0, {len(v)})")
        areas = _face_areas(v, f)
        bad = np.flatnonzero(areas <= MIN_FACE_AREA)
        if bad.size:
            raise MeshError(f"face {bad[0]}: degenerate triangle (area {areas[bad[0]]:.3g})")
        edges = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            e = uniq[np.argmax(counts)]
            raise MeshError(f"edge ({e[0]}, {e[1]}) is shared by {counts.max()} faces")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.hexdigest()

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)


def _face_areas(v, f):
    if len(f) == 0:
        return np.zeros(0)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Centre the bounding box at the origin and scale its diagonal to 1."""
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    return mesh.with_vertices((mesh.vertices - 0.5 * (lo + hi)) / np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_mesh(path) -> TriMesh:
    """Read a Wavefront OBJ or ASCII PLY triangle mesh.

    Only vertex positions and triangular faces are read. Polygons with more
    than three corners are rejected rather than triangulated.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _read_obj(path)
    elif suffix == ".ply":
        vertices, faces = _read_ply(path)
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r} (expected .obj or .ply)")
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    return TriMesh(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_obj(path):
    vertices, faces, face_lines = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex record") from exc
                if len(vertices[-1]) != 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif parts[0] == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: face {len(faces)} has {len(corners)} corners, only triangles are supported")
                face = []
                for c in corners:
                    try:
                        idx = int(c.split("/")[0])
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: bad face index {c!r}") from exc
                    if idx == 0:
                        raise MeshError(f"{path}:{lineno}: face {len(faces)} uses index 0 (OBJ indices are 1-based)")
                    # negative indices are relative to the vertices read so far
                    face.append(idx - 1 if idx > 0 else len(vertices) + idx)
                faces.append(face)
                face_lines.append(lineno)
    n = len(vertices)
    for fi, face in enumerate(faces):
        if any(i < 0 or i >= n for i in face):
            raise MeshError(f"{path}:{face_lines[fi]}: face {fi}: vertex index out of range [1, {n}]")
    return vertices, faces


def _read_ply(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshError(f"{path}: only ASCII PLY is supported") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}:1: missing 'ply' magic")
    elements = []  # (name, count, [property names])
    body_start = None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MeshError(f"{path}:{lineno}: only ASCII PLY is supported, got {parts[1]}")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"{path}:{lineno}: property before element")
            elements[-1][2].append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
        else:
            raise MeshError(f"{path}:{lineno}: unexpected header line {line!r}")
    if body_start is None:
        raise MeshError(f"{path}: missing end_header")

    vertices, faces = [], []
    cursor = body_start
    for name, count, props in elements:
        for i in range(count):
            if cursor >= len(lines):
                raise MeshError(f"{path}: unexpected end of file in element {name!r}")
            lineno = cursor + 1
            parts = lines[cursor].split()
            cursor += 1
            if name == "vertex":
                try:
                    rec = dict(zip(props, map(float, parts)))
                    vertices.append([rec["x"], rec["y"], rec["z"]])
                except (KeyError, ValueError) as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex record") from exc
            elif name == "face":
                try:
                    n = int(parts[0])
                    idx = [int(x) for x in parts[1:1 + n]]
                except (IndexError, ValueError) as exc:
                    raise MeshError(f"{path}:{lineno}: bad face record") from exc
                if n != 3:
                    raise MeshError(f"{path}:{lineno}: face {i} has {n} corners, only triangles are supported")
                if any(j < 0 or j >= len(vertices) for j in idx):
                    raise MeshError(f"{path}:{lineno}: face {i}: vertex index out of range")
                faces.append(idx)
    return vertices, faces


def export_mesh(mesh: TriMesh, path, per_vertex_color=None) -> None:
    """Write ``mesh`` as ASCII PLY (with colours in [0, 1]) or as OBJ.

    A ``.ply`` suffix or a colour array selects PLY, otherwise OBJ is written.
    """
    path = Path(path)
    if per_vertex_color is not None:
        per_vertex_color = np.asarray(per_vertex_color, dtype=np.float64)
        if per_vertex_color.shape != (mesh.n_vertices, 3):
            raise MeshError(
                f"colour array has shape {per_vertex_color.shape}, expected ({mesh.n_vertices}, 3)")
    if per_vertex_color is not None or path.suffix.lower() == ".ply":
        _write_ply(mesh, path, per_vertex_color)
    else:
        _write_obj(mesh, path)


def _fmt(x):
    return repr(float(x))


def _write_obj(mesh, path):
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_ply(mesh, path, colors):
    header = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = np.rint(np.clip(colors, 0.0, 1.0) * 255).astype(int)
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    body = []
    for k, (x, y, z) in enumerate(mesh.vertices):
        rec = f"{_fmt(x)} {_fmt(y)} {_fmt(z)}"
        if colors is not None:
            rec += " {} {} {}".format(*rgb[k])
        body.append(rec)
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(header + body) + "\n")


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------

def cotan_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Cotangent stiffness matrix ``L`` (positive semidefinite).

    Off-diagonal entry ``(i, j)`` is ``-(cot a + cot b) / 2`` summed over the
    angles opposite edge ``ij``; the diagonal makes every row sum to zero.
    """
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    ii, jj, ww = [], [], []
    for c in range(3):
        # corner c is opposite the edge (a, b)
        a, b = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        ea = v[a] - v[f[:, c]]
        eb = v[b] - v[f[:, c]]
        cot = np.einsum("ij,ij->i", ea, eb) / np.linalg.norm(np.cross(ea, eb), axis=1)
        ii.append(a)
        jj.append(b)
        ww.append(0.5 * cot)
    ii, jj, ww = map(np.concatenate, (ii, jj, ww))
    lo, hi = np.minimum(ii, jj), np.maximum(ii, jj)
    # accumulate on the upper triangle only and mirror, so L is exactly symmetric
    upper = sparse.coo_matrix((-ww, (lo, hi)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    off = upper + upper.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def barycell_areas(mesh: TriMesh) -> np.ndarray:
    """One third of the total area of the triangles incident to each vertex."""
    fa = mesh.face_areas()
    a = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(a, mesh.faces[:, c], fa / 3.0)
    isolated = np.flatnonzero(a <= 0)
    if isolated.size:
        raise MeshError(f"vertex {isolated[0]} is isolated (zero barycell area)")
    return a


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncated Laplace-Beltrami eigenbasis, mass-orthonormal.

    ``U`` has one eigenvector per column, sorted by eigenvalue, and satisfies
    ``U.T @ diag(areas) @ U == I``.
    """

    U: np.ndarray
    lambdas: np.ndarray
    areas: np.ndarray

    @property
    def n_u(self) -> int:
        return self.U.shape[1]

    def truncate(self, n_u: int) -> "SpectralBasis":
        return SpectralBasis(self.U[:, :n_u], self.lambdas[:n_u], self.areas)

    def save(self, path) -> None:
        """Write an ``.npz`` archive; fixed zip timestamps keep reruns byte-identical."""
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in ("U", "lambdas", "areas"):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(getattr(self, name)), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())

    @classmethod
    def load(cls, path) -> "SpectralBasis":
        with np.load(path) as data:
            return cls(data["U"], data["lambdas"], data["areas"])


def spectral_basis(mesh: TriMesh, n_u: int) -> SpectralBasis:
    """The ``n_u`` smallest solutions of ``L u = lambda A u``.

    ``A`` is the diagonal barycell mass. The problem is reduced to the
    symmetric matrix ``A^-1/2 L A^-1/2``. Each eigenvector is signed so
    that its largest-magnitude entry is positive.
    """
    k = mesh.n_vertices
    if not 1 <= n_u <= k:
        raise ValueError(f"n_u must lie in [1, {k}], got {n_u}")
    L = cotan_laplacian(mesh)
    areas = barycell_areas(mesh)
    inv_sqrt = sparse.diags(1.0 / np.sqrt(areas))
    S = (inv_sqrt @ L @ inv_sqrt).tocsr()
    S = 0.5 * (S + S.T)

    if k <= DENSE_EIGEN_LIMIT or n_u > k // 2:
        lambdas, Y = linalg.eigh(S.toarray(), subset_by_index=[0, n_u - 1])
    else:
        # deterministic start vector; shift slightly below zero so S - sigma I is definite
        v0 = np.sqrt(areas) / np.linalg.norm(np.sqrt(areas))
        scale = abs(S.diagonal()).max()
        try:
            lambdas, Y = splinalg.eigsh(S, k=n_u, sigma=-1e-8 * scale, which="LM", v0=v0,
                                        maxiter=50 * k, tol=1e-12)
        except splinalg.ArpackNoConvergence as exc:
            raise SpectralError(
                f"eigsh converged {len(exc.eigenvalues)} of {n_u} eigenpairs "
                f"(maxiter={50 * k}, K={k})") from exc
        order = np.argsort(lambdas)
        lambdas, Y = lambdas[order], Y[:, order]

    U = Y / np.sqrt(areas)[:, None]
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(n_u)])
    signs[signs == 0] = 1.0
    U = U * signs
    lambdas = np.maximum(lambdas, 0.0)
    logger.debug("spectral basis: K=%d n_u=%d lambda_max=%.4g", k, n_u, lambdas[-1])
    return SpectralBasis(U, lambdas, areas)
