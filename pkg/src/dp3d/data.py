"""Synthetic keypoint datasets, pixel-to-vertex keypoint extraction and
annotation corruptions.

Camera convention: after ``x @ R0 + T0`` the image coordinates are the first
two components and the camera looks down the ``-z`` axis, so larger ``z`` is
closer to the viewer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mesh import TriMesh
from .rigid import RigidTransform, quaternion_to_matrix

MIN_VISIBLE = 3
RAY_EPS = 1e-6
MAX_TRIES = 100


class DatasetError(ValueError):
    pass


@dataclass
class KeypointSet:
    """Per-vertex 2D locations ``y`` (K, 2) with visibility flags ``z`` (K,)."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=bool)
        if self.y.ndim != 2 or self.y.shape[1] != 2 or self.z.shape != (len(self.y),):
            raise DatasetError(f"keypoint shapes {self.y.shape} / {self.z.shape} are inconsistent")
        if self.z.sum() < MIN_VISIBLE:
            raise DatasetError(f"only {int(self.z.sum())} visible keypoints, need at least {MIN_VISIBLE}")
        if not np.all(np.isfinite(self.y[self.z])):
            raise DatasetError("visible keypoints must be finite")

    @property
    def n_visible(self) -> int:
        return int(self.z.sum())


@dataclass
class Instance:
    id: str
    keypoints: KeypointSet
    gt_x: np.ndarray | None = None
    gt_cam: RigidTransform | None = None

    def __post_init__(self):
        if (self.gt_x is None) != (self.gt_cam is None):
            raise DatasetError(f"instance {self.id}: gt_x and gt_cam must be given together")
        if self.gt_x is not None:
            self.gt_x = np.asarray(self.gt_x, dtype=np.float64)

    def gt_object_frame(self) -> np.ndarray:
        """Ground-truth vertices with the camera transform undone."""
        R, T = self.gt_cam.numpy()
        return (self.gt_x - T) @ R.T


# ---------------------------------------------------------------------------
# Posing and visibility
# ---------------------------------------------------------------------------

@dataclass
class PoseSampler:
    """Random articulated poses.

    Each non-root part rotates about its pivot by an angle uniform in
    ``[-theta_max, theta_max]`` around a random axis (or its fixed
    ``axes[m]``), composed down the kinematic tree. The camera rotation is
    Haar-uniform.
    """

    pivots: np.ndarray
    parents: np.ndarray
    theta_max: float = np.deg2rad(45.0)
    axes: np.ndarray | None = None
    root_fixed: bool = True

    def __post_init__(self):
        self.pivots = np.asarray(self.pivots, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        if not np.all(np.isfinite(self.pivots)) or not np.isfinite(self.theta_max):
            raise DatasetError("pose sampler bounds must be finite")
        for m, p in enumerate(self.parents):
            if p >= m:
                raise DatasetError("parents must precede their children")

    @property
    def n_parts(self) -> int:
        return len(self.pivots)

    def sample(self, rng: np.random.Generator):
        """Global (R, T) of every part, row-vector convention, shapes (M, 3, 3) and (M, 3)."""
        M = self.n_parts
        Rs = np.zeros((M, 3, 3))
        Ts = np.zeros((M, 3))
        for m in range(M):
            if self.parents[m] < 0 and self.root_fixed:
                Rl = np.eye(3)
            else:
                if self.axes is not None:
                    axis = np.asarray(self.axes[m], dtype=np.float64)
                else:
                    axis = rng.standard_normal(3)
                axis = axis / np.linalg.norm(axis)
                angle = rng.uniform(-self.theta_max, self.theta_max)
                Rl = axis_angle_matrix(axis * angle).T
            c = self.pivots[m]
            Tl = c - c @ Rl
            p = self.parents[m]
            if p < 0:
                Rs[m], Ts[m] = Rl, Tl
            else:
                Rs[m] = Rl @ Rs[p]
                Ts[m] = Tl @ Rs[p] + Ts[p]
        return Rs, Ts


def axis_angle_matrix(w) -> np.ndarray:
    """Column-convention rotation matrix of a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def pose_hard(vertices, labels, Rs, Ts) -> np.ndarray:
    """Rigidly move every vertex with the transform of its part."""
    V = np.asarray(vertices)
    return np.einsum("kd,kde->ke", V, Rs[labels]) + Ts[labels]


def visible_vertices(points, faces, eps: float = RAY_EPS, chunk: int = 256) -> np.ndarray:
    """Vertices whose ray towards the camera (+z) hits no other triangle.

    The ray starts ``eps`` above the vertex; faces incident to the vertex are
    ignored.
    """
    X = np.asarray(points, dtype=np.float64)
    F = np.asarray(faces)
    a, b, c = X[F[:, 0]], X[F[:, 1]], X[F[:, 2]]
    e0, e1 = (b - a)[:, :2], (c - a)[:, :2]
    den = e0[:, 0] * e1[:, 1] - e0[:, 1] * e1[:, 0]
    ok = np.abs(den) > 1e-15
    a, e0, e1, den, F = a[ok], e0[ok], e1[ok], den[ok], F[ok]
    dz0, dz1 = X[F[:, 1], 2] - a[:, 2], X[F[:, 2], 2] - a[:, 2]
    lo = np.minimum(np.minimum(a[:, :2], a[:, :2] + e0), a[:, :2] + e1)
    hi = np.maximum(np.maximum(a[:, :2], a[:, :2] + e0), a[:, :2] + e1)
    visible = np.ones(len(X), dtype=bool)
    for start in range(0, len(X), chunk):
        idx = np.arange(start, min(start + chunk, len(X)))
        p = X[idx]
        d = p[:, None, :2] - a[None, :, :2]
        s = (d[..., 0] * e1[:, 1] - d[..., 1] * e1[:, 0]) / den
        t = (e0[:, 0] * d[..., 1] - e0[:, 1] * d[..., 0]) / den
        inside = (s >= 0) & (t >= 0) & (s + t <= 1)
        inside &= np.all((p[:, None, :2] >= lo) & (p[:, None, :2] <= hi), axis=-1)
        depth = a[None, :, 2] + s * dz0 + t * dz1
        hit = inside & (depth > p[:, None, 2] + eps)
        hit &= ~np.any(F[None, :, :] == idx[:, None, None], axis=-1)
        visible[idx] = ~hit.any(axis=1)
    return visible


def _haar_rotation(rng):
    q = rng.standard_normal(4)
    return quaternion_to_matrix(q / np.linalg.norm(q))


def synth_instance(template: TriMesh, labels, sampler: PoseSampler, rng: np.random.Generator,
                   instance_id: str = "0", scale: float | None = None) -> Instance:
    """One posed, orthographically projected instance with ray-cast visibility.

    Coordinates are divided by the template bounding-box diagonal (unless
    ``scale`` is given) and the visible keypoints are zero-centred; the
    ground-truth camera absorbs the centring offset.
    """
    labels = np.asarray(labels)
    s = 1.0 / template.bbox_diagonal() if scale is None else scale
    for _ in range(MAX_TRIES):
        Rs, Ts = sampler.sample(rng)
        X = s * pose_hard(template.vertices, labels, Rs, Ts)
        Rcam = _haar_rotation(rng).T
        Xc = X @ Rcam
        z = visible_vertices(Xc, template.faces)
        if z.sum() >= MIN_VISIBLE:
            break
    else:
        raise DatasetError(f"instance {instance_id}: no pose with {MIN_VISIBLE} visible vertices "
                           f"after {MAX_TRIES} tries")
    centre = Xc[z, :2].mean(0)
    T = np.array([-centre[0], -centre[1], 0.0])
    gt_x = Xc + T
    return Instance(instance_id, KeypointSet(gt_x[:, :2].copy(), z), gt_x,
                    RigidTransform.from_arrays(Rcam, T))


def synth_dataset(template: TriMesh, gt_labels, sampler: PoseSampler, n: int, seed: int = 0,
                  scale: float | None = None) -> list[Instance]:
    """``n`` synthetic instances; instance ``i`` draws from its own child seed."""
    gt_labels = np.asarray(gt_labels)
    if gt_labels.shape != (template.n_vertices,):
        raise DatasetError("gt_labels must give one label per template vertex")
    if gt_labels.min() < 0 or gt_labels.max() >= sampler.n_parts:
        raise DatasetError("gt_labels must index the sampler's parts")
    children = np.random.SeedSequence(seed).spawn(n)
    return [synth_instance(template, gt_labels, sampler, np.random.default_rng(ss), f"{i:06d}", scale)
            for i, ss in enumerate(children)]


# ---------------------------------------------------------------------------
# Pixel matches
# ---------------------------------------------------------------------------

@dataclass
class PixelMatchSet:
    """Pixel coordinates (N, 2) each matched to a template vertex index (N,)."""

    pixels: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1)
        if len(self.pixels) != len(self.vertices):
            raise DatasetError("every pixel needs exactly one vertex index")
        if np.any(self.vertices < 0):
            raise DatasetError("vertex indices must be non-negative")


def match_pixels(pixel_coords, pixel_embeddings, vertex_embeddings) -> PixelMatchSet:
    """Assign each pixel to the vertex with the nearest embedding."""
    pe = np.asarray(pixel_embeddings, dtype=np.float64)
    ve = np.asarray(vertex_embeddings, dtype=np.float64)
    d2 = (pe ** 2).sum(1)[:, None] - 2 * pe @ ve.T + (ve ** 2).sum(1)[None]
    return PixelMatchSet(pixel_coords, np.argmin(d2, axis=1))


def extract_keypoints(matches: PixelMatchSet, k: int) -> KeypointSet:
    """Mean pixel location per matched vertex; unmatched vertices are invisible."""
    if len(matches.vertices) == 0:
        raise DatasetError("empty pixel match set")
    if matches.vertices.max() >= k:
        raise DatasetError(f"vertex index {matches.vertices.max()} out of range for {k} vertices")
    counts = np.bincount(matches.vertices, minlength=k)
    sums = np.zeros((k, 2))
    np.add.at(sums, matches.vertices, matches.pixels)
    z = counts > 0
    y = np.zeros((k, 2))
    y[z] = sums[z] / counts[z, None]
    return KeypointSet(y, z)


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianNoise:
    sigma: float


@dataclass(frozen=True)
class Sparsify:
    keep_fraction: float


@dataclass(frozen=True)
class DropLowerHalf:
    rate: float


def corrupt(dataset: list[Instance], mode, rng: np.random.Generator,
            template: TriMesh | None = None) -> list[Instance]:
    """Return a corrupted copy of ``dataset``; ground truth is never touched.

    ``GaussianNoise`` perturbs visible keypoints, ``Sparsify`` hides a random
    ``1 - keep_fraction`` of the visible ones and ``DropLowerHalf`` hides every
    vertex below the template's median z on a ``rate`` fraction of instances.
    """
    if isinstance(mode, GaussianNoise):
        if mode.sigma < 0:
            raise DatasetError("sigma must be >= 0")
    elif isinstance(mode, Sparsify):
        if not 0 <= mode.keep_fraction <= 1:
            raise DatasetError("keep_fraction must lie in [0, 1]")
    elif isinstance(mode, DropLowerHalf):
        if not 0 <= mode.rate <= 1:
            raise DatasetError("rate must lie in [0, 1]")
        if template is None:
            raise DatasetError("DropLowerHalf needs the template mesh")
        tz = template.vertices[:, 2]
        lower = tz < np.median(tz)
        chosen = set(rng.permutation(len(dataset))[:int(round(mode.rate * len(dataset)))].tolist())
    else:
        raise DatasetError(f"unknown corruption {mode!r}")

    out = []
    for i, inst in enumerate(dataset):
        y, z = inst.keypoints.y.copy(), inst.keypoints.z.copy()
        if isinstance(mode, GaussianNoise) and mode.sigma > 0:
            noise = rng.normal(0.0, mode.sigma, size=y.shape)
            y[z] += noise[z]
        elif isinstance(mode, Sparsify) and mode.keep_fraction < 1:
            vis = np.flatnonzero(z)
            n_drop = int(round((1 - mode.keep_fraction) * len(vis)))
            z[rng.permutation(vis)[:n_drop]] = False
        elif isinstance(mode, DropLowerHalf) and i in chosen:
            z[lower] = False
        if z.sum() < MIN_VISIBLE:
            raise DatasetError(f"instance {inst.id}: corruption leaves {int(z.sum())} visible keypoints")
        out.append(replace(inst, keypoints=KeypointSet(y, z)))
    return out


# ---------------------------------------------------------------------------
# JSON-lines storage
# ---------------------------------------------------------------------------

def _floats(a):
    return [float(x) for x in np.asarray(a).ravel()]


def instance_to_json(inst: Instance) -> str:
    rec = {
        "id": inst.id,
        "y": [[float(u), float(v)] for u, v in inst.keypoints.y],
        "z": [bool(b) for b in inst.keypoints.z],
    }
    if inst.gt_x is not None:
        R, T = inst.gt_cam.numpy()
        rec["gt_x"] = [_floats(row) for row in inst.gt_x]
        rec["gt_cam"] = {"R": _floats(R), "T": _floats(T)}
    return json.dumps(rec, separators=(",", ":"))


def instance_from_json(line: str) -> Instance:
    rec = json.loads(line)
    kp = KeypointSet(np.array(rec["y"], dtype=np.float64).reshape(-1, 2), np.array(rec["z"], dtype=bool))
    gt_x = gt_cam = None
    if "gt_x" in rec:
        gt_x = np.array(rec["gt_x"], dtype=np.float64)
        gt_cam = RigidTransform.from_arrays(np.reshape(rec["gt_cam"]["R"], (3, 3)), rec["gt_cam"]["T"])
    return Instance(str(rec["id"]), kp, gt_x, gt_cam)


def save_dataset(dataset: list[Instance], path) -> None:
    Path(path).write_text("".join(instance_to_json(inst) + "\n" for inst in dataset))


def load_dataset(path) -> list[Instance]:
    with open(path) as fh:
        dataset = [instance_from_json(line) for line in fh if line.strip()]
    if not dataset:
        raise DatasetError(f"{path}: empty dataset")
    return dataset


def stack_keypoints(dataset: list[Instance]):
    """(B, K, 2) keypoints and (B, K) visibility of a list of instances."""
    y = np.stack([inst.keypoints.y for inst in dataset])
    z = np.stack([inst.keypoints.z for inst in dataset])
    return y, z
