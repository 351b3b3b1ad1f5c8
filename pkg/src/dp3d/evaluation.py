"""Reconstruction metrics: depth-centred MPJPE, similarity-aligned error and
part-segmentation agreement."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

N_JOINTS = 14


class AlignmentError(ValueError):
    pass


def mpjpe(pred, gt) -> float:
    """Mean Euclidean error after removing each set's mean depth.

    All points count, visible or not.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred.copy()
    g = gt.copy()
    p[..., 2] -= p[..., 2].mean(-1, keepdims=True)
    g[..., 2] -= g[..., 2].mean(-1, keepdims=True)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def umeyama(src, dst, weights=None):
    """Weighted least-squares similarity ``dst ~ s * src @ R + T`` (row vectors, det R = +1)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s, mu_d = w @ src, w @ dst
    xs, xd = src - mu_s, dst - mu_d
    cov = (w[:, None] * xs).T @ xd
    U, S, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.array([1.0, 1.0, d])
    R = (U * D) @ Vt
    var = w @ (xs ** 2).sum(1)
    s = (S * D).sum() / var
    T = mu_d - s * mu_s @ R
    return s, R, T


def _mean_dist(pred, gt, s, R, T):
    return np.linalg.norm(s * pred @ R + T - gt, axis=1).mean()


def re_aligned(pred, gt, max_iter: int = 2000, tol: float = 1e-15) -> float:
    """Mean point distance after the optimal similarity alignment of ``pred`` onto ``gt``.

    The mean of unsquared distances has no closed-form minimiser, so the
    least-squares (Umeyama) solution is refined by iteratively reweighted
    least squares. The identity alignment is also used as a start, so the
    result never exceeds the unaligned error.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"expected two (N, 3) arrays, got {pred.shape} and {gt.shape}")
    if len(gt) < 3:
        raise AlignmentError("need at least 3 points")
    for name, pts in (("gt", gt), ("pred", pred)):
        sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise AlignmentError(f"{name} points are rank-deficient (collinear or coincident)")

    best = np.inf
    starts = [umeyama(pred, gt), (1.0, np.eye(3), np.zeros(3))]
    for s, R, T in starts:
        f = _mean_dist(pred, gt, s, R, T)
        for _ in range(max_iter):
            r = np.linalg.norm(s * pred @ R + T - gt, axis=1)
            if r.max() == 0:
                break
            scale = r.max()
            s2, R2, T2 = umeyama(pred, gt, 1.0 / np.maximum(r, 1e-12 * scale))
            f2 = _mean_dist(pred, gt, s2, R2, T2)
            if f2 > f - tol * max(f, 1e-300):
                if f2 < f:
                    s, R, T, f = s2, R2, T2, f2
                break
            s, R, T, f = s2, R2, T2, f2
        best = min(best, f)
    return float(best)


def seg_agreement(pred_p, gt_labels) -> float:
    """Fraction of vertices whose argmax part matches the ground truth under
    the best one-to-one relabelling (Hungarian assignment)."""
    pred_p = np.asarray(pred_p)
    gt = np.asarray(gt_labels, dtype=np.int64)
    pred = np.argmax(pred_p, axis=1)
    n_gt = gt.max() + 1
    if len(np.unique(gt)) > pred_p.shape[1]:
        raise ValueError("ground truth has more labels than predicted parts")
    conf = np.zeros((pred_p.shape[1], n_gt))
    np.add.at(conf, (pred, gt), 1)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / len(gt))


@dataclass
class JointRegressor:
    """Row-stochastic (N_J, K) map from vertices to joints."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("joint regressor must be a matrix")
        if np.any(self.matrix < 0):
            raise ValueError("joint regressor entries must be non-negative")
        rows = self.matrix.sum(1)
        if np.any(np.abs(rows - 1) > 1e-9):
            raise ValueError(f"joint regressor row {int(np.argmax(np.abs(rows - 1)))} does not sum to 1")

    @classmethod
    def load_csv(cls, path) -> "JointRegressor":
        return cls(np.loadtxt(path, delimiter=",", ndmin=2))

    def __call__(self, X):
        return np.einsum("jk,...kc->...jc", self.matrix, np.asarray(X))


@dataclass
class EvalReport:
    mpjpe: float
    re: float
    per_instance: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")
