"""Run configuration, checkpoints and the train / fit / evaluate workflow."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import articulation
from .data import Instance, stack_keypoints
from .evaluation import EvalReport, JointRegressor, mpjpe, re_aligned, seg_agreement
from .losses import LossWeights, loss_total
from .mesh import SpectralBasis, TriMesh
from .model import DP3D, VARIANTS, ModelConfig
from .optim import OptimizerConfig, ParamSet, train
from .rigid import DTYPE, as_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dp3d-checkpoint/1"
HISTORY_COLUMNS = ("epoch", "l_total", "l_rep", "l_canon", "l_arap", "l_entropy", "lr")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    width: int = 1024
    hidden: int = 256
    n_blocks: int = 6


@dataclass
class SynthConfig:
    builtin: str | None = None
    n_instances: int = 200
    theta_max_deg: float = 45.0


@dataclass
class RunConfig:
    """Everything a command needs. Nested sections mirror the JSON config file."""

    mesh: str | None = None
    basis: str | None = None
    rig: str | None = None
    train_data: str | None = None
    eval_data: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None
    joint_regressor: str | None = None
    out: str = "out"
    n_u: int = articulation.DEFAULT_N_U
    m_parts: list = field(default_factory=lambda: [articulation.DEFAULT_PARTS])
    sigma_bar: float = articulation.DEFAULT_SIGMA_BAR
    variant: str = "parts"
    n_blend: int = 0
    uncertainty: bool = False
    camera_scale: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fit_iters: int = 100
    fit_init: str = "regressor"
    export_limit: int | None = None
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.m_parts, int):
            self.m_parts = [self.m_parts]
        self.m_parts = [int(m) for m in self.m_parts]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        sections = {"synth": SynthConfig, "network": NetworkConfig, "weights": LossWeights, "optimizer": OptimizerConfig}
        try:
            for key, typ in sections.items():
                if key in d and isinstance(d[key], dict):
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self, template: TriMesh | None = None) -> None:
        """Check every setting before any work starts."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_u < 1:
            raise ConfigError("n_u must be >= 1")
        if not self.m_parts or min(self.m_parts) < 1:
            raise ConfigError("m_parts must be >= 1")
        if self.sigma_bar <= 0:
            raise ConfigError("sigma_bar must be positive")
        if self.optimizer.learning_rate <= 0 and self.optimizer.epochs > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.fit_iters < 0:
            raise ConfigError("fit_iters must be >= 0")
        if self.fit_init not in ("regressor", "zero"):
            raise ConfigError("fit_init must be 'regressor' or 'zero'")
        if self.synth.n_instances < 1:
            raise ConfigError("synth.n_instances must be >= 1")
        if not 0 <= self.synth.theta_max_deg <= 180:
            raise ConfigError("synth.theta_max_deg must lie in [0, 180]")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if template is not None and self.n_u > template.n_vertices:
            raise ConfigError(f"n_u={self.n_u} exceeds the mesh's {template.n_vertices} vertices")

    def model_config(self, m_parts: int | None = None) -> ModelConfig:
        try:
            return ModelConfig(n_parts=self.m_parts[0] if m_parts is None else m_parts, n_u=self.n_u,
                               sigma_bar=self.sigma_bar, variant=self.variant, n_blend=self.n_blend,
                               width=self.network.width, hidden=self.network.hidden,
                               n_blocks=self.network.n_blocks, uncertainty=self.uncertainty,
                               camera_scale=self.camera_scale)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _tensor_record(t) -> dict:
    t = t.detach().cpu()
    return {"dtype": str(t.dtype).removeprefix("torch."), "shape": list(t.shape),
            "data": t.reshape(-1).tolist()}


def _tensor_from_record(rec) -> torch.Tensor:
    dtype = getattr(torch, rec["dtype"])
    return torch.tensor(rec["data"], dtype=dtype).reshape(rec["shape"])


_MODEL_TENSORS = ("W", "rest_logs", "W_b")
_BUFFERS = ("V", "U", "areas")


def save_checkpoint(model: DP3D, path, mesh_path: str | None = None) -> None:
    """Single JSON document: part model, blendshapes, basis, networks and provenance."""
    state = model.state_dict()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "M": model.config.n_parts if model.W is not None else 0,
        "N_u": model.config.n_u,
        "D": model.config.n_blend,
        "mesh_path": mesh_path,
        "mesh_hash": model.template.content_hash(),
        "config": dataclasses.asdict(model.config),
        "basis": {"U": _tensor_record(model.U), "lambdas": model.basis.lambdas.tolist(),
                  "areas": _tensor_record(model.areas)},
        "network": {k: _tensor_record(v) for k, v in state.items()
                    if k not in _MODEL_TENSORS and k not in _BUFFERS},
    }
    for name in _MODEL_TENSORS:
        t = getattr(model, name)
        doc[name] = None if t is None else _tensor_record(t)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path, template: TriMesh) -> DP3D:
    """Rebuild a model; the mesh must be the one it was trained against."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    if doc["mesh_hash"] != template.content_hash():
        raise CheckpointError(f"{path}: checkpoint was trained on a different mesh")
    basis = SpectralBasis(_tensor_from_record(doc["basis"]["U"]).numpy(), np.array(doc["basis"]["lambdas"]),
                          _tensor_from_record(doc["basis"]["areas"]).numpy())
    model = DP3D(template, basis, ModelConfig(**doc["config"]))
    state = {k: _tensor_from_record(v) for k, v in doc["network"].items()}
    for name in _MODEL_TENSORS:
        if doc[name] is not None:
            state[name] = _tensor_from_record(doc[name])
    state.update({"V": model.V, "U": model.U, "areas": model.areas})
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_model(template: TriMesh, basis: SpectralBasis, config: RunConfig, m_parts: int | None = None) -> DP3D:
    mc = config.model_config(m_parts)
    if basis.n_u < mc.n_u:
        raise ConfigError(f"basis has {basis.n_u} eigenvectors, n_u={mc.n_u} requested")
    return DP3D(template, basis, mc, np.random.default_rng(config.seed))


def train_model(model: DP3D, dataset: list[Instance], weights: LossWeights, cfg: OptimizerConfig,
                on_epoch=None) -> list[dict]:
    """End-to-end training of every model parameter on keypoints only."""
    y, z = stack_keypoints(dataset)
    Y, Z = as_tensor(y), torch.as_tensor(z)
    model.train()

    def step(idx, epoch, b):
        rng = np.random.default_rng([cfg.seed, epoch, b])
        return model.loss(Y[idx], Z[idx], rng, weights)

    return train(ParamSet.from_module(model), len(dataset), step, cfg, on_epoch)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            row = [rec["epoch"]] + [repr(float(rec.get(c[2:], 0.0))) for c in HISTORY_COLUMNS[1:-1]]
            w.writerow(row + [repr(float(rec["lr"]))])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Per-instance fitting
# ---------------------------------------------------------------------------

def fit_instances(model: DP3D, dataset: list[Instance], weights: LossWeights, iters: int = 100,
                  init: str = "regressor", seed: int = 0) -> dict:
    """Directly optimise each instance's twists (and blend coefficients) under
    the training losses with every shared parameter frozen.

    ``init="regressor"`` starts from the network's prediction, ``"zero"``
    from the rest pose with an identity camera. All instances are solved
    jointly; the objective is a sum of independent per-instance terms.
    """
    if init not in ("regressor", "zero"):
        raise ValueError("init must be 'regressor' or 'zero'")
    y, z = stack_keypoints(dataset)
    Y, Z = as_tensor(y), torch.as_tensor(z)
    B = len(dataset)
    if init == "regressor":
        pred = model.predict(y, z)
        twists0 = pred["twists"]
        alpha0 = None
        if model.config.n_blend:
            with torch.no_grad():
                model.eval()
                alpha0 = model.phi(Y, Z)[1]
    else:
        twists0 = torch.zeros(B, model.phi.n_parts + 1, 6, dtype=DTYPE)
        alpha0 = torch.zeros(B, model.config.n_blend, dtype=DTYPE) if model.config.n_blend else None

    was_training = model.training
    model.eval()
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    twists = twists0.clone().requires_grad_(True)
    alpha = None if alpha0 is None else alpha0.clone().requires_grad_(True)
    variables = [twists] + ([alpha] if alpha is not None else [])
    opt = torch.optim.LBFGS(variables, lr=1.0, max_iter=max(iters, 1), history_size=20,
                            line_search_fn="strong_wolfe", tolerance_grad=1e-12, tolerance_change=1e-15)

    def objective():
        out = model.decode(twists, alpha)
        terms = model.loss_terms(out, Y, Z, np.random.default_rng(seed), weights)
        # the loss means over the batch; undo it so each instance sees its own scale
        return loss_total(terms, weights)[0] * B

    def closure():
        opt.zero_grad()
        loss = objective()
        loss.backward()
        return loss

    try:
        if iters > 0:
            opt.step(closure)
        with torch.no_grad():
            out = model.decode(twists, alpha)
            final = float(objective()) / B
    finally:
        for p, g in zip(model.parameters(), frozen):
            p.requires_grad_(g)
        model.train(was_training)
    X = out["X"].detach()
    cam = out["cam"]
    X_cam = X @ cam.R.detach() + cam.T.detach()[:, None, :]
    if model.scale is not None:
        X_cam = X_cam * model.scale.detach()
    return {"X": X, "X_cam": X_cam, "twists": twists.detach(),
            "alpha": None if alpha is None else alpha.detach(), "loss": final}


# ---------------------------------------------------------------------------
# Predictions and evaluation
# ---------------------------------------------------------------------------

def save_predictions(dataset: list[Instance], X_cam, path, twists=None) -> None:
    X_cam = np.asarray(X_cam)
    lines = []
    for i, inst in enumerate(dataset):
        rec = {"id": inst.id, "x": [[float(c) for c in row] for row in X_cam[i]]}
        if twists is not None:
            rec["twists"] = [[float(c) for c in row] for row in np.asarray(twists[i])]
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path, dataset: list[Instance]) -> np.ndarray:
    recs = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                recs[str(rec["id"])] = np.array(rec["x"], dtype=np.float64)
    missing = [inst.id for inst in dataset if inst.id not in recs]
    if missing:
        raise ValueError(f"{path}: no prediction for instance {missing[0]}")
    return np.stack([recs[inst.id] for inst in dataset])


def reprojection_ratio(X_cam, dataset: list[Instance]) -> np.ndarray:
    """Per-instance mean visible-keypoint 2D error over the projected ground-truth bbox diagonal."""
    out = []
    for x, inst in zip(np.asarray(X_cam), dataset):
        z = inst.keypoints.z
        err = np.linalg.norm(x[z, :2] - inst.keypoints.y[z], axis=1).mean()
        ref = inst.gt_x[:, :2] if inst.gt_x is not None else inst.keypoints.y[z]
        out.append(err / np.linalg.norm(ref.max(0) - ref.min(0)))
    return np.array(out)


def evaluate_predictions(X_cam, dataset: list[Instance], regressor: JointRegressor | None = None,
                         segmentation=None, gt_labels=None) -> EvalReport:
    """MPJPE and RE against ground truth, plus reprojection and segmentation scores."""
    X_cam = np.asarray(X_cam)
    per = []
    for i, inst in enumerate(dataset):
        if inst.gt_x is None:
            raise ValueError(f"instance {inst.id} has no ground truth")
        p, g = X_cam[i], inst.gt_x
        if regressor is not None:
            p, g = regressor(p), regressor(g)
        per.append({"id": inst.id, "mpjpe": mpjpe(p, g), "re": re_aligned(p, g)})
    rep = reprojection_ratio(X_cam, dataset)
    for rec, r in zip(per, rep):
        rec["reprojection"] = float(r)
    extra = {"reprojection": float(rep.mean()), "n_instances": len(dataset),
             "joints": "regressed" if regressor is not None else "vertices"}
    if segmentation is not None and gt_labels is not None:
        extra["seg_agreement"] = seg_agreement(segmentation, gt_labels)
    return EvalReport(float(np.mean([r["mpjpe"] for r in per])), float(np.mean([r["re"] for r in per])),
                      per, extra)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

