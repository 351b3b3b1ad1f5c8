"""Command-line interface: ``dp3d {lbo,synth,train,fit,eval,export}``.

Settings come from an optional JSON config (``--config``) overridden by
flags. Every output directory receives ``config.json`` with the fully
resolved settings. Failures print one line ``dp3d: error[CODE]: message``
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, shapes
from .evaluation import AlignmentError, JointRegressor
from .mesh import MeshError, SpectralBasis, SpectralError, TriMesh, export_mesh, load_mesh, normalize_mesh, spectral_basis
from .optim import NonFiniteGradient, TrainingDiverged
from .pipeline import (CheckpointError, ConfigError, RunConfig, build_model, dump_json, evaluate_predictions,
                       fit_instances, load_checkpoint, load_predictions, save_checkpoint, save_predictions,
                       train_model, write_history)

logger = logging.getLogger("dp3d")

# exit codes
EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_IO": 4, "E_MESH": 5, "E_DATA": 6, "E_NUMERIC": 7, "E_INTERNAL": 1}

# 16-entry categorical palette, indexed by part
PALETTE = np.array([
    [0.122, 0.467, 0.706], [1.000, 0.498, 0.055], [0.173, 0.627, 0.173], [0.839, 0.153, 0.157],
    [0.580, 0.404, 0.741], [0.549, 0.337, 0.294], [0.890, 0.467, 0.761], [0.498, 0.498, 0.498],
    [0.737, 0.741, 0.133], [0.090, 0.745, 0.812], [0.682, 0.780, 0.910], [1.000, 0.733, 0.471],
    [0.596, 0.875, 0.541], [1.000, 0.596, 0.588], [0.773, 0.690, 0.835], [0.769, 0.612, 0.580],
])

BUILTINS = {"hinged-cylinder": shapes.hinged_cylinder, "hinge-chain": shapes.hinge_chain}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def part_colors(P) -> np.ndarray:
    return PALETTE[np.asarray(P).argmax(1) % len(PALETTE)]


def scalar_colors(f) -> np.ndarray:
    """Blue-white-red map of a scalar field; a constant field is uniform white."""
    f = np.asarray(f, dtype=np.float64)
    span = np.abs(f - f.mean()).max()
    t = np.zeros_like(f) if span < 1e-12 * max(np.abs(f).max(), 1e-300) else (f - f.mean()) / span
    blue, white, red = np.array([0.23, 0.30, 0.75]), np.ones(3), np.array([0.71, 0.02, 0.15])
    return np.where(t[:, None] < 0, white + (blue - white) * -t[:, None], white + (red - white) * t[:, None])


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="torch thread count (default: $DP3D_THREADS)")
    p.add_argument("--mesh", help="template mesh (.obj or .ply)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _model_flags(p):
    p.add_argument("--n-u", dest="n_u", type=int)
    p.add_argument("--m-parts", dest="m_parts", type=int, action="append",
                   help="number of parts; repeat for a sweep")
    p.add_argument("--sigma-bar", dest="sigma_bar", type=float)
    p.add_argument("--variant", choices=["parts", "no_parts_linear", "parts_plus_blendshapes"])
    p.add_argument("--n-blend", dest="n_blend", type=int)
    p.add_argument("--basis", help="precomputed basis (.npz); computed from the mesh if absent")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dp3d", description=__doc__.splitlines()[0],
                                 argument_default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lbo", help="Laplace-Beltrami basis and eigenfunction previews",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--n-u", dest="n_u", type=int)

    p = sub.add_parser("synth", help="synthetic keypoint dataset", argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--builtin", choices=sorted(BUILTINS), help="built-in articulated template")
    p.add_argument("--rig", help="rig JSON with labels, pivots and parents (for --mesh)")
    p.add_argument("-n", "--n-instances", dest="n_instances", type=int)
    p.add_argument("--theta-max", dest="theta_max_deg", type=float, help="max part rotation in degrees")

    p = sub.add_parser("train", help="train the model on a dataset", argument_default=argparse.SUPPRESS)
    _common(p)
    _model_flags(p)
    p.add_argument("--data", dest="train_data", help="training dataset (JSON lines)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--blocks", dest="n_blocks", type=int)

    p = sub.add_parser("fit", help="per-instance pose optimisation", argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="eval_data")
    p.add_argument("--iters", dest="fit_iters", type=int)
    p.add_argument("--init", dest="fit_init", choices=["regressor", "zero"])

    p = sub.add_parser("eval", help="evaluate predictions against ground truth", argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--checkpoint", help="predict with this model")
    p.add_argument("--predictions", help="or evaluate these predictions (JSON lines)")
    p.add_argument("--data", dest="eval_data")
    p.add_argument("--joint-regressor", dest="joint_regressor", help="CSV joint regressor")
    p.add_argument("--rig", help="rig JSON whose labels score the learned segmentation")

    p = sub.add_parser("export", help="posed, part-coloured PLY meshes", argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--data", dest="eval_data")
    p.add_argument("--limit", dest="export_limit", type=int)
    return ap


_SECTIONS = {
    "optimizer": ("epochs", "learning_rate", "momentum", "weight_decay", "batch_size"),
    "network": ("width", "hidden", "n_blocks"),
    "synth": ("builtin", "n_instances", "theta_max_deg"),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then every flag that was given."""
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError("E_IO", f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError("E_CONFIG", f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        base.pop("command", None)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")}
    for section, keys in _SECTIONS.items():
        for k in keys:
            if k in flags:
                base.setdefault(section, {})
                base[section][k] = flags.pop(k)
    base.update(flags)
    if "seed" in flags:
        base.setdefault("optimizer", {})["seed"] = flags["seed"]
    elif "seed" in base and isinstance(base.get("optimizer", {}), dict):
        base.setdefault("optimizer", {}).setdefault("seed", base["seed"])
    if base.get("threads") is None and os.environ.get("DP3D_THREADS"):
        try:
            base["threads"] = int(os.environ["DP3D_THREADS"])
        except ValueError:
            raise CliError("E_CONFIG", "DP3D_THREADS must be an integer") from None
    try:
        cfg = RunConfig.from_dict(base)
        cfg.validate()
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError("E_CONFIG", str(exc)) from None
    return cfg


def _require(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise CliError("E_CONFIG", f"missing required setting {n!r} (flag --{n.replace('_', '-')})")


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"command": command, **cfg.to_dict()}, out / "config.json")
    return out


def _load_template(cfg) -> TriMesh:
    _require(cfg, "mesh")
    return load_mesh(cfg.mesh)


def _load_basis(cfg, template) -> SpectralBasis:
    if cfg.basis:
        basis = SpectralBasis.load(cfg.basis)
        if basis.U.shape[0] != template.n_vertices:
            raise CliError("E_CONFIG", f"basis {cfg.basis} has {basis.U.shape[0]} rows, mesh has "
                                       f"{template.n_vertices} vertices")
        return basis
    return spectral_basis(template, cfg.n_u)


def _eval_dataset(cfg):
    path = cfg.eval_data or cfg.train_data
    if path is None:
        raise CliError("E_CONFIG", "missing required setting 'eval_data' (flag --data)")
    return data.load_dataset(path)


def _load_rig(path):
    try:
        rig = json.loads(Path(path).read_text())
        return np.asarray(rig["labels"]), np.asarray(rig["pivots"], dtype=np.float64), np.asarray(rig["parents"])
    except KeyError as exc:
        raise CliError("E_DATA", f"{path}: rig is missing {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_lbo(cfg: RunConfig) -> dict:
    template = _load_template(cfg)
    cfg.validate(template)
    out = _out_dir(cfg, "lbo")
    basis = spectral_basis(template, cfg.n_u)
    basis.save(out / "basis.npz")
    for i in range(basis.n_u):
        export_mesh(template, out / f"eigen_{i:03d}.ply", scalar_colors(basis.U[:, i]))
    return {"basis": str(out / "basis.npz"), "eigenvalues": basis.lambdas.tolist()}


def cmd_synth(cfg: RunConfig) -> dict:
    if cfg.synth.builtin:
        shape = BUILTINS[cfg.synth.builtin]()
        mesh, labels, pivots, parents = shape.mesh, shape.labels, shape.pivots, shape.parents
    else:
        _require(cfg, "mesh", "rig")
        mesh = load_mesh(cfg.mesh)
        labels, pivots, parents = _load_rig(cfg.rig)
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    s = 1.0 / mesh.bbox_diagonal()
    template = normalize_mesh(mesh)
    pivots = (pivots - 0.5 * (lo + hi)) * s
    out = _out_dir(cfg, "synth")
    sampler = data.PoseSampler(pivots, parents, theta_max=np.deg2rad(cfg.synth.theta_max_deg))
    dataset = data.synth_dataset(template, labels, sampler, cfg.synth.n_instances, seed=cfg.seed)
    export_mesh(template, out / "template.obj")
    dump_json({"labels": np.asarray(labels).tolist(), "pivots": pivots.tolist(),
               "parents": np.asarray(parents).tolist()}, out / "rig.json")
    data.save_dataset(dataset, out / "dataset.jsonl")
    return {"dataset": str(out / "dataset.jsonl"), "template": str(out / "template.obj"),
            "instances": len(dataset)}


def cmd_train(cfg: RunConfig) -> dict:
    template = _load_template(cfg)
    _require(cfg, "train_data")
    cfg.validate(template)
    dataset = data.load_dataset(cfg.train_data)
    if dataset[0].keypoints.y.shape[0] != template.n_vertices:
        raise CliError("E_DATA", f"dataset has {dataset[0].keypoints.y.shape[0]} keypoints per instance, "
                                 f"mesh has {template.n_vertices} vertices")
    basis = _load_basis(cfg, template)
    out = _out_dir(cfg, "train")
    results = {}
    for m in cfg.m_parts:
        run_dir = out if len(cfg.m_parts) == 1 else out / f"M{m:02d}"
        run_dir.mkdir(exist_ok=True)
        model = build_model(template, basis, cfg, m)
        history = train_model(model, dataset, cfg.weights, cfg.optimizer)
        save_checkpoint(model, run_dir / "checkpoint.json", cfg.mesh)
        write_history(history, run_dir / "loss_history.csv")
        results[m] = {"checkpoint": str(run_dir / "checkpoint.json"),
                      "final_loss": history[-1]["total"] if history else None}
    return results


def cmd_fit(cfg: RunConfig) -> dict:
    template = _load_template(cfg)
    _require(cfg, "checkpoint")
    dataset = _eval_dataset(cfg)
    model = load_checkpoint(cfg.checkpoint, template)
    out = _out_dir(cfg, "fit")
    res = fit_instances(model, dataset, cfg.weights, cfg.fit_iters, cfg.fit_init, cfg.seed)
    save_predictions(dataset, res["X_cam"].numpy(), out / "predictions.jsonl", res["twists"].numpy())
    return {"predictions": str(out / "predictions.jsonl"), "final_loss": res["loss"]}


def _predict(cfg, template, dataset):
    if cfg.predictions:
        return load_predictions(cfg.predictions, dataset), None
    _require(cfg, "checkpoint")
    model = load_checkpoint(cfg.checkpoint, template)
    y, z = data.stack_keypoints(dataset)
    return model.predict(y, z)["X_cam"].numpy(), model


def cmd_eval(cfg: RunConfig) -> dict:
    template = _load_template(cfg)
    dataset = _eval_dataset(cfg)
    X_cam, model = _predict(cfg, template, dataset)
    regressor = JointRegressor.load_csv(cfg.joint_regressor) if cfg.joint_regressor else None
    P = labels = None
    if cfg.rig and model is not None and model.W is not None:
        labels = _load_rig(cfg.rig)[0]
        P = model.segmentation().detach().numpy()
    out = _out_dir(cfg, "eval")
    report = evaluate_predictions(X_cam, dataset, regressor, P, labels)
    report.save(out / "report.json")
    return {"report": str(out / "report.json"), "mpjpe": report.mpjpe, "re": report.re, **report.extra}


def cmd_export(cfg: RunConfig) -> dict:
    template = _load_template(cfg)
    dataset = _eval_dataset(cfg)
    if cfg.checkpoint is None:
        raise CliError("E_CONFIG", "export needs --checkpoint for the part colours")
    model = load_checkpoint(cfg.checkpoint, template)
    X_cam = load_predictions(cfg.predictions, dataset) if cfg.predictions else None
    if X_cam is None:
        y, z = data.stack_keypoints(dataset)
        X_cam = model.predict(y, z)["X_cam"].numpy()
    P = model.segmentation()
    colors = part_colors(P.detach().numpy()) if P is not None else np.tile(PALETTE[0], (template.n_vertices, 1))
    out = _out_dir(cfg, "export")
    export_mesh(template, out / "template_parts.ply", colors)
    n = len(dataset) if cfg.export_limit is None else min(cfg.export_limit, len(dataset))
    for i in range(n):
        export_mesh(template.with_vertices(X_cam[i]), out / f"{dataset[i].id}.ply", colors)
    return {"meshes": n + 1}


COMMANDS = {"lbo": cmd_lbo, "synth": cmd_synth, "train": cmd_train, "fit": cmd_fit, "eval": cmd_eval,
            "export": cmd_export}


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ConfigError,)):
        return "E_CONFIG"
    if isinstance(exc, (MeshError, SpectralError)):
        return "E_MESH"
    if isinstance(exc, (data.DatasetError, CheckpointError, AlignmentError, json.JSONDecodeError, KeyError)):
        return "E_DATA"
    if isinstance(exc, OSError):
        return "E_IO"
    if isinstance(exc, (TrainingDiverged, NonFiniteGradient, FloatingPointError)):
        return "E_NUMERIC"
    if isinstance(exc, ValueError):
        return "E_CONFIG"
    return "E_INTERNAL"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"dp3d: error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg.threads is not None:
            torch.set_num_threads(cfg.threads)
        result = COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        code = _classify(exc)
        message = str(exc).replace("\n", " ") or type(exc).__name__
        if isinstance(exc, OSError) and exc.filename:
            message = f"{exc.filename}: {exc.strerror}"
        print(f"dp3d: error[{code}]: {message}", file=sys.stderr)
        return EXIT_CODES[code]
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
