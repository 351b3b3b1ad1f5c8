"""Parameter containers, gradients, finite-difference verification and the
SGD-with-momentum training loop.

Gradients come from torch autograd; :func:`check_gradients` verifies them
against central finite differences computed without autograd.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

logger = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    """Raised when the loss becomes non-finite; carries the last good state."""

    def __init__(self, message, last_good_state, history):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history


class ParamSet:
    """Named tensors, each either trainable or frozen. Shapes never change."""

    def __init__(self, tensors: dict[str, torch.Tensor], frozen: Iterable[str] = ()):
        self._tensors = dict(tensors)
        frozen = set(frozen)
        unknown = frozen - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        self._trainable = {name: name not in frozen for name in self._tensors}

    @classmethod
    def from_module(cls, module: torch.nn.Module, frozen: Iterable[str] = ()) -> "ParamSet":
        return cls(dict(module.named_parameters()), frozen)

    def __getitem__(self, name) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def freeze(self, *names):
        for n in names:
            self._trainable[n] = False

    def trainable(self) -> dict[str, torch.Tensor]:
        return {n: t for n, t in self._tensors.items() if self._trainable[n]}

    def state(self) -> dict[str, torch.Tensor]:
        return {n: t.detach().clone() for n, t in self._tensors.items()}

    def load(self, state: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for n, t in state.items():
                self._tensors[n].copy_(t)


def grad(loss_eval: Callable[[], torch.Tensor], params: ParamSet) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_eval()`` with respect to every trainable tensor."""
    trainable = params.trainable()
    for t in trainable.values():
        t.requires_grad_(True)
    loss = loss_eval()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(trainable.values()), allow_unused=True)
    else:
        grads = [None] * len(trainable)
    out = {}
    for (name, t), g in zip(trainable.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
        out[name] = g
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    tol: float
    n_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3g} (tol {self.tol:g}) "
                f"at {self.worst} over {self.n_checked} coordinates")


def check_gradients(loss_eval: Callable[[], torch.Tensor], params: ParamSet, step: float = 1e-5,
                    tol: float = 1e-4, max_coords: int = 200, abs_floor: float = 1e-6,
                    seed: int = 0, analytic: dict[str, torch.Tensor] | None = None) -> GradCheckReport:
    """Compare gradients with central finite differences.

    Tensors with more than ``max_coords`` entries are checked on a random
    subsample of that size. The error of a coordinate is
    ``|a - n| / max(|a|, |n|, abs_floor)``. ``analytic`` overrides the
    gradients being checked (useful to test the checker itself).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic is None:
        analytic = grad(loss_eval, params)
    rng = np.random.default_rng(seed)
    worst, worst_err, n_checked = None, 0.0, 0
    per_tensor = {}
    with torch.no_grad():
        for name, t in params.trainable().items():
            flat = t.view(-1)
            a_flat = analytic[name].reshape(-1)
            n = flat.numel()
            coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
            tensor_err = 0.0
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_eval())
                flat[i] = orig - step
                f_minus = float(loss_eval())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(a_flat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                tensor_err = max(tensor_err, err)
                if err > worst_err or worst is None:
                    worst, worst_err = (name, int(i)), err
                n_checked += 1
            per_tensor[name] = tensor_err
    return GradCheckReport(worst_err, worst, tol, n_checked, per_tensor)


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.003
    momentum: float = 0.99
    weight_decay: float = 0.001
    epochs: int = 100
    lr_drop_factor: float = 10.0
    lr_drop_at_fraction: float = 0.8
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        if not 0 <= self.lr_drop_at_fraction <= 1:
            raise ValueError("lr_drop_at_fraction must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: dropped once the drop fraction has passed."""
        if epoch >= math.ceil(self.lr_drop_at_fraction * self.epochs):
            return self.learning_rate / self.lr_drop_factor
        return self.learning_rate


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(params: ParamSet, n_items: int, step_loss, cfg: OptimizerConfig, on_epoch=None):
    """Minimise a per-batch loss with SGD, momentum and L2 weight decay.

    Parameters
    ----------
    params : ParamSet
        Tensors to optimise; frozen entries are left untouched.
    n_items : int
        Dataset size; batches are index arrays into it.
    step_loss : callable
        ``step_loss(indices, epoch, batch_no) -> (loss tensor, breakdown dict)``.
    cfg : OptimizerConfig
    on_epoch : callable, optional
        Called with ``(epoch, record)`` after every epoch.

    Returns
    -------
    list of dict
        Per-epoch means of the loss breakdown plus the learning rate.
    """
    if n_items < 1:
        raise ValueError("dataset is empty")
    trainable = list(params.trainable().values())
    for t in trainable:
        t.requires_grad_(True)
    opt = torch.optim.SGD(trainable, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    last_good = params.state()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        sums, count = {}, 0
        for b, idx in enumerate(batches(n_items, cfg.batch_size, rng)):
            opt.zero_grad(set_to_none=True)
            loss, breakdown = step_loss(idx, epoch, b)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss is {loss.item()} at epoch {epoch}, batch {b}", last_good, history)
            loss.backward()
            if lr > 0:
                opt.step()
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        record = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, "lr": lr}
        history.append(record)
        last_good = params.state()
        logger.info("epoch %d: %s", epoch, {k: round(v, 6) for k, v in record.items()})
        if on_epoch is not None:
            on_epoch(epoch, record)
    return history
