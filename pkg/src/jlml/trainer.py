"""Joint SGD training of both branches."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .model import JlmlModel, forward
from .synth import IdentityDataset
from .tensor import ConfigError, Tensor

LOG_COLUMNS = ("iter", "lr", "ce_global", "ce_local", "reg_global", "reg_local")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    lr_step_iters: int = 20_000
    lr_factor: float = 0.1
    momentum: float = 0.9
    iterations: int = 500
    batch_size: int = 32
    seed: int = 0
    # None defers to the model config
    lambda_global: float | None = None
    lambda_local: float | None = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.lr_factor <= 1:
            raise ConfigError("lr_factor must lie in (0, 1]")
        if self.lr_step_iters < 1 or self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("lr_step_iters and batch_size must be positive, iterations non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        return {f.name: ("none" if getattr(self, f.name) is None else str(getattr(self, f.name)))
                for f in dataclasses.fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        parsed = {}
        for k, text in kv.items():
            if k not in known:
                raise ConfigError(f"unknown train config key {k!r}")
            if text.strip().lower() == "none":
                parsed[k] = None
            elif k in ("iterations", "batch_size", "seed", "lr_step_iters"):
                parsed[k] = int(text)
            else:
                parsed[k] = float(text)
        return cls(**parsed)


@dataclass
class TrainState:
    iteration: int
    velocity: dict[str, np.ndarray]
    rng: np.random.Generator
    history: list[L.LossBreakdown] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: JlmlModel, seed: int) -> "TrainState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in model.params.items()},
                   np.random.default_rng(seed))


def lr_at(config: TrainConfig, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return config.base_lr * config.lr_factor ** (iteration // config.lr_step_iters)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState,
             lr: float, momentum: float) -> None:
    """Accumulating momentum: ``v = mu*v + lr*g``, ``w = w - v``, applied in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(state.iteration, f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        v = state.velocity[name]
        v *= momentum
        v += lr * g
        p.data -= v


def sample_batch(dataset: IdentityDataset, n_bs: int, rng: np.random.Generator):
    """Uniform with-replacement draw; returns (images, 0-based class labels, indices)."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size=n_bs)
    classes, _ = dataset.class_labels()
    return dataset.images[idx], classes[idx], idx


Hook = Callable[[int, np.ndarray, "L.LossBreakdown"], None]


def train(model: JlmlModel, dataset: IdentityDataset, config: TrainConfig,
          log_path=None, hook: Hook | None = None, state: TrainState | None = None):
    """Train ``model`` in place; returns ``(model, state)``.

    Both branch losses come from one forward pass over one batch, and a single
    SGD step updates every parameter. ``hook(iteration, batch_indices,
    breakdown)`` runs after each step.
    """
    n_classes = len(np.unique(dataset.ids))
    if n_classes > model.config.n_id:
        raise ConfigError(f"dataset has {n_classes} identities but the model heads have {model.config.n_id}")
    if state is None:
        state = TrainState.fresh(model, config.seed)
    lam_g, lam_l = model.config.effective_lambdas
    if config.lambda_global is not None:
        lam_g = config.lambda_global
    if config.lambda_local is not None:
        lam_l = config.lambda_local

    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        for _ in range(config.iterations):
            it = state.iteration
            lr = lr_at(config, it)
            images, labels, idx = sample_batch(dataset, config.batch_size, state.rng)
            model.zero_grad()
            try:
                out = forward(model, images, training=True)
                breakdown, objective = L.combined_losses(out, labels, model, lam_g, lam_l)
            except FloatingPointError as exc:
                raise DivergenceError(it, str(exc)) from exc
            if not math.isfinite(breakdown.total):
                raise DivergenceError(it, f"loss is {breakdown.total}")
            try:
                objective.backward()
            except FloatingPointError as exc:
                raise DivergenceError(it, str(exc)) from exc
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            sgd_step(model.params, grads, state, lr, config.momentum)
            state.history.append(breakdown)
            state.iteration += 1
            if writer is not None:
                writer.writerow([it, repr(lr), repr(breakdown.ce_global), repr(breakdown.ce_local),
                                 repr(breakdown.reg_global), repr(breakdown.reg_local)])
            if hook is not None:
                hook(it, idx, breakdown)
    finally:
        if fh is not None:
            fh.close()
    model.zero_grad()
    return model, state
