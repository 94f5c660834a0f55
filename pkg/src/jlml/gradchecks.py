"""Finite-difference checks for every differentiable op and for the full model objective.

Each entry of :data:`CHECKS` draws random float64 inputs from a seed, runs
:func:`jlml.tensor.gradcheck` and returns the max relative error; the
threshold that applies is stored next to it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .model import build, forward, toy_config
from .tensor import Tensor

SMOOTH_TOL = 1e-4
KINK_TOL = 1e-3


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * (margin + np.abs(a)), a)


def check_matmul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return T.gradcheck(T.matmul, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal((4, 2)))], seed=seed)


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    args = [_t(rng.standard_normal((3, 5))), _t(rng.standard_normal((4, 5))), _t(rng.standard_normal(4))]
    return T.gradcheck(T.linear, args, seed=seed)


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, stride, pad in ((3, 1, 1), (3, 2, 1), (1, 2, 0)):
        args = [_t(rng.standard_normal((2, 3, 5, 5))), _t(rng.standard_normal((2, 3, k, k))),
                _t(rng.standard_normal(2))]
        worst = max(worst, T.gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad), args, seed=seed))
    return worst


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return T.gradcheck(T.relu, [_t(_away_from_zero(rng.standard_normal((4, 5))))], seed=seed)


def check_maxpool2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng.permutation(2 * 2 * 8 * 8).reshape(2, 2, 8, 8) * 0.1)
    return max(T.gradcheck(lambda v: T.maxpool2d(v, 3, 2, 1), [x], seed=seed),
               T.gradcheck(lambda v: T.maxpool2d(v, 2, (1, 2), (0, 1, 0, 0)), [x], seed=seed))


def check_avgpool2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng.standard_normal((2, 2, 8, 8)))
    return max(T.gradcheck(lambda v: T.avgpool2d(v, (4, 8)), [x], seed=seed),
               T.gradcheck(lambda v: T.avgpool2d(v, 2, 2), [x], seed=seed))


def check_slice_concat(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _t(rng.standard_normal((2, 2, 8, 3)))
    return T.gradcheck(lambda v: T.concat(T.slice_h(v, 4)[::-1], axis=1), [x], seed=seed)


def check_add_mul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = _t(rng.standard_normal((3, 4))), _t(rng.standard_normal((1, 4)))
    return T.gradcheck(lambda a, b: T.mul(T.add(a, b), a), [a, b], seed=seed)


def check_batchnorm2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for training in (True, False):
        x = _t(rng.standard_normal((3, 2, 2, 3)))
        g, b = _t(rng.uniform(0.5, 1.5, 2)), _t(rng.standard_normal(2))
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        op = lambda x, g, b: T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training)  # noqa: E731
        worst = max(worst, T.gradcheck(op, [x, g, b], seed=seed))
    return worst


def check_softmax_xent(seed: int) -> float:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=4)
    return T.gradcheck(lambda z: L.softmax_xent(z, labels), [_t(rng.standard_normal((4, 5)))], seed=seed)


def check_group_lasso_21(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return T.gradcheck(L.group_lasso_21, [_t(_away_from_zero(rng.standard_normal((5, 7)), 1e-2))], seed=seed)


def check_exclusive_group_lasso_12(seed: int) -> float:
    rng = np.random.default_rng(seed)
    W = _t(_away_from_zero(rng.standard_normal((4, 6)), 1e-2))
    return T.gradcheck(lambda w: L.exclusive_group_lasso_12(w, 3, 2), [W], seed=seed)


def gradcheck_config(**overrides):
    """Narrow network with every structural element.

    Every layer keeps at least two channels (a single-channel layer followed by
    batch norm is scale invariant, leaving gradients at round-off level) and
    at least eight values per batch-norm channel.
    """
    base = dict(
        input_size=(48, 48),
        stem_channels=2,
        stage_widths_global=((2, 2, 3), (2, 2, 3), (2, 2, 4), (2, 2, 4)),
        stage_widths_local=((2, 2, 2), (2, 2, 3), (2, 2, 3), (2, 2, 4)),
        blocks_per_stage=1,
        m=2,
        feat_dim_global=3,
        feat_dim_local=3,
        n_id=3,
        lambda_global=0.05,
        lambda_local=0.05,
    )
    base.update(overrides)
    return toy_config(**base)


def check_model(seed: int, loss_mode: str = "multiloss", checks_per_tensor: int = 2,
                eps: float = 1e-6) -> float:
    """Full forward (train-mode BN) plus combined branch losses on a 2-image batch."""
    cfg = gradcheck_config(loss_mode=loss_mode)
    model = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3) + cfg.input_size)
    labels = rng.integers(0, cfg.n_id, size=2)
    names = list(model.params)
    tensors = [model.params[n] for n in names]
    # keep the penalty arguments off their kinks
    for key in ("global.fc.w", "local.fc.w"):
        model.params[key].data[...] = _away_from_zero(model.params[key].data, 1e-2)

    def objective(*_params):
        bufs = {k: v.copy() for k, v in model.buffers.items()}
        snapshot = model.buffers
        model.buffers = bufs
        try:
            out = forward(model, x, training=True)
            return L.combined_losses(out, labels, model)[1]
        finally:
            model.buffers = snapshot

    return T.gradcheck(objective, tensors, eps=eps, seed=seed,
                       max_checks=checks_per_tensor, kink_retries=3)


@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable[[int], float]
    tol: float


CHECKS: dict[str, Check] = {c.name: c for c in (
    Check("matmul", check_matmul, SMOOTH_TOL),
    Check("linear", check_linear, SMOOTH_TOL),
    Check("add_mul", check_add_mul, SMOOTH_TOL),
    Check("conv2d", check_conv2d, SMOOTH_TOL),
    Check("relu", check_relu, KINK_TOL),
    Check("maxpool2d", check_maxpool2d, KINK_TOL),
    Check("avgpool2d", check_avgpool2d, SMOOTH_TOL),
    Check("slice_concat", check_slice_concat, SMOOTH_TOL),
    Check("batchnorm2d", check_batchnorm2d, SMOOTH_TOL),
    Check("softmax_xent", check_softmax_xent, SMOOTH_TOL),
    Check("group_lasso_21", check_group_lasso_21, KINK_TOL),
    Check("exclusive_group_lasso_12", check_exclusive_group_lasso_12, KINK_TOL),
    Check("model_multiloss", lambda s: check_model(s, "multiloss"), KINK_TOL),
    Check("model_uniloss", lambda s: check_model(s, "uniloss"), KINK_TOL),
)}


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    passed: bool
    detail: str = ""


def run_checks(seeds=range(10), names=None) -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        if names is not None and name not in names:
            continue
        worst, detail = 0.0, ""
        try:
            for s in seeds:
                worst = max(worst, check.fn(s))
        except (FloatingPointError, T.GradcheckError) as exc:
            results.append(CheckResult(name, float("inf"), check.tol, False, str(exc)))
            continue
        results.append(CheckResult(name, worst, check.tol, worst < check.tol, detail))
    return results
