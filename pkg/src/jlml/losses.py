"""Classification losses and structured-sparsity penalties on the feature layers."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .model import MULTILOSS, UNILOSS, ForwardOutput, JlmlModel
from .tensor import ConfigError, DimensionError, Tensor

# smoothing used only inside the penalty gradients; values stay exact
SMOOTH_EPS = 1e-8


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` (0-based class indices)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return T.record("softmax_xent", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def group_lasso_21(W: Tensor, eps: float = SMOOTH_EPS) -> Tensor:
    """Sum of column l2 norms of a c x d matrix."""
    if W.ndim != 2:
        raise DimensionError("group_lasso_21 expects a matrix")
    wd = W.data
    # hypot avoids the underflow of squaring tiny entries
    norms = np.hypot.reduce(wd, axis=0) if wd.shape[0] else np.zeros(wd.shape[1], wd.dtype)
    value = norms.sum()

    def backward(g):
        return (g * wd / np.sqrt(norms * norms + eps),)

    return T.record("group_lasso_21", np.asarray(value, dtype=wd.dtype), (W,), backward)


def exclusive_group_lasso_12(W: Tensor, m: int, d_l: int | None = None,
                             eps: float = SMOOTH_EPS) -> Tensor:
    """Sum over rows and stripes of the squared l1 norm of each length-d_l row segment."""
    if W.ndim != 2:
        raise DimensionError("exclusive_group_lasso_12 expects a matrix")
    c, cols = W.shape
    if d_l is None:
        if m < 1 or cols % m:
            raise ConfigError(f"{cols} columns cannot be split into {m} stripe groups")
        d_l = cols // m
    if m * d_l != cols:
        raise ConfigError(f"column count {cols} != m*d_l = {m}*{d_l}")
    wd = W.data
    seg = wd.reshape(c, m, d_l)
    l1 = np.abs(seg).sum(axis=2)
    value = (l1 * l1).sum()

    def backward(g):
        smooth_sign = seg / np.sqrt(seg * seg + eps)
        return ((2 * g) * (l1[:, :, None] * smooth_sign).reshape(c, cols),)

    return T.record("exclusive_group_lasso_12", np.asarray(value, dtype=wd.dtype), (W,), backward)


@dataclass
class LossBreakdown:
    ce_global: float
    ce_local: float
    reg_global: float
    reg_local: float
    l_global: float
    l_local: float
    lambda_global: float
    lambda_local: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def combined_losses(outputs: ForwardOutput, labels, model: JlmlModel,
                    lambda_global: float | None = None, lambda_local: float | None = None,
                    mode: str | None = None) -> tuple[LossBreakdown, Tensor]:
    """Branch losses with their sparsity terms, and the objective to backpropagate.

    MultiLoss backpropagates ``l_global + l_local``: each branch receives only its
    own loss while the shared stem collects both. UniLoss uses one cross-entropy
    on the fused head plus both penalties; its ``ce_global``/``ce_local`` fields
    both hold that fused cross-entropy.
    """
    cfg = model.config
    lg_default, ll_default = cfg.effective_lambdas
    lam_g = lg_default if lambda_global is None else float(lambda_global)
    lam_l = ll_default if lambda_local is None else float(lambda_local)
    mode = cfg.loss_mode if mode is None else mode
    if mode not in (MULTILOSS, UNILOSS):
        raise ConfigError(f"unknown loss mode {mode!r}")

    reg_g = group_lasso_21(model.W_G)
    reg_l = exclusive_group_lasso_12(model.W_L, cfg.m)

    def penalised(ce: Tensor, lam: float, reg: Tensor) -> Tensor:
        return ce if lam == 0 else T.add(ce, T.mul(reg, lam))

    if mode == MULTILOSS:
        if outputs.global_logits is None or outputs.local_logits is None:
            raise ConfigError("MultiLoss needs per-branch logits; model was built for UniLoss")
        ce_g = softmax_xent(outputs.global_logits, labels)
        ce_l = softmax_xent(outputs.local_logits, labels)
        l_g = penalised(ce_g, lam_g, reg_g)
        l_l = penalised(ce_l, lam_l, reg_l)
        objective = T.add(l_g, l_l)
    else:
        if outputs.fused_logits is None:
            raise ConfigError("UniLoss needs the fused head; model was built for MultiLoss")
        ce_g = ce_l = softmax_xent(outputs.fused_logits, labels)
        l_g = penalised(ce_g, lam_g, reg_g)
        l_l = penalised(ce_l, lam_l, reg_l)
        objective = penalised(l_g, lam_l, reg_l)

    breakdown = LossBreakdown(
        ce_global=ce_g.item(), ce_local=ce_l.item(),
        reg_global=reg_g.item(), reg_local=reg_l.item(),
        l_global=l_g.item(), l_local=l_l.item(),
        lambda_global=lam_g, lambda_local=lam_l,
        total=objective.item(),
    )
    return breakdown, objective
