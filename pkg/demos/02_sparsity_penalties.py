"""
Structured sparsity on the feature layers
=========================================

The global feature layer is pushed towards few active input columns, and
the local feature layer towards competition between stripes. This script
evaluates both penalties on small matrices and then lets plain gradient
descent minimise each one.
"""

import numpy as np

from jlml import losses as L
from jlml import tensor as T
from jlml.tensor import Tensor

rng = np.random.default_rng(0)
W = rng.standard_normal((4, 8))

# column-group penalty: sum of column norms
print("l21 =", L.group_lasso_21(Tensor(W)).item())
print("direct:", np.linalg.norm(W, axis=0).sum())

# stripe-exclusive penalty with m=4 stripes of width 2
print("l12 =", L.exclusive_group_lasso_12(Tensor(W), m=4).item())
print("direct:", (np.abs(W).reshape(4, 4, 2).sum(axis=2) ** 2).sum())

# scaling behaviour: linear for l21, quadratic for l12
for c in (0.5, 2.0, -3.0):
    print(c,
          L.group_lasso_21(Tensor(c * W)).item() / L.group_lasso_21(Tensor(W)).item(),
          L.exclusive_group_lasso_12(Tensor(c * W), 4).item() / L.exclusive_group_lasso_12(Tensor(W), 4).item())


def descend(penalty, W, lam, lr=0.01, steps=1000):
    p = Tensor(W.copy(), requires_grad=True)
    target = Tensor(W.copy())
    for _ in range(steps):
        p.grad = None
        # keep close to the start point while paying the penalty
        diff = p + target * Tensor(-1.0)
        obj = T.sum_all(diff * diff) * Tensor(0.5) + penalty(p) * Tensor(lam)
        obj.backward()
        p.data -= lr * p.grad
    return p.data


# the column penalty zeroes whole columns
print("column norms before:   ", np.round(np.linalg.norm(W, axis=0), 3))
G = descend(L.group_lasso_21, W, lam=1.5)
print("column norms after l21:", np.round(np.linalg.norm(G, axis=0), 3))

# the exclusive penalty thins entries inside each stripe segment, yet every
# segment keeps something because its cost grows with the square of its l1 norm
E = descend(lambda t: L.exclusive_group_lasso_12(t, 4), W, lam=0.5)
print("near-zero entries before/after:", int((np.abs(W) < 0.05).sum()), int((np.abs(E) < 0.05).sum()))
print("segment l1 norms after l12:\n", np.round(np.abs(E).reshape(4, 4, 2).sum(axis=2), 3))
