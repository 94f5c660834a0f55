"""Minimal dense-tensor engine with reverse-mode gradients.

Every op consumes :class:`Tensor` values and records a :class:`Node` holding
the closure that maps the output gradient back to its inputs. Calling
:meth:`Tensor.backward` collects the nodes that produced the tensor into a
:class:`Graph` and replays them in reverse execution order.

Layout is row-major N x C x H x W throughout.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "ConfigError",
    "GradcheckError",
    "Tensor",
    "Node",
    "Graph",
    "record",
    "add",
    "mul",
    "sum_all",
    "matmul",
    "linear",
    "reshape",
    "conv2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "slice_h",
    "concat",
    "batchnorm2d",
    "gradcheck",
]


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


class ConfigError(ValueError):
    """A structural parameter (stripe count, widths, ...) is invalid."""


class GradcheckError(AssertionError):
    """Raised when a gradient is non-finite during a finite-difference check."""


_seq = itertools.count()


class Tensor:
    """Dense array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        # ascontiguousarray would promote 0-d arrays to 1-d
        t.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        t.grad = None
        t.requires_grad = requires_grad
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")
        Graph(self).backward(grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Node:
    """One executed op: its inputs, output and backward closure."""

    __slots__ = ("seq", "name", "inputs", "output", "backward_fn", "released")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.seq = next(_seq)
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.released = False


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise FloatingPointError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")


def record(name: str, data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of op ``name`` and register its backward."""
    _check_finite(data, f"forward of {name}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        out._node = Node(name, inputs, out, backward_fn)
    return out


class Graph:
    """Ordered record of the nodes that produced ``root``.

    Nodes are sorted by execution sequence; :meth:`backward` visits them in
    exactly the reverse order. A node's saved state is dropped after it has
    run, so a second backward over the same forward raises.
    """

    def __init__(self, root: Tensor):
        self.root = root
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray) -> list[str]:
        if any(n.released for n in self.nodes):
            raise RuntimeError("backward called twice on the same graph; run a new forward first")
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            node.released = True
            visited.append(node.name)
            if g is None:
                node.backward_fn = None
                continue
            in_grads = node.backward_fn(g)
            node.backward_fn = None
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(gi, f"backward of {node.name}")
                if t._node is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        if self.root._node is None and self.root.requires_grad:
            self.root.grad = seed.copy() if self.root.grad is None else self.root.grad + seed
        return visited


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype), False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot combine {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape N x d and ``w`` of shape c x d."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", out, inputs, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _padded(x: np.ndarray, pt: int, pb: int, pl: int, pr: int, fill: float = 0.0) -> np.ndarray:
    if not (pt or pb or pl or pr):
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + pt + pb, w + pl + pr), fill, dtype=x.dtype)
    out[:, :, pt:pt + h, pl:pl + w] = x
    return out


def _pad4(pad) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(pad, (tuple, list)) and len(pad) == 4:
        return tuple(int(p) for p in pad)  # type: ignore[return-value]
    ph, pw = _pair(pad)
    return ph, ph, pw, pw


def _out_extent(n: int, k: int, s: int, what: str) -> int:
    if k > n:
        raise DimensionError(f"{what}: kernel {k} larger than padded input {n}")
    return (n - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects N x C x H x W input and F x C x kh x kw weight")
    N, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    sh, sw = _pair(stride)
    pt, pb, pl, pr = _pad4(pad)
    Hp, Wp = H + pt + pb, W + pl + pr
    Ho = _out_extent(Hp, kh, sh, "conv2d")
    Wo = _out_extent(Wp, kw, sw, "conv2d")
    xp = _padded(x.data, pt, pb, pl, pr)
    wd = w.data

    K = C * kh * kw
    M = N * Ho * Wo
    # im2col laid out as K x (N*Ho*Wo) so each direction is a single GEMM
    if kh == 1 and kw == 1:
        src = xp[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]
        cols = src.transpose(1, 0, 2, 3).reshape(K, M)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(K, M)
    w2 = wd.reshape(F, K)
    out = (w2 @ cols).reshape(F, N, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(F, M)
        dw = (g2 @ cols.T).reshape(F, C, kh, kw)
        dcols = (w2.T @ g2).reshape(C, kh, kw, N, Ho, Wo)
        dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += (
                    dcols[:, i, j].transpose(1, 0, 2, 3))
        dx = dxp[:, :, pt : pt + H, pl : pl + W]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def _pool_geometry(x: Tensor, k, stride, pad, what):
    if x.ndim != 4:
        raise DimensionError(f"{what} expects an N x C x H x W input")
    N, C, H, W = x.shape
    kh, kw = _pair(k)
    sh, sw = _pair(stride)
    pt, pb, pl, pr = _pad4(pad)
    Hp, Wp = H + pt + pb, W + pl + pr
    Ho = _out_extent(Hp, kh, sh, what)
    Wo = _out_extent(Wp, kw, sw, what)
    return N, C, H, W, kh, kw, sh, sw, pt, pb, pl, pr, Hp, Wp, Ho, Wo


def maxpool2d(x: Tensor, k, stride, pad=0) -> Tensor:
    """Window max; padded cells never win. Ties go to the first cell in row-major window order."""
    N, C, H, W, kh, kw, sh, sw, pt, pb, pl, pr, Hp, Wp, Ho, Wo = _pool_geometry(x, k, stride, pad, "maxpool2d")
    xp = x.data
    if pt or pb or pl or pr:
        xp = _padded(xp, pt, pb, pl, pr, -np.inf)
    out = np.full((N, C, Ho, Wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((N, C, Ho, Wo), dtype=np.int32)
    for i in range(kh):
        for j in range(kw):
            v = xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]
            better = v > out
            out = np.where(better, v, out)
            arg = np.where(better, i * kw + j, arg)

    def backward(g):
        dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += \
                    np.where(arg == i * kw + j, g, 0)
        return (dxp[:, :, pt : pt + H, pl : pl + W],)

    return record("maxpool2d", out, (x,), backward)


def avgpool2d(x: Tensor, k, stride=None) -> Tensor:
    if stride is None:
        stride = k
    N, C, H, W, kh, kw, sh, sw, *_rest, Ho, Wo = _pool_geometry(x, k, stride, 0, "avgpool2d")
    if (kh, kw) == (H, W):
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / (kh * kw), x.shape).copy(),)

        return record("avgpool2d", out, (x,), backward)

    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += x.data[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]
    out /= kh * kw

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        gs = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += gs
        return (dx,)

    return record("avgpool2d", out, (x,), backward)


def _take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return record("slice", x.data[idx].copy(), (x,), backward)


def slice_h(x: Tensor, m: int) -> list[Tensor]:
    """Split the height axis into ``m`` equal stripes, top to bottom."""
    if x.ndim != 4:
        raise DimensionError("slice_h expects an N x C x H x W input")
    if m < 1 or x.shape[2] % m:
        raise ConfigError(f"height {x.shape[2]} is not divisible into {m} stripes")
    if m == 1:
        return [x]
    h = x.shape[2] // m
    return [_take(x, 2, j * h, (j + 1) * h) for j in range(m)]


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for d, (a, b) in enumerate(zip(t.shape, ref)) if d != ax):
            raise DimensionError(f"concat: extents {t.shape} and {ref} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=ax)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))]

    return record("concat", out, xs, backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.9,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation. In training mode the running buffers are updated in place."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: affine parameters must have shape ({x.shape[1]},)")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        centred = xd - mu.reshape(1, -1, 1, 1)
        var = np.einsum("nchw,nchw->c", centred, centred) / (xd.size // xd.shape[1])
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, -1, 1, 1).astype(xd.dtype)) * inv_std.reshape(1, -1, 1, 1)
    gd = gamma.data.reshape(1, -1, 1, 1)
    out = gd * xhat + beta.data.reshape(1, -1, 1, 1)
    M = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            dx = (inv_std.reshape(1, -1, 1, 1) / M) * (
                M * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(1, -1, 1, 1)
        return dx, dgamma, dbeta

    return record("batchnorm2d", out, (x, gamma, beta), backward)


def gradcheck(op: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              seed: int = 0, max_checks: int | None = None, kink_retries: int = 0) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The output of ``op(*inputs)`` is contracted against a fixed random tensor to
    obtain a scalar. Inputs must be float64. ``max_checks`` samples that many
    elements per input instead of probing all of them.

    With ``kink_retries > 0`` an element whose forward and backward one-sided
    differences disagree by more than 0.02% (plus a 1e-7 noise floor) is taken to
    straddle a ReLU or max-pool switch; the step is shrunk tenfold up to that
    many times, and an element still straddling afterwards is left out.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        _check_finite(t.data, "gradcheck input")
        t.grad = None
    out = op(*inputs)
    # separate stream so the projection never coincides with caller data drawn from ``seed``
    rng = np.random.default_rng([seed, 0x6A6C6D6C])
    proj = rng.standard_normal(out.shape)
    if out._node is None:
        raise GradcheckError("op output is not connected to any input requiring grad")
    out.backward(proj)

    def objective() -> float:
        return float(np.sum(op(*inputs).data * proj))

    worst = 0.0
    f0 = objective() if kink_retries else 0.0
    probed = skipped = 0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            raise GradcheckError(f"non-finite analytic gradient for input {k} at {bad}")
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            step = eps
            for attempt in range(kink_retries + 1):
                flat[i] = orig + step
                fp = objective()
                flat[i] = orig - step
                fm = objective()
                flat[i] = orig
                if not kink_retries:
                    break
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                kinked = abs(fwd - bwd) > 2e-4 * (abs(fwd) + abs(bwd)) + 1e-7
                if not kinked:
                    break
                step /= 10
            num = (fp - fm) / (2 * step)
            if not np.isfinite(num):
                raise GradcheckError(f"non-finite numeric gradient for input {k} at flat index {i}")
            probed += 1
            if kink_retries and kinked:
                skipped += 1
                continue
            a = float(a_flat[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    if probed and skipped == probed:
        raise GradcheckError(f"all {probed} probes sit on kinks; move the inputs")
    return worst
