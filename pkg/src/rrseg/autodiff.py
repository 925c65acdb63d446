"""Minimal reverse-mode differentiation over numpy arrays.

The operator set is exactly what the segmentation network and its losses
need: 3x3x3 convolution, instance normalisation, pooling/upsampling, affine
maps, and a handful of elementwise/reduction primitives.  Each op records
its parents and a backward closure on the output Tensor; `backward` replays
the resulting graph in reverse topological order, accumulating gradients
additively across fan-out.

Gradients are verified against central finite differences (`gradcheck`);
run the full suite with the `rrseg gradcheck` command.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import errors, kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A value in the expression graph.

    `grad` accumulates across backward calls (callers reset it between
    optimisation steps); `_parents`/`_backward` are populated only when some
    input requires gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "node_id")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        Tensor._counter += 1
        self.node_id = Tensor._counter

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise errors.ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar over the primitives below
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else affine(self, 1.0, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else affine(self, 1.0, -other)

    def __rsub__(self, other):
        return affine(self, -1.0, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else affine(self, other, 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else affine(self, 1.0 / other, 0.0)

    def __rtruediv__(self, other):
        return rdiv(other, self)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _result(data, parents, backward_fn) -> Tensor:
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise errors.ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


class Tape:
    """Reverse-topological record of every node reachable from a root.

    Execution order is itself a topological order, so replaying `nodes`
    backwards visits each op exactly once with its output gradient fully
    accumulated.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self) -> None:
        root = self.nodes[-1]
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every requires_grad leaf."""
    if loss.data.size != 1:
        raise errors.NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise errors.NonScalarLoss("loss does not depend on any requires_grad tensor")
    Tape.trace(loss).backward()


# -- elementwise and reduction primitives -------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")

    def bwd(g):
        return g, g

    return _result(x.data + y.data, (x, y), bwd)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")

    def bwd(g):
        return g, -g

    return _result(x.data - y.data, (x, y), bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")

    def bwd(g):
        return g * y.data, g * x.data

    return _result(x.data * y.data, (x, y), bwd)


def div(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "div")

    def bwd(g):
        gy = -g * x.data / (y.data * y.data)
        return g / y.data, gy

    return _result(x.data / y.data, (x, y), bwd)


def rdiv(c: float, x: Tensor) -> Tensor:
    """c / x for a python scalar c."""
    def bwd(g):
        return (-c * g / (x.data * x.data),)

    return _result(c / x.data, (x,), bwd)


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """a*x + b with scalar a, b."""
    def bwd(g):
        return (a * g,)

    return _result(a * x.data + b, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    return affine(x, c, 0.0)


def relu(x: Tensor) -> Tensor:
    def bwd(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def bwd(g):
        return (g * y * (1 - y),)

    return _result(y, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / y,)

    return _result(y, (x,), bwd)


def tsum(x: Tensor, axis=None) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).astype(x.dtype, copy=True),)

    return _result(x.data.sum(axis=axis), (x,), bwd)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in np.atleast_1d(axis)]
    )
    return scale(tsum(x, axis=axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _result(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise errors.ShapeMismatch(f"transpose expects a matrix, got {x.shape}")

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _result(np.ascontiguousarray(x.data.T), (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise errors.ShapeMismatch(f"matmul: incompatible {a.shape} @ {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bwd)


def scale_columns(x: Tensor, s: Tensor) -> Tensor:
    """Multiply column j of x[B, N] by s[j]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[1] != s.data.shape[0]:
        raise errors.ShapeMismatch(f"scale_columns: {x.shape} vs {s.shape}")

    def bwd(g):
        return g * s.data[None, :], (g * x.data).sum(axis=0)

    return _result(x.data * s.data[None, :], (x, s), bwd)


# -- network primitives --------------------------------------------------------

def conv3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3x3 convolution with padding 1 over x[C,D,H,W]; stride 1 or 2."""
    if not (x.dtype == w.dtype == b.dtype):
        raise errors.ShapeMismatch(
            f"conv3 dtypes differ: {x.dtype}, {w.dtype}, {b.dtype}"
        )
    out, xp = kernels.conv3_forward(x.data, w.data, b.data, stride)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv3_grad_x(g, w.data, x.data.shape, stride) if x.requires_grad else None
        if w.requires_grad or b.requires_grad:
            gw, gb = kernels.conv3_grad_w(g, xp, stride)
        else:
            gw = gb = None
        return gx, gw, gb

    return _result(out, (x, w, b), bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardisation with learned affine parameters."""
    c = x.data.shape[0]
    if x.data.ndim != 4:
        raise errors.ShapeMismatch(f"instance_norm expects [C,D,H,W], got {x.shape}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise errors.ShapeMismatch(
            f"instance_norm affine params must be [{c}], got {gamma.shape}, {beta.shape}"
        )
    n = x.data[0].size
    if n < 2:
        raise errors.ShapeMismatch("instance_norm needs at least 2 spatial voxels")
    mu = x.data.mean(axis=(1, 2, 3), keepdims=True)
    var = x.data.var(axis=(1, 2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    y = gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None]

    def bwd(g):
        gbeta = g.sum(axis=(1, 2, 3)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(1, 2, 3)) if gamma.requires_grad else None
        if x.requires_grad:
            gm = g.mean(axis=(1, 2, 3), keepdims=True)
            gxm = (g * xhat).mean(axis=(1, 2, 3), keepdims=True)
            gx = gamma.data[:, None, None, None] * istd * (g - gm - xhat * gxm)
        else:
            gx = None
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), bwd)


def _reflect_fold(gp: np.ndarray, pads) -> np.ndarray:
    """Adjoint of np.pad(..., mode='reflect') for end-only spatial padding."""
    g = gp
    for ax, pad in pads:
        if pad == 0:
            continue
        n = g.shape[ax] - pad
        body = np.take(g, range(n), axis=ax).copy()
        halo = np.take(g, range(n, n + pad), axis=ax)
        # padded position n-1+j mirrors source n-1-j
        idx = [slice(None)] * g.ndim
        for j in range(1, pad + 1):
            idx[ax] = n - 1 - j
            body[tuple(idx)] += np.take(halo, j - 1, axis=ax)
        g = body
    return g


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Mean over factor^3 blocks; reflect-pads trailing edges if needed."""
    if factor < 1:
        raise errors.ShapeMismatch(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return affine(x, 1.0, 0.0)
    c, d, h, w = x.data.shape
    pads = [(ax + 1, (factor - s % factor) % factor) for ax, s in enumerate((d, h, w))]
    need_pad = any(p for _, p in pads)
    if need_pad:
        for ax, p in pads:
            if p > x.data.shape[ax] - 1:
                raise errors.ShapeMismatch(
                    f"dim {x.data.shape[ax]} too small to reflect-pad by {p}"
                )
        xin = np.pad(x.data, [(0, 0)] + [(0, p) for _, p in pads], mode="reflect")
    else:
        xin = x.data
    dp, hp, wp = xin.shape[1:]
    k = factor
    blocks = xin.reshape(c, dp // k, k, hp // k, k, wp // k, k)
    y = blocks.mean(axis=(2, 4, 6), dtype=x.dtype)

    def bwd(g):
        gexp = np.broadcast_to(
            g[:, :, None, :, None, :, None] / (k ** 3),
            (c, dp // k, k, hp // k, k, wp // k, k),
        ).reshape(c, dp, hp, wp).astype(x.dtype, copy=True)
        if need_pad:
            gexp = _reflect_fold(gexp, pads)
        return (gexp,)

    return _result(y, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each voxel into a 2x2x2 block."""
    c, d, h, w = x.data.shape
    y = np.broadcast_to(
        x.data[:, :, None, :, None, :, None], (c, d, 2, h, 2, w, 2)
    ).reshape(c, 2 * d, 2 * h, 2 * w).astype(x.dtype, copy=True)

    def bwd(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _result(y, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[B,N] @ w[M,N].T + b[M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise errors.ShapeMismatch(f"linear: x{x.shape} w{w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise errors.ShapeMismatch(f"linear bias {b.shape} != [{w.data.shape[0]}]")
    y = x.data @ w.data.T + b.data[None, :]

    def bwd(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(y, (x, w, b), bwd)


def feature_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each column of x[B,N] over the batch (no learned affine)."""
    if x.data.ndim != 2 or x.data.shape[0] < 2:
        raise errors.ShapeMismatch(f"feature_norm expects [B>=2, N], got {x.shape}")
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd

    def bwd(g):
        gm = g.mean(axis=0, keepdims=True)
        gxm = (g * xhat).mean(axis=0, keepdims=True)
        return (istd * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), bwd)


# -- finite-difference verification --------------------------------------------

def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_gradient(f, arr: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar f(arr) wrt every element."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(build_loss, inputs: list[Tensor], eps: float | None = None) -> float:
    """Max relative error between backward() and central finite differences.

    `build_loss(inputs)` must return a scalar Tensor recomputed from the
    current .data of the inputs; the numeric side perturbs those arrays in
    place, keeping the oracle independent of the recorded graph.
    """
    if eps is None:
        eps = 1e-5 if inputs[0].dtype == np.float64 else 5e-3
    for t in inputs:
        t.grad = None
    loss = build_loss(inputs)
    backward(loss)

    def feval():
        return float(build_loss(inputs).data)

    worst = 0.0
    for t in inputs:
        num = numeric_gradient(feval, t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_error(np.asarray(ana, np.float64), num))
    return worst
