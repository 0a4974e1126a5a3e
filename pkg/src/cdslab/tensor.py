"""Minimal reverse-mode automatic differentiation on top of numpy.

Every primitive returns a new :class:`Tensor`. When gradients are enabled and
at least one input requires a gradient, the output remembers the operation
that produced it. :func:`backward` sorts those operations into a :class:`Tape`
(inputs always precede the operation consuming them) and replays it in
reverse, accumulating gradients into the ``grad`` slot of leaf tensors.

Broadcasting is deliberately restricted: binary operations accept identical
shapes or a scalar on either side. Bias addition has its own primitive.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericDomainError

NORM_EPS = 1e-12
BN_EPS = 1e-5
LOG_EPS = 1e-12

_local = threading.local()
_op_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Op:
    __slots__ = ("id", "name", "inputs", "backward")

    def __init__(self, name: str, inputs: tuple, backward: Callable):
        self.id = next(_op_ids)
        self.name = name
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """An n-dimensional array that may take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: Op | None = None

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = Op(name, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Operations leading to a tensor, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if node._op is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._op.inputs:
                if parent._op is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def records(self) -> list[tuple[int, str, tuple[int, ...], int]]:
        """(op id, op name, input tensor ids, output tensor id) per operation."""
        return [(n._op.id, n._op.name, tuple(id(t) for t in n._op.inputs), id(n)) for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._op is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    tape = tape if tape is not None else Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node._op.backward(g)
        for inp, ig in zip(node._op.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._op is None:
                ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    a = a if a_is else as_tensor(a, like=b if b_is else None)
    b = b if b_is else as_tensor(b, like=a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / (b.data * b.data), b)

    return _record("div", a.data / b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    if np.any(x.data <= 0) or not np.all(np.isfinite(x.data)):
        raise NumericDomainError("log of a non-positive or non-finite value")
    floored = x.data < eps
    xs = np.maximum(x.data, eps)
    return _record("log", np.log(xs), (x,), lambda g: (np.where(floored, 0, g / xs),))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; the backward pass scatter-adds."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("take", np.array(x.data[index]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a vector along one axis of ``x`` (a linear-layer or channel bias)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias of shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        return g, g.sum(axis=other_axes)

    return _record("bias_add", x.data + b.data.reshape(view), (x, b), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    """Correlate an already padded input.

    Returns the output and the im2col matrix, whose columns are ordered
    (kh, kw, c) so the copy reads channel-contiguous memory.
    """
    n = xp.shape[0]
    o, c, kh, kw = w.shape
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = (cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride {stride} or padding {pad}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out, cols = _conv_forward(xp, w.data, stride, ho, wo)

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = (g.transpose(0, 2, 3, 1).reshape(-1, o).T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of the zero-dilated output
            # gradient with the spatially flipped, channel-swapped kernel
            hp, wp = xp.shape[2:]
            dil = np.zeros((n, o, (ho - 1) * stride + 1 + 2 * (kh - 1), (wo - 1) * stride + 1 + 2 * (kw - 1)),
                           dtype=g.dtype)
            dil[:, :, kh - 1:kh - 1 + (ho - 1) * stride + 1:stride,
                kw - 1:kw - 1 + (wo - 1) * stride + 1:stride] = g
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            hu, wu = (ho - 1) * stride + kh, (wo - 1) * stride + kw
            gpart, _ = _conv_forward(dil, wf, 1, hu, wu)
            if (hu, wu) == (hp, wp):
                dxp = gpart
            else:  # trailing rows/columns the strided windows never reached
                dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                dxp[:, :, :hu, :wu] = gpart
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return gx, gw

    return _record("conv2d", out, (x, w), bw)


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, mode: str = "train", momentum: float = 0.1,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    ``mode`` is ``"train"`` (batch statistics, running stats updated in place),
    ``"eval"`` (running statistics) or ``"batch"`` (batch statistics, running
    stats left untouched).
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if n == 0:
        raise DimensionError("batchnorm2d on an empty batch")
    view = (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(view)) * inv.reshape(view)
        out = (gamma.data.reshape(view) * xhat + beta.data.reshape(view)).astype(x.dtype)

        def bw_eval(g):
            gx = g * (gamma.data * inv).reshape(view)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record("batchnorm2d", out, (x, gamma, beta), bw_eval)
    if mode not in ("train", "batch"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(view)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(view)
    out = (gamma.data.reshape(view) * xhat + beta.data.reshape(view)).astype(x.dtype)
    if mode == "train":
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(view)
        gx = (inv.reshape(view) / m) * (
            m * dxhat - dxhat.sum(axis=(0, 2, 3)).reshape(view)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(view))
        return gx, dgamma, dbeta

    return _record("batchnorm2d", out, (x, gamma, beta), bw)


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    if v.ndim != 2:
        raise DimensionError(f"l2_normalize expects [N x D], got {v.shape}")
    norm = np.sqrt((v.data * v.data).sum(axis=1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    y = v.data / denom

    def bw(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return _record("l2_normalize", y, (v,), bw)


def log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor.

    Entries where ``mask`` is true are excluded from the normalizer; their
    output is 0 and they receive no gradient.
    """
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects a 2-D tensor, got {x.shape}")
    keep = np.ones(x.shape, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask shape {keep.shape} does not match {x.shape}")
    live = keep.any(axis=1, keepdims=True)
    s = np.where(keep, x.data, -np.inf)
    m = np.where(live, s.max(axis=1, keepdims=True), 0)
    with np.errstate(divide="ignore"):
        lse = m + np.log(np.where(keep, np.exp(s - m), 0).sum(axis=1, keepdims=True))
    out = np.where(keep & live, x.data - np.where(live, lse, 0), 0).astype(x.dtype)
    p = np.where(keep, np.exp(out), 0)

    def bw(g):
        gk = np.where(keep, g, 0)
        return (gk - p * gk.sum(axis=1, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each sample (all trailing axes flattened); shape [N]."""
    flat = x.data.reshape(x.shape[0], -1)
    norm = np.sqrt((flat * flat).sum(axis=1))
    safe = np.where(norm > 0, norm, 1)

    def bw(g):
        gf = np.where(norm > 0, g / safe, 0)[:, None] * flat
        return (gf.reshape(x.shape),)

    return _record("row_norm", norm, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4,
                   coords: Iterable[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of ``fn()`` with respect to ``param``.

    Only ``coords`` are probed when given; other entries stay zero.
    """
    grad = np.zeros_like(param.data)
    coords = list(np.ndindex(param.shape)) if coords is None else list(coords)
    with no_grad():
        for idx in coords:
            orig = param.data[idx]
            param.data[idx] = orig + h
            fp = float(fn().data)
            param.data[idx] = orig - h
            fm = float(fn().data)
            param.data[idx] = orig
            grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8) if analytic.size else 1.0
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    Inputs should be float64; 32-bit differences are too noisy at this step.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        numeric = numerical_grad(fn, p, h, coords)
        sel = tuple(np.array(coords).T)
        worst = max(worst, relative_error(analytic[sel], numeric[sel]))
    return worst
