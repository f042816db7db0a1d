"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in the package flows through :class:`Tensor`. Operations record
their inputs and a backward rule on the output node; ``backward(loss)``
linearizes the recorded graph topologically and replays it in reverse. The
graph is rebuilt on every forward pass, so sequence lengths and shapes may
change freely between passes.

Only tensor-scalar broadcasting is supported; shaped operands must match
exactly. Per-channel and per-map parameter sharing (conv bias, peephole
weights) go through dedicated ops with explicit contracts instead.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradError(RuntimeError):
    """Raised when backward() is called on an unsuitable node."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``grad`` is allocated iff ``requires_grad``; it accumulates during
    ``backward`` and is reset with :meth:`zero_grad`. Data is never mutated
    by ops after construction (optimizers update leaf ``data`` in place
    between passes, which is outside any recorded graph).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # arithmetic sugar; tensor-scalar is the only implicit broadcast
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self):
        backward(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    assert np.all(np.isfinite(data)), f"non-finite output from op '{op}'"
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = np.zeros_like(data) if track else None
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g


def backward(loss: Tensor):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be scalar. Nodes are visited exactly once, in reverse
    topological order, so gradients from multiple consumers are fully
    accumulated before a node propagates to its parents.
    """
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not require grad; nothing to differentiate")

    # iterative DFS: recursion would overflow on long LSTM unrolls
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and pointwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar."""
    if isinstance(b, (int, float)):
        out_data = a.data + float(b)

        def bwd(g):
            _accum(a, g)

        return _node(out_data, (a,), "add", bwd)
    _check_same_shape("add", a, b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out_data, (a, b), "add", bwd)


def mul(a: Tensor, b) -> Tensor:
    """Entry-wise product; ``b`` may be a scalar."""
    if isinstance(b, (int, float)):
        s = float(b)
        out_data = a.data * s

        def bwd(g):
            _accum(a, g * s)

        return _node(out_data, (a,), "mul", bwd)
    _check_same_shape("mul", a, b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(out_data, (a, b), "mul", bwd)


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.data, -40.0, 40.0)  # saturates exactly at f64 resolution
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))

    def bwd(g):
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - t * t))

    return _node(t, (x,), "tanh", bwd)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _node(out_data, (x,), "relu", bwd)


def pointwise(name: str, x: Tensor) -> Tensor:
    """Dispatch by name; kept for config-driven activation choices."""
    try:
        return {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}[name](x)
    except KeyError:
        raise ValueError(f"unknown pointwise op '{name}'") from None


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _node(out_data, (x,), "reshape", bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _node(out_data, (x,), "transpose", bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeMismatchError(f"concat: axis {axis} out of range for rank {nd}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _node(out_data, tuple(tensors), "concat", bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.shape).copy() if np.ndim(g) == 0 else g * np.ones(x.shape))

    return _node(out_data, (x,), "sum", bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of NCHW input with FCkHkW kernels, zero padding.

    Output spatial extent: (H + 2*padding - kH)//stride + 1, likewise W.
    ``bias``, when given, is one value per output channel (shape (F,)).
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeMismatchError(
            f"conv2d: input has {c} channels but kernel expects {kc}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.shape} does not match {f} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwij,fcij->nfhw", windows, kernel.data)
    ho, wo = out_data.shape[2], out_data.shape[3]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        if kernel.requires_grad:
            _accum(kernel, np.einsum("nchwij,nfhw->fcij", windows, g))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = np.einsum("nfhw,fcij->nchwij", g, kernel.data)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dwin[:, :, :, :, i, j]
            _accum(x, dxp[:, :, padding:padding + h, padding:padding + w])

    return _node(out_data, parents, "conv2d", bwd)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by ``size``."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatchError(
            f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, dx.reshape(n, c, h, w))

    return _node(out_data, (x,), "max_pool2d", bwd)


def nearest_upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _node(out_data, (x,), "nearest_upsample2d", bwd)


# ---------------------------------------------------------------------------
# shared-parameter ops (explicit alternatives to broadcasting)
# ---------------------------------------------------------------------------

def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add one bias per channel of an NCHW map."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeMismatchError(
            f"channel_bias: input {x.shape} needs bias of shape ({x.shape[1]},), got {b.shape}")
    out_data = x.data + b.data[None, :, None, None]

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(0, 2, 3)))

    return _node(out_data, (x, b), "channel_bias", bwd)


def batch_mul(x: Tensor, w: Tensor) -> Tensor:
    """Entry-wise product of every batch element with one shared map.

    ``x`` has shape (N, *S) and ``w`` shape (*S); used for peephole weights
    that multiply the cell state identically across the batch.
    """
    if x.shape[1:] != w.shape:
        raise ShapeMismatchError(
            f"batch_mul: input {x.shape} incompatible with shared map {w.shape}")
    out_data = x.data * w.data[None]

    def bwd(g):
        _accum(x, g * w.data[None])
        _accum(w, (g * x.data).sum(axis=0))

    return _node(out_data, (x, w), "batch_mul", bwd)


# ---------------------------------------------------------------------------
# reductions and layers
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeMismatchError(f"softmax: axis {axis} out of range for rank {nd}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), "softmax", bwd)


def cross_entropy(probs: Tensor, labels: np.ndarray,
                  class_weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer labels under row probabilities.

    ``probs`` is (M, K) with rows summing to 1 (softmax output). With
    ``class_weights`` (K,), rows are weighted by their label's weight and the
    mean is taken over total weight. Probabilities are floored at 1e-12
    before the log.
    """
    if probs.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy: probs must be 2-d, got {probs.shape}")
    m, k = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise ShapeMismatchError(
            f"cross_entropy: labels shape {labels.shape} does not match {m} rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    w = np.ones(m) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    rows = np.arange(m)
    p = np.maximum(probs.data[rows, labels], 1e-12)
    wsum = w.sum()
    out_data = np.asarray((w * -np.log(p)).sum() / wsum)

    def bwd(g):
        dp = np.zeros_like(probs.data)
        dp[rows, labels] = -w / p / wsum
        _accum(probs, g * dp)

    return _node(out_data, (probs,), "cross_entropy", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW map, yielding (N, C)."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return _node(out_data, (x,), "global_avg_pool", bwd)


def dense(x: Tensor, weight: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N, D) rows: x @ weight + b with weight (D, K), b (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if b.shape != (weight.shape[1],):
        raise ShapeMismatchError(
            f"dense: bias {b.shape} does not match {weight.shape[1]} outputs")
    out_data = x.data @ weight.data + b.data[None, :]

    def bwd(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _node(out_data, (x, weight, b), "dense", bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``training`` is False or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out_data = x.data * keep * scale

    def bwd(g):
        _accum(x, g * keep * scale)

    return _node(out_data, (x,), "dropout", bwd)


def uniform_init(rng: np.random.Generator, shape: Iterable[int], fan_in: int,
                 requires_grad: bool = True) -> Tensor:
    """Fan-in-scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-limit, limit, tuple(shape)), requires_grad=requires_grad)
