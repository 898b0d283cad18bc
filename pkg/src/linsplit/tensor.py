"""Dense float64 tensors with tape-style reverse-mode autodiff.

Every operation that involves a tensor with ``requires_grad`` records its
parents and a backward rule on the output.  The graph is rebuilt on every
forward pass and walked in reverse topological order by :meth:`Tensor.backward`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor shape entries must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, neg(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable tensor.

        Gradients accumulate into ``.grad`` until :meth:`zero_grad` is called.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {self.shape}")
        order = graph_nodes(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Return the recorded graph under ``root`` in topological order.

    Inputs precede the nodes that consume them; each node appears once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def record(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output; links into the graph only if needed."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _channel_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_sum(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _is_channel_vector(a: Tensor, v: Tensor) -> bool:
    return v.ndim == 1 and a.ndim >= 2 and a.shape[1] == v.shape[0]


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def add_channel(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1 (biases of fc and conv layers)."""
    if not _is_channel_vector(x, bias):
        raise DimensionError(f"add_channel: bias {bias.shape} does not match channels of {x.shape}")
    return record(x.data + _channel_view(bias.data, x.ndim), (x, bias),
                  lambda g: (g, _channel_sum(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    ``b`` may also be a vector of length ``a.shape[1]``, broadcast over every
    other axis (channel-wise product).
    """
    if a.shape == b.shape:
        return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _is_channel_vector(a, b):
        bv = _channel_view(b.data, a.ndim)
        return record(a.data * bv, (a, b), lambda g: (g * bv, _channel_sum(g * a.data)))
    raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")


mul_elementwise = mul


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


# ------------------------------------------------------------ shape handling

def tsum(x: Tensor) -> Tensor:
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return record(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return record(x.data.T, (x,), lambda g: (g.T,))


def select(x: Tensor, index: int) -> Tensor:
    """Row ``index`` of ``x`` along axis 0."""

    def backward(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return record(x.data[index], (x,), backward)


def take_channels(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather the given channels (axis 1)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise DimensionError("take_channels: empty index set")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise DimensionError(f"take_channels: indices out of range for {x.shape}")

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return record(x.data[:, idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise DimensionError("concat: nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return record(np.concatenate([t.data for t in xs], axis=axis), xs,
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _out_size(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"{what}: size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N×C×H×W input with O×C×kh×kw kernels."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho = _out_size(h, kh, stride, padding, "conv2d")
    wo = _out_size(wd, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return record(np.ascontiguousarray(out), (x, w), backward)


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling with floor-mode output size; ties go to the first element."""
    stride = stride or k
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N×C×H×W, got {x.shape}")
    n, c, h, wd = x.shape
    if h < k or wd < k:
        raise ConfigError(f"maxpool2d: window {k} larger than input {h}×{wd}")
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx,)

    return record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """N×C×H×W -> N×C spatial mean; 2-D inputs pass through unchanged."""
    if x.ndim == 2:
        return x
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return record(x.data.mean(axis=(2, 3)), (x,),
                  lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


# ----------------------------------------------------------------------- loss

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    n = labels.size
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, labels]))

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return record(np.array(loss), (logits,), backward)
