"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a backward rule.  Backward rules are themselves written with
``Tensor`` operations, so calling :func:`grad` with ``create_graph=True``
returns gradients that live on the graph and can be differentiated again.
This is what makes second-order meta-gradients (differentiating through an
inner gradient step) possible.

Each node carries a monotonically increasing creation index.  Because a node
can only be created after its inputs, sorting nodes by that index gives the
tape order; :func:`grad` replays that order backwards and visits every node
at most once.  Recording can be switched off per thread (:func:`no_grad`),
which keeps tapes confined to the thread that built them.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "ParamSet",
    "TapeEntry",
    "tensor",
    "constant",
    "grad",
    "no_grad",
    "tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "conv2d",
    "maxpool2d",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "log_softmax",
    "batch_standardize",
    "softmax_cross_entropy",
    "max_last",
    "im2col",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


ParamSet = dict  # name -> Tensor

_counter = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "index", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor initialised with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.backward_fn = None
        self.index = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return constant(self.data)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = True) -> Tensor:
    """Create a leaf tensor (trainable by default)."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    out.index = next(_counter)
    out.op = op
    return out


def _unbroadcast(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


# ---------------------------------------------------------------- structure


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def backward(g, needs):
        return (broadcast_to(g, src),)

    return _result(_unbroadcast(x.data, shape), "sum_to", (x,), backward)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def backward(g, needs):
        return (sum_to(g, src),)

    return _result(np.broadcast_to(x.data, shape), "broadcast_to", (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    data = x.data.reshape(shape)
    if data.shape == src:
        return x

    def backward(g, needs):
        return (reshape(g, src),)

    return _result(data, "reshape", (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), "transpose", (x,), backward)


def _slice(x: Tensor, index: tuple) -> Tensor:
    src = x.shape

    def backward(g, needs):
        return (_embed(g, index, src),)

    return _result(x.data[index], "slice", (x,), backward)


def _embed(x: Tensor, index: tuple, shape: tuple) -> Tensor:
    # Adjoint of _slice: place x into zeros of the given shape.
    data = np.zeros(shape)
    data[index] = x.data

    def backward(g, needs):
        return (_slice(g, index),)

    return _result(data, "embed", (x,), backward)


# --------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)

    def backward(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _result(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None
        return ga, gb

    out = _result(data, "div", (a, b), backward)
    return out


def neg(x) -> Tensor:
    x = _wrap(x)

    def backward(g, needs):
        return (neg(g),)

    return _result(-x.data, "neg", (x,), backward)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a constant exponent."""
    x = _wrap(x)
    p = float(p)

    def backward(g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(x, p - 1.0))),)

    return _result(np.power(x.data, p), "power", (x,), backward)


def exp(x: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, out),)

    out = _result(np.exp(x.data), "exp", (x,), backward)
    return out


def log(x: Tensor) -> Tensor:
    def backward(g, needs):
        return (div(g, x),)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, "log", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)

    def backward(g, needs):
        return (mul(g, constant(mask)),)

    return _result(x.data * mask, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _result(np.exp(-np.logaddexp(0.0, -x.data)), "sigmoid", (x,), backward)
    return out


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, computed without overflow."""

    def backward(g, needs):
        return (mul(g, sigmoid(x)),)

    return _result(np.logaddexp(0.0, x.data), "softplus", (x,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g, needs):
        ga = sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(transpose(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), backward)


# --------------------------------------------------------------- reductions


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), 1.0 / count)


def max_last(x: Tensor) -> Tensor:
    """Maximum over the last axis; ties route the gradient to the lowest index."""
    arg = x.data.argmax(axis=-1)
    mask = np.zeros(x.shape)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    src = x.shape

    def backward(g, needs):
        return (mul(broadcast_to(reshape(g, src[:-1] + (1,)), src), constant(mask)),)

    return _result(x.data.max(axis=-1), "max_last", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))

    def backward(g, needs):
        return (sub(g, mul(exp(out), sum(g, -1, keepdims=True))),)

    out = _result(x.data - lse, "log_softmax", (x,), backward)
    return out


# ---------------------------------------------------------- convolution ops


def im2col(x: Tensor, kh: int, kw: int) -> Tensor:
    """Extract ``kh x kw`` "same"-padded patches from ``(..., H, W, C)`` input.

    Returns shape ``(..., H, W, kh * kw * C)`` with patch entries ordered
    ``(row, col, channel)``.
    """
    *lead, H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * len(lead) + [(ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)]
    padded = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(-3, -2))
    # win: (..., H, W, C, kh, kw) -> (..., H, W, kh, kw, C)
    n = win.ndim
    win = np.moveaxis(win, n - 3, n - 1)
    data = np.ascontiguousarray(win).reshape(*lead, H, W, kh * kw * C)

    def backward(g, needs):
        return (_col2im(g, kh, kw, C),)

    return _result(data, "im2col", (x,), backward)


def _col2im(g: Tensor, kh: int, kw: int, C: int) -> Tensor:
    # Adjoint of im2col: scatter-add patch entries back onto the image grid.
    *lead, H, W, _ = g.shape
    ph, pw = kh // 2, kw // 2
    cols = g.data.reshape(*lead, H, W, kh, kw, C)
    acc = np.zeros((*lead, H + kh - 1, W + kw - 1, C))
    for i in range(kh):
        for j in range(kw):
            acc[..., i : i + H, j : j + W, :] += cols[..., i, j, :]
    data = acc[..., ph : ph + H, pw : pw + W, :].copy()

    def backward(gg, needs):
        return (im2col(gg, kh, kw),)

    return _result(data, "col2im", (g,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 "same" convolution, channels-last.

    ``x``: ``(..., H, W, Cin)``; ``w``: ``(kh, kw, Cin, Cout)`` or batched
    ``(E, 1, kh, kw, Cin, Cout)`` aligned with the leading axes of ``x``.
    """
    kh, kw, cin, cout = w.shape[-4:]
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    cols = im2col(x, kh, kw)
    *lead, H, W, K = cols.shape
    wlead = w.shape[:-4]
    wm = reshape(w, wlead + (K, cout))
    # Flatten spatial positions into the row axis so one batched matmul suffices.
    n_rows = int(np.prod(lead[len(wlead) :])) * H * W if len(lead) > len(wlead) else H * W
    rows = reshape(cols, tuple(lead[: len(wlead)]) + (n_rows, K))
    out = matmul(rows, wm)
    if b is not None:
        out = add(out, b)
    return reshape(out, tuple(lead) + (H, W, cout))


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 and "valid" padding on ``(..., H, W, C)``."""
    *lead, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ValueError(f"maxpool2d input too small: {x.shape}")
    if (H, W) != (2 * H2, 2 * W2):
        x = _slice(x, (Ellipsis, slice(0, 2 * H2), slice(0, 2 * W2), slice(None)))
    k = len(lead)
    x = reshape(x, tuple(lead) + (H2, 2, W2, 2, C))
    x = transpose(x, tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3))
    x = reshape(x, tuple(lead) + (H2, W2, C, 4))
    return max_last(x)


# ---------------------------------------------------------------- composites


def batch_standardize(x: Tensor, axes: Iterable[int], eps: float = 1e-5) -> Tensor:
    """Normalise by statistics of the current batch over ``axes`` (no running stats)."""
    axes = tuple(axes)
    centered = sub(x, mean(x, axes, keepdims=True))
    var = mean(mul(centered, centered), axes, keepdims=True)
    return mul(centered, power(add(var, eps), -0.5))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``logits`` against integer or soft (probability) labels.

    ``reduction="none"`` returns one loss per row (all axes but the last).
    """
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape == logits.shape and labels.dtype.kind == "f":
        target = labels.astype(np.float64)
    else:
        if labels.shape != logits.shape[:-1]:
            raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError("labels out of range")
        target = np.eye(n_classes)[labels.astype(np.int64)]
    per_row = neg(sum(mul(log_softmax(logits), constant(target)), -1))
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return sum(per_row)
    return mean(per_row)


# ---------------------------------------------------------------- gradients


class TapeEntry(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor


def _collect(output: Tensor) -> list:
    seen = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t.index)


def tape(output: Tensor) -> list[TapeEntry]:
    """Recorded operations leading to ``output``, in topological (creation) order."""
    return [TapeEntry(t.op, t.parents, t) for t in _collect(output) if t.parents]


def grad(
    output: Tensor,
    inputs: Union[Mapping[str, Tensor], Sequence[Tensor], Tensor],
    create_graph: bool = False,
):
    """Gradient of a scalar ``output`` with respect to ``inputs``.

    ``inputs`` may be a single tensor, a sequence or a name -> tensor mapping;
    the result has the same structure.  Inputs not reachable from ``output``
    receive zeros.  With ``create_graph=True`` the returned tensors are graph
    nodes themselves, so they can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {output.shape}")
    if isinstance(inputs, Tensor):
        return grad(output, [inputs], create_graph)[0]
    if isinstance(inputs, Mapping):
        keys = list(inputs)
        vals = grad(output, [inputs[k] for k in keys], create_graph)
        return dict(zip(keys, vals))
    targets = list(inputs)
    for t in targets:
        if not t.requires_grad:
            raise ValueError("grad input does not require grad")

    target_ids = {id(t) for t in targets}
    order = _collect(output) if output.requires_grad else []
    relevant = set()
    for t in order:
        if id(t) in target_ids or any(id(p) in relevant for p in t.parents):
            relevant.add(id(t))

    found: dict = {}
    if id(output) in relevant:
        grads = {id(output): constant(np.ones(output.shape))}
        prev = _recording()
        _state.enabled = create_graph
        try:
            for t in reversed(order):
                tid = id(t)
                if tid not in relevant:
                    continue
                g = grads.pop(tid, None)
                if g is None:
                    continue
                if tid in target_ids:
                    found[tid] = g
                if not t.parents:
                    continue
                needs = tuple(id(p) in relevant for p in t.parents)
                for p, gp, need in zip(t.parents, t.backward_fn(g, needs), needs):
                    if not need or gp is None:
                        continue
                    pid = id(p)
                    grads[pid] = add(grads[pid], gp) if pid in grads else gp
        finally:
            _state.enabled = prev

    result = []
    for t in targets:
        g = found.get(id(t))
        if g is None:
            g = constant(np.zeros(t.shape))
        elif not create_graph and g.requires_grad:
            g = g.detach()
        elif g.data.shape != t.shape:
            g = broadcast_to(g, t.shape)
        result.append(g)
    return result
