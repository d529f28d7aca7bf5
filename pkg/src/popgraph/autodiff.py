"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable value is a :class:`Tensor`. Primitives record their
inputs and a backward rule on the output tensor; :func:`backward` sorts the
recorded graph topologically (the :class:`Tape`) and replays it in reverse.

Broadcasting rules: ``add`` and ``multiply`` follow numpy trailing-axis
broadcasting and reduce gradients back onto each input's shape. ``matmul``
accepts matching (or broadcastable) leading batch axes. No other primitive
broadcasts.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import EmptyLossSupport, ShapeError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, multiply(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), multiply(self, -1.0))

    def __neg__(self):
        return multiply(self, -1.0)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose_last_two(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def multiply(a: Tensor, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "multiply")


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward, "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = ndtr(xd)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out, parents, backward, "linear")


def transpose_last_two(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last_two needs rank >= 2")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2), (x,), backward, "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), backward, "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (x,), backward, "reshape")


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_last_axis: nothing to concatenate")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: leading shapes differ {lead} vs {t.shape[:-1]}")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(widths)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward, "concat")


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; gradient scatters back with accumulation."""
    src = x.shape
    out = x.data[index]

    def backward(g):
        gx = np.zeros(src)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, dtype=np.float64), (x,), backward, "take")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` selected by integer ``indices`` of any shape."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding index outside [0, {vocab})")
    width = table.shape[1]

    def backward(g):
        flat = idx.reshape(-1)
        gt = np.zeros((vocab, width))
        g2 = g.reshape(-1, width)
        for col in range(width):
            gt[:, col] = np.bincount(flat, weights=g2[:, col], minlength=vocab)
        return (gt,)

    return _make(table.data[idx], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    src = x.shape

    def backward(g):
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.array(x.data.sum()), (x,), backward, "sum")


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    src = x.shape
    axis = axis % x.ndim
    n = src[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


def layer_norm_last_axis(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm: scale/shift must be ({width},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        return gx, (flat_g * xhat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax_rows_with_bias(logits: Tensor, bias: Tensor | None = None) -> Tensor:
    """Softmax over the last axis of ``logits + bias``, row-max stabilised."""
    z = logits.data
    parents: tuple[Tensor, ...] = (logits,)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != logits.shape:
            try:
                np.broadcast_shapes(bias.shape, logits.shape)
            except ValueError as exc:
                raise ShapeError(f"softmax: bias {bias.shape} vs logits {logits.shape}") from exc
        z = z + bias.data
        parents = (logits, bias)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    lshape = logits.shape
    bshape = bias.shape if bias is not None else None

    def backward(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if bshape is None:
            return (gz,)
        return _unbroadcast(gz, lshape), _unbroadcast(gz, bshape)

    return _make(y, parents, backward, "softmax")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_primitive(kind: str, prediction: Tensor, target, weight_mask=None) -> Tensor:
    """Masked mean loss over positions where ``weight_mask`` is 1.

    kind is one of ``mse``, ``cross_entropy`` (logits on the last axis vs an
    integer class index per position) or ``binary_cross_entropy`` (one logit
    per position vs a {0, 1} target).
    """
    target = np.asarray(target)
    support_shape = prediction.shape[:-1] if kind == "cross_entropy" else prediction.shape
    if target.shape != support_shape:
        raise ShapeError(f"{kind}: target {target.shape} vs expected {support_shape}")
    mask = np.ones(support_shape) if weight_mask is None else np.asarray(weight_mask, dtype=np.float64)
    if mask.shape != support_shape:
        raise ShapeError(f"{kind}: weight_mask {mask.shape} vs expected {support_shape}")
    count = mask.sum()
    if count <= 0:
        raise EmptyLossSupport(f"{kind}: weight mask has no active positions")
    p = prediction.data

    if kind == "mse":
        diff = p - target
        value = (mask * diff * diff).sum() / count

        def backward(g):
            return (g * 2.0 * mask * diff / count,)

    elif kind == "cross_entropy":
        tgt = target.astype(np.int64)
        if tgt.size and (tgt.min() < 0 or tgt.max() >= p.shape[-1]):
            raise IndexError("cross_entropy target outside the logit range")
        shifted = p - p.max(axis=-1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=-1))
        picked = np.take_along_axis(shifted, tgt[..., None], axis=-1)[..., 0]
        value = (mask * (logsum - picked)).sum() / count

        def backward(g):
            probs = np.exp(shifted - logsum[..., None])
            np.put_along_axis(probs, tgt[..., None], np.take_along_axis(probs, tgt[..., None], -1) - 1.0, -1)
            return (g * probs * (mask / count)[..., None],)

    elif kind == "binary_cross_entropy":
        t = target.astype(np.float64)
        per = np.maximum(p, 0.0) - p * t + np.log1p(np.exp(-np.abs(p)))
        value = (mask * per).sum() / count

        def backward(g):
            return (g * mask * (_stable_sigmoid(p) - t) / count,)

    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    return _make(np.array(value), (prediction,), backward, kind)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the primitive applications behind a tensor."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # the tape is consumed
    for node in tape.entries:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
