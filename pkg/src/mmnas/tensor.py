"""Dense float64 tensors with define-by-run reverse-mode autodiff.

The op vocabulary is deliberately small: it covers what the elastic
backbones, the fusion operators and the search losses are built from.
Every op checks its result for NaN/Inf and raises ``FloatingPointError``.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` accumulate into ``grad`` on
    every backward pass; callers zero them between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("division is only supported by a python scalar")

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from this scalar into every reachable leaf."""
        if self.data.size != 1 or self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward()")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        for p in parents:
            if p._consumed:
                raise RuntimeError("graph already consumed by a previous backward()")
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a scalar exponent."""
    p = float(exponent)
    ad = a.data
    if p == 0.0:
        return _result(np.ones_like(ad), (a,), lambda g: (np.zeros_like(g),), "power")
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    mask = ad >= floor
    return _result(np.where(mask, ad, floor), (a,), lambda g: (g * mask,), "clamp_min")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = _softplus(x)
    return _result(out, (a,), lambda g: (g * _stable_sigmoid(x),), "softplus")


def mish(a: Tensor) -> Tensor:
    """``x * tanh(softplus(x))`` as a single node."""
    x = a.data
    t = np.tanh(_softplus(x))

    def backward(g):
        return (g * (t + x * (1.0 - t * t) * _stable_sigmoid(x)),)

    return _result(x * t, (a,), backward, "mish")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product following ``np.matmul`` broadcasting (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch shapes {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


def channel_linear(w: Tensor, x: Tensor) -> Tensor:
    """Apply a (C_out, C_in) matrix along axis 1 of a (B, C_in, L) tensor."""
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 2 or x.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ValueError(f"channel_linear: shapes {w.shape} and {x.shape} not aligned")
    wd, xd = w.data, x.data
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2)

    def backward(g):
        gw = np.tensordot(g, xd, axes=([0, 2], [0, 2]))
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2)
        return gw, gx

    return _result(np.ascontiguousarray(out), (w, x), backward, "channel_linear")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward(g):
        full = np.zeros(src)
        if basic:
            full[idx] += g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx], copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def stack_weighted(weights: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[k] * tensors[k]`` for a 1-d weight tensor, as one graph node."""
    tensors = [as_tensor(t) for t in tensors]
    if weights.shape != (len(tensors),):
        raise ValueError(f"stack_weighted: {weights.shape} weights for {len(tensors)} tensors")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"stack_weighted: tensors disagree in shape {sorted(shapes)}")
    w = weights.data
    xs = [t.data for t in tensors]
    out = w[0] * xs[0]
    for k in range(1, len(xs)):
        out = out + w[k] * xs[k]

    def backward(g):
        gw = np.array([np.vdot(g, x) for x in xs])
        return (gw, *(w[k] * g for k in range(len(xs))))

    return _result(out, (weights, *tensors), backward, "stack_weighted")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, length-preserving 1-D convolution (cross-correlation).

    ``x`` is (B, C_in, L), ``w`` is (C_out, C_in, K) with odd K, ``b`` is (C_out,).
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError("conv1d expects x (B, C, L) and w (C_out, C_in, K)")
    bsz, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"conv1d: input has {cin} channels, kernel expects {wcin}")
    if k % 2 != 1:
        raise ValueError("conv1d kernel width must be odd")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv1d: bias shape {b.shape} != ({cout},)")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(bsz * length, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    out = (cols @ wmat.T).reshape(bsz, length, cout).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(bsz * length, cout)
        gw = (g2.T @ cols).reshape(cout, cin, k)
        dcols = (g2 @ wmat).reshape(bsz, length, cin, k)
        dxp = np.zeros((bsz, cin, length + 2 * pad))
        for j in range(k):
            dxp[:, :, j : j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
        gx = dxp[:, :, pad : pad + length]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv1d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = labels.shape[0]
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits (targets in [0, 1], same shape)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"binary_cross_entropy: {logits.shape} vs targets {t.shape}")
    x = logits.data
    loss = (np.logaddexp(0.0, x) - t * x).mean()
    n = x.size

    def backward(g):
        return (g * (_stable_sigmoid(x) - t) / n,)

    return _result(np.asarray(loss), (logits,), backward, "binary_cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Batch-mean KL(teacher || student) on softmax distributions (temperature 1)."""
    log_ps = log_softmax(student_logits, axis=1)
    log_pt = log_softmax(teacher_logits, axis=1)
    pt = exp(log_pt)
    per_row = tsum(mul(pt, add(log_pt, neg(log_ps))), axis=1)
    return mean(per_row)


def parameters_checksum(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
