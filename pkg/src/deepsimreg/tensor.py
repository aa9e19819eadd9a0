"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the registration networks and losses are
provided. Maps follow the ``(N, C, H, W)`` convention.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to the parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order. Leaf gradients accumulate across backward calls until
:meth:`Tensor.zero_grad` is called, which is how gradient accumulation over
several micro-batches is done.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE: type = np.float32
_STATE = threading.local()


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used for newly created tensors and networks."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch precision, e.g. ``with default_dtype(np.float64):``."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def is_grad_enabled() -> bool:
    """Graph recording is a per-thread switch so independent graphs can coexist."""
    return getattr(_STATE, "grad_enabled", True)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An array that can take part in a differentiation graph.

    Args:
        data: Array-like values. Converted to ``dtype`` (default: the module
            default dtype) unless it already is a floating array of that type.
        requires_grad: Whether gradients should be collected for this tensor.
        dtype: Optional explicit floating dtype.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from this scalar into every reachable tensor.

        Gradients are added to ``.grad``; call :meth:`zero_grad` (or
        :func:`zero_grads`) between optimizer steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor with requires_grad=True")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
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

    # -- operators --------------------------------------------------------------
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
        return scalar_mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operands(a, b) -> tuple[Tensor, Tensor]:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    dtype = (a_t if a_t is not None else b_t).dtype
    if a_t is None:
        a_t = Tensor(a, dtype=dtype)
    if b_t is None:
        b_t = Tensor(b, dtype=dtype)
    try:
        np.broadcast_shapes(a_t.shape, b_t.shape)
    except ValueError:
        raise ValueError(f"shapes {a_t.shape} and {b_t.shape} are not broadcast-compatible") from None
    return a_t, b_t


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._from_op(x.data * x.dtype.type(c), (x,), backward, "scalar_mul")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor._from_op(x.data * x.data, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (x,), backward, "sqrt")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is passed only where ``x > floor``."""
    keep = x.data > floor
    out = np.where(keep, x.data, x.dtype.type(floor))

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(out, (x,), backward, "clamp_min")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scalar_mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects two (N, C, H, W) tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}: N, H, W must match")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat")


# -- activations -----------------------------------------------------------------


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    pos = x.data > 0
    slope = np.where(pos, x.dtype.type(1), x.dtype.type(alpha))

    def backward(g):
        return (g * slope,)

    return Tensor._from_op(x.data * slope, (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward, "sigmoid")


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ValueError("softmax_channels needs a channel axis")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def linear(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax_channels": softmax_channels,
    "linear": linear,
}


def map_activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Apply an activation by name: leaky_relu, sigmoid, softmax_channels, linear."""
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy between ``softmax(logits)`` and one-hot ``target``.

    ``target`` has the same ``(N, C, H, W)`` shape as ``logits`` and is a plain
    array (labels carry no gradient).
    """
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    count = logits.size // logits.shape[1]
    loss = -(target * log_p).sum() / count

    def backward(g):
        return (g * (np.exp(log_p) - target) / count,)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# -- convolution and resampling ------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding, stride 1."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {cin_w} (weight shape {weight.shape})")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (N, Cin, Ho, Wo, k, k) -> (N, Ho, Wo, Cin, k, k) -> rows of patches
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, backward, "conv2d")


def pool_avg2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool_avg2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward, "pool_avg2x2")


def upsample_nn2x(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward, "upsample_nn2x")


def box_sum2d(x: Tensor, size: int) -> Tensor:
    """Sum over every ``size x size`` window lying fully inside the map."""
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ValueError(f"window {size} larger than map {h}x{w}")

    def _valid(a):
        a = sliding_window_view(a, size, axis=3).sum(axis=-1)
        return sliding_window_view(a, size, axis=2).sum(axis=-1)

    def backward(g):
        pad = size - 1
        return (_valid(np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))),)

    return Tensor._from_op(_valid(x.data), (x,), backward, "box_sum2d")


# -- normalization and regularization ------------------------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise ValueError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                m = n * h * w
                gx = (inv_std.reshape(shape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm2d")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), backward, "dropout")


# -- optimization ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update of ``params`` in place.

    Gradients are left untouched; the caller zeroes them.
    """
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"parameters at positions {missing} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
