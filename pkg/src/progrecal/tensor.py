"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure when at least one
input requires a gradient. ``Tensor.backward`` walks the recorded graph in
reverse topological order and writes ``grad`` on the leaves.

Shape alignment is explicit: binary elementwise operations accept equal shapes
or a scalar operand, nothing else. Use :func:`broadcast_to` to expand.

Calling ``backward`` while any reachable leaf still holds a gradient raises
:class:`GradientStateError`; call ``zero_grad`` (or an optimizer's
``zero_grad``) between passes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GradientStateError,
    ParameterError,
)

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad (empty tape)")
        order = topological_order(self)
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        held = [n for n in leaves if n.grad is not None]
        if held:
            raise GradientStateError(
                f"{len(held)} leaf tensor(s) already hold gradients; call zero_grad() before backward()"
            )
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = np.array(g, dtype=DTYPE)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def leaves(self) -> list["Tensor"]:
        return [n for n in topological_order(self) if n.is_leaf]

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children, each exactly once."""
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# -- elementwise binary -----------------------------------------------------
def _align(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")
    return a, b


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _align(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _align(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _align(a, b, "mul")
    return _result(
        a.data * b.data, (a, b), lambda g: (_fit(g * b.data, a), _fit(g * a.data, b)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _align(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _fit(g / b.data, a), _fit(-g * out / b.data, b)

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


# -- elementwise unary ------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _result(out, (a,), lambda g: (g * _stable_sigmoid(a.data),), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions ---------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out), (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum"
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _result(np.asarray(out), (a,), backward, "mean")


def l1_norm(a, axis=None) -> Tensor:
    """Sum of absolute values (over ``axis`` or everything)."""
    return tsum(tabs(a), axis=axis)


# -- shape manipulation -------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tensors, backward, "stack")


def broadcast_to(a, shape) -> Tensor:
    """Explicitly expand ``a`` to ``shape`` (numpy rules); gradients are summed back."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot expand {a.shape} to {shape}") from exc

    def backward(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.array(out), (a,), backward, "broadcast_to")


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for 2-D ``x``; the bias row is expanded explicitly."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, broadcast_to(bias, out.shape))
    return out


# -- normalisations -----------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("l2_normalize: zero-norm vector has no direction")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (x,), backward, "l2_normalize")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis of ``x`` then apply an elementwise affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gw = g * weight.data
        dx = inv * (gw - gw.mean(axis=-1, keepdims=True) - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * weight.data + bias.data, (x, weight, bias), backward, "layer_norm")


# -- convolutions -------------------------------------------------------------
def conv1d_causal(p, filters, dilation: int = 1) -> Tensor:
    """Dilated causal convolution over the last (time) axis.

    ``p`` is ``C_in x T`` (or ``B x C_in x T``), ``filters`` is ``C_out x C_in x k``.
    Output position ``s`` is ``sum_j filters[..., j] @ p[..., s - dilation*j]``
    with zeros for negative time, so the output never reads the future.
    """
    p, filters = as_tensor(p), as_tensor(filters)
    if filters.ndim != 3:
        raise DimensionError(f"conv1d_causal: filter bank must be C_out x C_in x k, got {filters.shape}")
    k = filters.shape[2]
    if k < 1 or int(dilation) < 1:
        raise ParameterError(f"conv1d_causal: kernel ({k}) and dilation ({dilation}) must be positive")
    d = int(dilation)
    batched = p.ndim == 3
    x = p.data if batched else p.data[None]
    if x.ndim != 3 or x.shape[1] != filters.shape[1]:
        raise DimensionError(f"conv1d_causal: input {p.shape} does not match filter bank {filters.shape}")
    T = x.shape[2]
    if T < 1:
        raise ParameterError("conv1d_causal: sequence length must be at least 1")
    w = filters.data
    out = np.zeros((x.shape[0], w.shape[0], T))
    for j in range(k):
        shift = d * j
        if shift >= T:
            break
        out[:, :, shift:] += np.einsum("oc,bct->bot", w[:, :, j], x[:, :, : T - shift], optimize=True)

    def backward(g):
        g3 = g if batched else g[None]
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        for j in range(k):
            shift = d * j
            if shift >= T:
                break
            gx[:, :, : T - shift] += np.einsum("oc,bot->bct", w[:, :, j], g3[:, :, shift:], optimize=True)
            gw[:, :, j] = np.einsum("bot,bct->oc", g3[:, :, shift:], x[:, :, : T - shift], optimize=True)
        return (gx if batched else gx[0]), gw

    return _result(out if batched else out[0], (p, filters), backward, "conv1d_causal")


def conv1x1(weight, x) -> Tensor:
    """Pointwise channel mixing: ``weight`` (O x C) applied to ``B x C x T``."""
    weight, x = as_tensor(weight), as_tensor(x)
    if weight.ndim != 2 or x.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1x1: weight {weight.shape} and input {x.shape} are not aligned")
    out = np.tensordot(weight.data, x.data, axes=(1, 1)).transpose(1, 0, 2)

    def backward(g):
        gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        gx = np.tensordot(weight.data, g, axes=(0, 1)).transpose(1, 0, 2)
        return gw, gx

    return _result(np.ascontiguousarray(out), (weight, x), backward, "conv1x1")


def conv2d(x, weight, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation of ``B x C x H x W`` with ``O x C x kh x kw``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and weight {weight.shape} are not aligned")
    pad = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    _, _, kh, kw = weight.shape
    H, W = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if H < 1 or W < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)

    def backward(g):
        gw = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + H, j : j + W] += np.einsum(
                    "bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
        return gx, gw

    return _result(out, (x, weight), backward, "conv2d")


def avg_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"avg_pool2d: spatial dims {(H, W)} not divisible by {size}")
    out = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return _result(out, (x,), backward, "avg_pool2d")
