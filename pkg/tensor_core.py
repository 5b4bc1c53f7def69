#!/usr/bin/env python3
"""
tensor_core.py — Dense tensors with reverse-mode automatic differentiation

This module defines:
- Tensor: numpy buffer + optional gradient + the op record that produced it
- the layer set used by the models (conv2d, relu, max_pool2d, global_avg_pool,
  linear, softmax, softmax_cross_entropy) plus the small algebra they need
- backward(): one reverse topological sweep per graph, gradients summed over
  consumers, intermediate buffers released afterwards
- AdamState / adam_step(): Adam with bias correction

Layout conventions:
- conv/pool tensors are NCHW
- one graph = one forward + one backward; a freed graph cannot be replayed

Precision is engine-wide: float32 by default, float64 via set_default_dtype()
or the default_dtype() context manager (used by gradient checks).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, DimensionError, NonFiniteError, ValidationError


# -----------------------------
# Engine-wide switches
# -----------------------------
_DEFAULT_DTYPE: np.dtype = np.dtype(np.float32)
_GRAD_ENABLED: bool = True

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_default_dtype(dtype) -> None:
    """Switch the engine between 32-bit and 64-bit floats."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ValidationError(f"unsupported dtype {dt}; expected float32 or float64")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside this block record no graph (stop_graph)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


# -----------------------------
# Tensor
# -----------------------------
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """
    Dense n-dimensional array taking part in a reverse-mode graph.

    Leaves created with requires_grad=True receive `.grad` after backward().
    Non-leaf tensors only keep a gradient when `retain_grad()` was called.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op",
                 "_retain", "_freed")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        self.data: np.ndarray = np.array(data, dtype=np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._retain = False
        self._freed = False

    # construction path for op outputs (no dtype coercion)
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._retain = False
        out._freed = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties --
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    # -- operators --
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -----------------------------
# Elementary ops
# -----------------------------
def detach(t: Tensor) -> Tensor:
    """Same values (shared buffer), no gradient path back to the producer."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.name = t.name
    out._parents = ()
    out._backward = None
    out._op = "detach"
    out._retain = False
    out._freed = False
    return out


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    a_shape, b_shape = a.shape, b.shape

    def _bw(g: np.ndarray):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    a_data, b_data = a.data, b.data

    def _bw(g: np.ndarray):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return Tensor._from_op(a_data * b_data, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def _bw(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    scale = a.dtype.type(1.0 / count)
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(scale, dtype=a.dtype))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    in_shape = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    if not tensors:
        raise DimensionError("stack() needs at least one tensor")
    first = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.shape != first:
            raise DimensionError(f"stack(): tensor {i} has shape {t.shape}, expected {first}")
    n = len(tensors)

    def _bw(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis; the other axes must agree."""
    if not tensors:
        raise DimensionError("concat() needs at least one tensor")
    first = tensors[0].shape
    axis = axis % max(len(first), 1)
    for i, t in enumerate(tensors):
        if t.ndim != len(first) or t.shape[:axis] + t.shape[axis + 1:] != first[:axis] + first[axis + 1:]:
            raise DimensionError(f"concat(): tensor {i} has shape {t.shape}, incompatible with {first} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g: np.ndarray):
        return tuple(part.copy() for part in np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "concat")


def index_put(base: Tensor, index: Tuple[np.ndarray, ...], values: Tensor) -> Tensor:
    """
    Return a copy of `base` with base[index] replaced by `values`.

    The replaced entries route their gradient to `values` only; the remaining
    entries route theirs to `base` (nothing when base is detached).
    Positions inside `index` must be distinct.
    """
    out = base.data.copy()
    target_shape = out[index].shape
    if values.shape != target_shape:
        raise DimensionError(f"index_put(): values shape {values.shape} != indexed shape {target_shape}")
    out[index] = values.data

    def _bw(g: np.ndarray):
        g_base = g.copy()
        g_base[index] = 0
        return g_base, g[index].copy()

    return Tensor._from_op(out, (base, values), _bw, "index_put")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


# -----------------------------
# Layers
# -----------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation, NCHW input, FCkk weight.

    im2col via sliding windows + one matmul; backward scatters the column
    gradient back kernel offset by kernel offset (deterministic).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D [B,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D [F,C,kh,kw], got shape {weight.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input axis C={C} vs weight axis C={Cw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d kernel larger than padded input: kh={kh} vs H+2p={H + 2 * padding}, "
            f"kw={kw} vs W+2p={W + 2 * padding}"
        )
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"conv2d bias must have shape ({F},), got {bias.shape}")

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, kh, kw) -> rows of the column matrix
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    w_mat = weight.data.reshape(F, C * kh * kw)
    out = cols @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    x_shape, xp_shape = x.shape, xp.shape

    def _bw(g: np.ndarray):
        g_rows = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        g_w = (g_rows.T @ cols).reshape(F, C, kh, kw)
        g_cols = (g_rows @ w_mat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        g_xp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                g_xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g_cols[:, :, :, :, i, j]
        g_x = g_xp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]] if padding else g_xp
        grads = [g_x, g_w]
        if bias is not None:
            grads.append(g_rows.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max-pool; gradient goes to the first maximum in row-major window order."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d input must be 4-D [B,C,H,W], got shape {x.shape}")
    stride = stride or kernel
    B, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise DimensionError(f"max_pool2d kernel {kernel} exceeds spatial axes H={H}, W={W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = windows.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    x_shape = x.shape

    def _bw(g: np.ndarray):
        g_x = np.zeros(x_shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                g_x[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (g_x,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), _bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]"""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be 4-D [B,C,H,W], got shape {x.shape}")
    return mean(x, axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[B,in] @ weight[out,in].T + bias[out]"""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects x[B,in] and weight[out,in], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear feature mismatch: input axis in={x.shape[1]} vs weight axis in={weight.shape[1]}")
    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data

    def _bw(g: np.ndarray):
        grads = [g @ w_data, g.T @ x_data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "linear")


def _softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_array(x.data, axis)

    def _bw(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), _bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label]; gradient (softmax - onehot) / B."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects logits [B,c], got shape {logits.shape}")
    B, c = logits.shape
    y = np.asarray(labels)
    if y.shape != (B,):
        raise DimensionError(f"labels must have shape ({B},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be integer class indices, got dtype {y.dtype}")
    if B and (y.min() < 0 or y.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(B)
    loss = -log_probs[rows, y].mean()

    def _bw(g: np.ndarray):
        probs = np.exp(log_probs)
        probs[rows, y] -= 1
        return (probs * (g / B),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), _bw, "softmax_cross_entropy")


# -----------------------------
# Backward sweep
# -----------------------------
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen: set[int] = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate `.grad` of every reachable leaf with dLoss/dLeaf.

    Leaf gradients accumulate (+=) into an existing `.grad`; call zero_grad()
    between independent losses. The graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise ContractError("backward() called on a graph that was already released")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that is not gradient-tracked")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node.is_leaf:
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
            node._parents = ()
            node._backward = None
            node.requires_grad = False
            node._freed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -----------------------------
# Adam
# -----------------------------
@dataclass
class AdamState:
    """First/second moment buffers per parameter name plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def init_for(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """
    One Adam update in place. Every gradient is checked before anything is
    mutated; a non-finite one aborts the step naming the parameter.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"adam_step(): missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step(): gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'", name=name)

    state.init_for(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0:
            continue
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)
