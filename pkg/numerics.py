"""Minimal deterministic tensor library with reverse-mode autodiff.

Tensors store float32 data by default (float64 inside ``precision(np.float64)``),
accumulate reductions and matrix products in float64, and refuse to hold NaN or
Inf. Elementwise operations require equal shapes or a 0-d operand; anything
else has to be broadcast explicitly with ``expand``.
"""

import contextlib
import logging
import struct
import threading
import zlib
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import ADAM_EPS, LEARNING_RATE
from errors import (
    DimensionError,
    DomainError,
    EvaluationError,
    FormatError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

_state = threading.local()


def default_dtype():
    """Storage dtype for tensors created on the current thread."""
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    if not hasattr(_state, "stack"):
        _state.stack = []
    _state.stack.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _state.stack.pop()


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    """Immutable n-d array that records the operations producing it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self._init(array, requires_grad, (), None, "leaf")

    def _init(self, array, requires_grad, parents, backward, op):
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data = _freeze(array)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._op = op

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        requires = any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        array = np.asarray(data, dtype=default_dtype())
        if array is data and not array.flags.owndata:
            array = array.copy()
        out._init(array, requires, parents if requires else (), backward if requires else None, op)
        return out

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        Graph(self).backward(grad)

    # Operators

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor; the optimizer is its only writer."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def assign(self, array):
        array = np.array(array, dtype=self.data.dtype, copy=True)
        if array.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {array.shape} to parameter of shape {self.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("non-finite parameter update")
        self.data = _freeze(array)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """Topologically ordered record of the nodes that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None):
        root = self.root
        if not root.requires_grad:
            return
        if grad is None:
            if root.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {root.shape}")
            grad = np.ones_like(root.data)
        grads: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# Elementwise arithmetic


def _operands(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand to broadcast)")
    return a, b


def _reduce_like(grad, tensor):
    if tensor.ndim == 0 and grad.ndim != 0:
        return np.sum(grad, dtype=np.float64)
    return grad


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")

    def backward(g):
        return _reduce_like(g, a), _reduce_like(g, b)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")

    def backward(g):
        return _reduce_like(g, a), _reduce_like(-g, b)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")

    def backward(g):
        return _reduce_like(g * b.data, a), _reduce_like(g * a.data, b)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")

    def backward(g):
        return (
            _reduce_like(g / b.data, a),
            _reduce_like(-g * a.data / (b.data * b.data), b),
        )

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return Tensor._from_op(np.power(a.data, exponent), (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return Tensor._from_op(a.data * s, (a,), backward, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return Tensor._from_op(0.5 * x * (1.0 + th), (a,), backward, "gelu")


# Reductions and shape ops


def _normalize_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
        normalized.append(ax % ndim)
    return tuple(normalized)


def _expand_grad(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim, "sum")
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims)

    def backward(g):
        return (_expand_grad(g, a.shape, axes, keepdims),)

    return Tensor._from_op(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim, "mean")
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims) / count

    def backward(g):
        return (_expand_grad(g, a.shape, axes, keepdims) / count,)

    return Tensor._from_op(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}: {e}") from e
    return Tensor._from_op(out, (a,), lambda g: (np.reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward, "getitem")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = np.sum(g, axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = np.sum(g, axis=ax, keepdims=True)
    return g


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from e
    return Tensor._from_op(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def where_constant(mask: np.ndarray, a, fill: float) -> Tensor:
    """Replace entries where ``mask`` is False by a constant (no gradient there)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} differs from tensor shape {a.shape}")
    return Tensor._from_op(np.where(mask, a.data, fill), (a,), lambda g: (g * mask,), "where")


# Linear algebra


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> Tensor:
    """Plain 2-d product c[i, j] = sum_k a[i, k] b[k, j]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        g64 = _f64(g)
        return g64 @ _f64(b.data).T, _f64(a.data).T @ g64

    return Tensor._from_op(_f64(a.data) @ _f64(b.data), (a, b), backward, "matmul")


def bmm(a, b) -> Tensor:
    """Batched product over identical leading dimensions: [..., m, k] x [..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        g64 = _f64(g)
        return g64 @ np.swapaxes(_f64(b.data), -1, -2), np.swapaxes(_f64(a.data), -1, -2) @ g64

    return Tensor._from_op(np.matmul(_f64(a.data), _f64(b.data)), (a, b), backward, "bmm")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: x[..., k] @ weight[k, n] + bias[n]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    rows = _f64(x.data).reshape(-1, weight.shape[0])
    out = (rows @ _f64(weight.data)).reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + _f64(bias.data)
        parents = (x, weight, bias)

    def backward(g):
        g2 = _f64(g).reshape(-1, weight.shape[1])
        gx = (g2 @ _f64(weight.data).T).reshape(x.shape)
        gw = rows.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, backward, "linear")


# Normalization and attention primitives


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _normalize_axis(axis, x.ndim, "softmax")
    if x.shape[ax] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = _f64(x.data) - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)
    y = out.astype(default_dtype())

    def backward(g):
        g64 = _f64(g)
        return (out * (g64 - np.sum(g64 * out, axis=ax, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply optional per-feature gamma/beta."""
    if not eps > 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    x = as_tensor(x)
    dim = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and as_tensor(p).shape != (dim,):
            raise DimensionError(f"layer_norm {name} must have shape ({dim},)")
    x64 = _f64(x.data)
    mu = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv_std
    out = xhat
    parents = [x]
    g_data = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        g_data = _f64(gamma.data)
        out = out * g_data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + _f64(beta.data)
        parents.append(beta)

    def backward(g):
        g64 = _f64(g)
        dxhat = g64 * g_data if g_data is not None else g64
        dx = inv_std * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        grads = [dx]
        lead = tuple(range(x.ndim - 1))
        if gamma is not None:
            grads.append(np.sum(g64 * xhat, axis=lead))
        if beta is not None:
            grads.append(np.sum(g64, axis=lead))
        return tuple(grads)

    return Tensor._from_op(out, tuple(parents), backward, "layer_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / (||x|| + eps) along ``axis``; the zero vector maps to zero."""
    if not eps > 0:
        raise DomainError(f"l2_normalize eps must be positive, got {eps}")
    x = as_tensor(x)
    x64 = _f64(x.data)
    norm = np.sqrt(np.sum(x64 * x64, axis=axis, keepdims=True))
    denom = norm + eps

    def backward(g):
        g64 = _f64(g)
        dot = np.sum(x64 * g64, axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        correction = np.where(norm > 0, dot / (safe * denom * denom), 0.0)
        return (g64 / denom - x64 * correction,)

    return Tensor._from_op(x64 / denom, (x,), backward, "l2_normalize")


def mse(a, b, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared difference; with ``weights`` the mean runs over weighted entries only."""
    diff = sub(a, b)
    sq = mul(diff, diff)
    if weights is None:
        return mean(sq)
    weights = np.asarray(weights, dtype=np.float64)
    total = float(np.sum(weights))
    if total <= 0:
        return tensor_sum(mul(sq, 0.0))
    return div(tensor_sum(mul(sq, Tensor(weights))), total)


# Modules


class Module:
    """Container of parameters and sub-modules, discovered through attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if strict and (missing or unexpected):
            raise FormatError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, array in state.items():
            if name in params:
                params[name].assign(array)
        return self

    def cast(self, dtype):
        """Convert every parameter to ``dtype`` in place."""
        for p in self.parameters():
            p.data = _freeze(p.data.astype(dtype))
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, scale: Optional[float] = None):
        scale = 1.0 / np.sqrt(in_features) if scale is None else scale
        self.weight = Parameter(rng.normal(0.0, scale, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def zero_(self):
        self.weight.assign(np.zeros(self.weight.shape))
        if self.bias is not None:
            self.bias.assign(np.zeros(self.bias.shape))
        return self


class MLP(Module):
    """Stack of Linear layers with SiLU between them."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = silu(x)
        return x


class Adam:
    """Adam with decoupled weight decay and a configurable epsilon."""

    def __init__(self, params: Sequence[Parameter], lr: float = LEARNING_RATE, betas=(0.9, 0.999), eps: float = ADAM_EPS, weight_decay: float = 0.0):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        # Moments are stored in the parameter dtype so checkpoints restore them exactly
        self.m = [np.zeros(p.shape, dtype=p.data.dtype) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=p.data.dtype) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = _f64(p.grad)
            m = b1 * _f64(self.m[i]) + (1.0 - b1) * g
            v = b2 * _f64(self.v[i]) + (1.0 - b2) * g * g
            self.m[i] = m.astype(p.data.dtype)
            self.v[i] = v.astype(p.data.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            value = _f64(p.data)
            if self.weight_decay:
                value = value * (1.0 - self.lr * self.weight_decay)
            p.assign(value - update)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"m.{i}"], dtype=p.data.dtype).reshape(p.shape)
            self.v[i] = np.array(state[f"v.{i}"], dtype=p.data.dtype).reshape(p.shape)
        return self


# Gradient checking


def _evaluate(f: Callable, x: np.ndarray) -> float:
    try:
        value = f(Tensor(x))
    except NonFiniteError as e:
        raise EvaluationError(f"function is not finite at the evaluation point: {e}") from e
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise EvaluationError("function returned a non-finite value")
    return value


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Compare autodiff against central differences.

    The graph is evaluated in float64 so the comparison measures the backward
    rules, not storage rounding.

    Args:
        f: Function mapping a tensor to a scalar tensor
        x: Point to check
        eps: Finite-difference step in [1e-6, 1e-3]

    Returns:
        max |autodiff - central| / (|central| + 1e-8) over all coordinates
    """
    if not 1e-6 <= eps <= 1e-3:
        raise DomainError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    with precision(np.float64):
        point = Tensor(base, requires_grad=True)
        try:
            value = f(point)
        except NonFiniteError as e:
            raise EvaluationError(f"function is not finite at x: {e}") from e
        if isinstance(value, Tensor):
            if value.size != 1:
                raise EvaluationError(f"grad_check needs a scalar function, got shape {value.shape}")
            value.backward()
        analytic = point.grad if point.grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += eps
            minus[i] -= eps
            numeric.reshape(-1)[i] = (_evaluate(f, plus.reshape(base.shape)) - _evaluate(f, minus.reshape(base.shape))) / (2.0 * eps)
    if base.size == 0:
        return 0.0
    rel = np.abs(_f64(analytic) - numeric) / (np.abs(numeric) + 1e-8)
    return float(np.max(rel))


# Random numbers


def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by an explicit seed and a stream name."""
    key = (int(seed) << 32) | zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(key=key))


# VTEN serialization

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1


def encode_vten(array) -> bytes:
    data = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = VTEN_MAGIC + struct.pack("<II", VTEN_VERSION, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def decode_vten(payload: bytes) -> np.ndarray:
    if len(payload) < 12 or payload[:4] != VTEN_MAGIC:
        raise FormatError("missing VTEN magic")
    version, ndim = struct.unpack_from("<II", payload, 4)
    if version != VTEN_VERSION:
        raise FormatError(f"unsupported VTEN version {version}")
    offset = 12 + 4 * ndim
    if len(payload) < offset:
        raise FormatError("truncated VTEN header")
    shape = struct.unpack_from(f"<{ndim}I", payload, 12)
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != offset + 4 * count:
        raise FormatError(f"VTEN payload holds {len(payload) - offset} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4", offset=offset, count=count).reshape(shape).astype(np.float32)


def save_vten(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_vten(array))
    return path


def load_vten(path) -> np.ndarray:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return decode_vten(payload)


def save_tensor_dir(directory, tensors: Dict[str, np.ndarray]):
    """Write named arrays as VTEN files plus a text manifest of shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        save_vten(directory / f"{name}.vten", array)
        lines.append(f"{name} {'x'.join(str(d) for d in array.shape) or 'scalar'}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_tensor_dir(directory) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"no manifest.txt in {directory}")
    tensors = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, dims = line.split()
        array = load_vten(directory / f"{name}.vten")
        expected = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        if array.shape != expected:
            raise FormatError(f"{name}: manifest says {expected}, file holds {array.shape}")
        tensors[name] = array
    return tensors
