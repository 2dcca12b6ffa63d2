"""
Numerics for LaneTopoLab
Dense-array engine with reverse-mode differentiation, plus the neural
building blocks (linear, layer normalization, multi-head attention,
feed-forward) used by the lane decoder and prediction heads.

Precision follows the arrays: ParamStore(dtype="float64") for gradient
checking, "float32" for training.
"""

import math
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import ConfigurationError, DimensionError, NumericError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class TensorNode:
    """A dense array participating in reverse-mode differentiation"""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype: Optional[Union[str, np.dtype]] = None):
        array = np.asarray(values, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.values = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["TensorNode", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def T(self) -> "TensorNode":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "TensorNode":
        return TensorNode(self.values)

    def backward(self):
        backward(self)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"TensorNode(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def as_node(value: Union[TensorNode, ArrayLike], like: Optional[TensorNode] = None) -> TensorNode:
    """Wrap a constant as a TensorNode, matching the dtype of `like`"""
    if isinstance(value, TensorNode):
        return value
    dtype = like.dtype if like is not None else None
    return TensorNode(np.asarray(value, dtype=dtype))


def make_node(values: np.ndarray, parents: Sequence[TensorNode], backward_fn: BackwardFn) -> TensorNode:
    """
    Create the output of a differentiable operation.

    `backward_fn(g)` returns one gradient (or None) per parent, given the
    upstream gradient `g` of the output.
    """
    node = TensorNode(values)
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._parents = parents
        node._backward = backward_fn
    return node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b) -> TensorNode:
    a, b = _pair(a, b)
    return make_node(a.values + b.values, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> TensorNode:
    a, b = _pair(a, b)
    return make_node(a.values - b.values, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> TensorNode:
    a, b = _pair(a, b)
    return make_node(a.values * b.values, (a, b),
                     lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> TensorNode:
    a, b = _pair(a, b)
    out = a.values / b.values
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / b.values, a.shape),
                                _unbroadcast(-g * out / b.values, b.shape)))


def neg(a: TensorNode) -> TensorNode:
    return make_node(-a.values, (a,), lambda g: (-g,))


def _pair(a, b) -> Tuple[TensorNode, TensorNode]:
    if isinstance(a, TensorNode):
        return a, as_node(b, like=a)
    b = as_node(b)
    return as_node(a, like=b), b


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    """Matrix product of an [n x k] and a [k x m] node"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    return make_node(a.values @ b.values, (a, b),
                     lambda g: (g @ b.values.T, a.values.T @ g))


def bmm(a: TensorNode, b: TensorNode) -> TensorNode:
    """Batched matrix product over a shared leading dimension"""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    return make_node(np.matmul(a.values, b.values), (a, b),
                     lambda g: (np.matmul(g, np.swapaxes(b.values, 1, 2)),
                                np.matmul(np.swapaxes(a.values, 1, 2), g)))


def transpose(a: TensorNode) -> TensorNode:
    return make_node(a.values.T, (a,), lambda g: (g.T,))


def permute(a: TensorNode, axes: Sequence[int]) -> TensorNode:
    inverse = np.argsort(axes)
    return make_node(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: TensorNode, shape: Sequence[int]) -> TensorNode:
    return make_node(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: TensorNode, index) -> TensorNode:
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros_like(a.values)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(a.values[index], (a,), backward_fn)


def concat(nodes: Sequence[TensorNode], axis: int = 0) -> TensorNode:
    nodes = list(nodes)
    if len(nodes) == 1:
        return nodes[0]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([n.values for n in nodes], axis=axis), nodes,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_(a: TensorNode, axis: Optional[int] = None, keepdims: bool = False) -> TensorNode:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def mean(a: TensorNode, axis: Optional[int] = None) -> TensorNode:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / max(count, 1))


def exp(a: TensorNode) -> TensorNode:
    out = np.exp(a.values)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: TensorNode) -> TensorNode:
    return make_node(np.log(a.values), (a,), lambda g: (g / a.values,))


def abs_(a: TensorNode) -> TensorNode:
    return make_node(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),))


def sigmoid(a: TensorNode) -> TensorNode:
    out = _sigmoid(a.values)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(a: TensorNode) -> TensorNode:
    """Exact Gaussian-error linear unit"""
    x = a.values
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return make_node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def maximum(a, b) -> TensorNode:
    a, b = _pair(a, b)
    pick_a = a.values >= b.values
    return make_node(np.where(pick_a, a.values, b.values), (a, b),
                     lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> TensorNode:
    a, b = _pair(a, b)
    pick_a = a.values <= b.values
    return make_node(np.where(pick_a, a.values, b.values), (a, b),
                     lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def softmax(a: TensorNode, mask: Optional[np.ndarray] = None) -> TensorNode:
    """Row softmax over the last axis; False mask entries get -inf logits"""
    logits = a.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not mask.any(axis=-1).all():
            raise ConfigurationError("attention mask has a fully masked row")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return make_node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------------------
# Neural building blocks
# ---------------------------------------------------------------------------

def layer_norm(x: TensorNode, gamma: TensorNode, beta: TensorNode, eps: float = 1e-5) -> TensorNode:
    """Normalize each row to zero mean and unit variance, then apply the affine"""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    if not np.all(np.isfinite(x.values)):
        raise NumericError("layer_norm received non-finite input")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.values + beta.values

    def backward_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        d_gamma = (g * xhat).sum(axis=reduce_axes)
        d_beta = g.sum(axis=reduce_axes)
        d_xhat = g * gamma.values
        d_x = inv_std * (d_xhat - d_xhat.mean(axis=-1, keepdims=True)
                         - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True))
        return d_x, d_gamma, d_beta

    return make_node(out, (x, gamma, beta), backward_fn)


def linear(x: TensorNode, weight: TensorNode, bias: Optional[TensorNode] = None) -> TensorNode:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def apply_linear(x: TensorNode, params: "ParamStore", prefix: str) -> TensorNode:
    return linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def apply_norm(x: TensorNode, params: "ParamStore", prefix: str, eps: float = 1e-5) -> TensorNode:
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def init_attention(params: "ParamStore", prefix: str, channels: int):
    for proj in ("q", "k", "v", "out"):
        params.linear(f"{prefix}.{proj}", channels, channels)


def attention(q: TensorNode, k: TensorNode, v: TensorNode, heads: int, params: "ParamStore",
              prefix: str = "attn", mask: Optional[np.ndarray] = None,
              return_weights: bool = False):
    """
    Multi-head scaled dot-product attention with learned Q/K/V/output
    projections. Self-attention is the call with k = v = q.

    Args:
        q: [n_q x C] queries
        k, v: [n_k x C] keys and values
        heads: number of heads, must divide C
        params: parameter store holding `{prefix}.{q,k,v,out}.{weight,bias}`
        mask: optional boolean [n_q x n_k]; False entries are not attended
        return_weights: also return the softmax weights [heads x n_q x n_k]
    """
    channels = q.shape[1]
    if channels % heads != 0:
        raise ConfigurationError(f"channels {channels} not divisible by heads {heads}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise DimensionError(f"attention mask shape {list(mask.shape)} != {[q.shape[0], k.shape[0]]}")
        if not mask.any(axis=1).all():
            raise ConfigurationError("attention mask has a fully masked row")
    if k.shape[0] == 0:
        raise ConfigurationError("attention over an empty key set")
    head_dim = channels // heads

    def split(node: TensorNode) -> TensorNode:
        return permute(reshape(node, (node.shape[0], heads, head_dim)), (1, 0, 2))

    qh = split(apply_linear(q, params, f"{prefix}.q"))
    kh = split(apply_linear(k, params, f"{prefix}.k"))
    vh = split(apply_linear(v, params, f"{prefix}.v"))
    logits = mul(bmm(qh, permute(kh, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
    weights = softmax(logits, mask)
    merged = reshape(permute(bmm(weights, vh), (1, 0, 2)), (q.shape[0], channels))
    out = apply_linear(merged, params, f"{prefix}.out")
    if return_weights:
        return out, weights.values
    return out


def init_ffn(params: "ParamStore", prefix: str, channels: int, hidden: Optional[int] = None):
    hidden = hidden or 4 * channels
    params.linear(f"{prefix}.fc1", channels, hidden)
    params.linear(f"{prefix}.fc2", hidden, channels)


def ffn(x: TensorNode, params: "ParamStore", prefix: str = "ffn") -> TensorNode:
    """Two linear layers with a GELU between; shape preserving"""
    return apply_linear(gelu(apply_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: TensorNode) -> List[TensorNode]:
    order: List[TensorNode] = []
    visited = set()
    stack: List[Tuple[TensorNode, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: TensorNode):
    """
    Populate `.grad` on every node reachable from a scalar loss.

    Gradients accumulate: calling backward twice without zeroing adds the
    second pass on top of the first.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not np.all(np.isfinite(loss.values)):
        raise NumericError(f"backward from non-finite loss {loss.values.reshape(-1)[0]}")
    if not loss.requires_grad:
        return

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.values)
        if node.grad is None:
            node.grad = np.array(g, dtype=node.dtype)
        else:
            node.grad = (node.grad + g).astype(node.dtype, copy=False)
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """
    Ordered registry of named parameters.

    Each parameter draws from its own generator seeded by (rng_seed, name),
    so a name always initializes to the same values regardless of what else
    is registered.
    """

    def __init__(self, seed: int = 0, dtype: Union[str, np.dtype] = "float64"):
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, TensorNode] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode("utf-8"))])

    def register(self, name: str, values: ArrayLike) -> TensorNode:
        if name in self._params:
            raise ConfigurationError(f"parameter {name!r} registered twice")
        node = TensorNode(np.array(values, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = node
        return node

    def uniform(self, name: str, shape: Sequence[int], bound: float) -> TensorNode:
        return self.register(name, self._rng(name).uniform(-bound, bound, size=tuple(shape)))

    def normal(self, name: str, shape: Sequence[int], std: float) -> TensorNode:
        return self.register(name, self._rng(name).standard_normal(tuple(shape)) * std)

    def linear(self, name: str, fan_in: int, fan_out: int, init: str = "uniform") -> Tuple[TensorNode, TensorNode]:
        """Register `{name}.weight` [fan_in x fan_out] and `{name}.bias` [fan_out]"""
        if init == "uniform":
            bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
            weight = self.uniform(f"{name}.weight", (fan_in, fan_out), bound)
            bias = self.uniform(f"{name}.bias", (fan_out,), bound)
        elif init == "identity":
            weight = self.register(f"{name}.weight", np.eye(fan_in, fan_out))
            bias = self.register(f"{name}.bias", np.zeros(fan_out))
        elif init == "zeros":
            weight = self.register(f"{name}.weight", np.zeros((fan_in, fan_out)))
            bias = self.register(f"{name}.bias", np.zeros(fan_out))
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        return weight, bias

    def norm(self, name: str, channels: int) -> Tuple[TensorNode, TensorNode]:
        return (self.register(f"{name}.gamma", np.ones(channels)),
                self.register(f"{name}.beta", np.zeros(channels)))

    def __getitem__(self, name: str) -> TensorNode:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self._params if name.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters whose name starts with `prefix`"""
        return int(sum(node.size for name, node in self._params.items() if name.startswith(prefix)))

    def zero_grad(self):
        for node in self._params.values():
            node.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: node.values.copy() for name, node in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise ConfigurationError(f"parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, values in state.items():
            if name not in self._params:
                continue
            node = self._params[name]
            if tuple(np.shape(values)) != node.shape:
                raise DimensionError(f"{name}: shape {list(np.shape(values))} != {list(node.shape)}")
            node.values = np.array(values, dtype=self.dtype)
