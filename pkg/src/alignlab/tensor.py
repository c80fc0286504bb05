"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every differentiable value is a :class:`Tensor` holding a numpy array plus,
for non-leaf nodes, references to its parents and a backward rule.  Calling
:func:`backward` on a scalar root walks the graph once in reverse topological
order and accumulates gradients into the ``grad`` buffers of leaf tensors
that were created with ``requires_grad=True``.

Design notes:

- All arithmetic is float64.  Integer inputs (token ids, gather indices) are
  passed as plain numpy arrays, not tensors.
- Gradients for fan-out are summed; each node's backward rule runs exactly
  once per backward pass.
- The graph is rebuilt on every forward evaluation, so the same parameters
  can be reused across arbitrarily many forward/backward cycles.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

_MASK_FILL = -1e9  # additive mask value; exp(-1e9 + finite) underflows to exactly 0.0
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op that documents finiteness sees a non-finite value."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        # Leaf tensors that require grad get a persistent accumulation buffer.
        if requires_grad and _backward is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def value(self) -> float:
        """Scalar payload of a 0-d or single-element tensor."""
        if self.data.size != 1:
            raise ValueError(f"value requires a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    # Operator sugar; constants are wrapped automatically.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        kind = "leaf" if self._backward is None else "node"
        return f"Tensor(shape={self.data.shape}, {kind}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """Non-differentiable tensor wrapping ``x``."""
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(x) -> Tensor:
    """Differentiable leaf tensor with a persistent grad buffer."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological evaluation order of the graph below ``root``.

    Only nodes that require grad are visited; constant subgraphs are pruned.
    """
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
        for p in node._parents:
            if p.requires_grad and p._backward is not None and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    ``root`` must be scalar.  Leaf grad buffers are accumulated into, not
    overwritten, so callers zero them between independent passes.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad += pg.reshape(parent.data.shape)
            else:
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    acc += pg


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents, backward_rule) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_rule)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _node(out, (a, b), rule)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, -_unbroadcast(g, b.data.shape)))

    return _node(out, (a, b), rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")

    def rule(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return _node(out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def rule(g):
        return ((x, g * c),)

    return _node(out, (x,), rule)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Matrix product with optional transpose of the last two axes of ``b``.

    Operands must be at least 2-d; leading batch axes broadcast as in
    ``np.matmul``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.data.shape[-1] != bd.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dims differ, {a.shape} @ {b.shape}"
            f"{' (transpose_b)' if transpose_b else ''}")
    out = np.matmul(a.data, bd)

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.data.shape)
        gbd = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), bd.shape)
        gb = np.swapaxes(gbd, -1, -2) if transpose_b else gbd
        return ((a, ga), (b, gb))

    return _node(out, (a, b), rule)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def rule(g):
        return ((x, g.reshape(x.data.shape)),)

    return _node(out, (x,), rule)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def rule(g):
        return ((x, np.transpose(g, inv)),)

    return _node(out, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return _node(out, tuple(tensors), rule)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def rule(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.data.shape).copy()),)
        gg = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg, x.data.shape).copy()),)

    return _node(out, (x,), rule)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return scale(tensor_sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = expit(x.data)

    def rule(g):
        return ((x, g * y * (1.0 - y)),)

    return _node(y, (x,), rule)


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)); never produces -inf for finite x."""
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, -np.log1p(np.exp(-np.abs(d))), d - np.log1p(np.exp(-np.abs(d))))
    sig_neg = expit(-d)  # d/dx log sigmoid(x) = sigmoid(-x)

    def rule(g):
        return ((x, g * sig_neg),)

    return _node(out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def rule(g):
        return ((x, g * (1.0 - y * y)),)

    return _node(y, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    d = x.data
    phi = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    y = d * phi
    dens = np.exp(-0.5 * d * d) * _INV_SQRT_2PI

    def rule(g):
        return ((x, g * (phi + d * dens)),)

    return _node(y, (x,), rule)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("exp overflow")

    def rule(g):
        return ((x, g * y),)

    return _node(y, (x,), rule)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    y = np.log(x.data)

    def rule(g):
        return ((x, g / x.data),)

    return _node(y, (x,), rule)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    floor = float(floor)
    y = np.maximum(x.data, floor)
    mask = (x.data > floor).astype(np.float64)

    def rule(g):
        return ((x, g * mask),)

    return _node(y, (x,), rule)


# ---------------------------------------------------------------------------
# softmax family (row-wise over the last axis)


def row_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def rule(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((x, y * (g - dot)),)

    return _node(y, (x,), rule)


def row_log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def rule(g):
        return ((x, g - soft * np.sum(g, axis=-1, keepdims=True)),)

    return _node(y, (x,), rule)


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps).

    eps sits inside the square root, so the op is defined (and smooth) at
    x = 0.  Gain parameters are applied by the caller as a separate multiply.
    """
    x = _as_tensor(x)
    d = x.data
    n = d.shape[-1]
    ms = np.mean(d * d, axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    y = d * inv

    def rule(g):
        dot = np.sum(g * d, axis=-1, keepdims=True)
        return ((x, g * inv - d * (dot * inv**3 / n)),)

    return _node(y, (x,), rule)


# ---------------------------------------------------------------------------
# indexing ops


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :].  ``ids`` is an integer array."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding_lookup ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise IndexError(
            f"embedding_lookup ids out of range [0, {weight.data.shape[0]})")
    out = weight.data[ids]

    def rule(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        return ((weight, gw),)

    return _node(out, (weight,), rule)


def gather_logprob(logp: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = logp[..., ids[...]]; one element per row of the last axis."""
    logp = _as_tensor(logp)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"gather_logprob ids must be integers, got {ids.dtype}")
    if ids.shape != logp.data.shape[:-1]:
        raise ShapeMismatchError(
            f"gather_logprob: ids shape {ids.shape} != row shape {logp.data.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= logp.data.shape[-1]):
        raise IndexError(f"gather_logprob ids out of range [0, {logp.data.shape[-1]})")
    expanded = ids[..., None]
    out = np.take_along_axis(logp.data, expanded, axis=-1)[..., 0]

    def rule(g):
        gz = np.zeros_like(logp.data)
        np.put_along_axis(gz, expanded, g[..., None], axis=-1)
        return ((logp, gz),)

    return _node(out, (logp,), rule)


def causal_mask_add(scores: Tensor) -> Tensor:
    """Add -1e9 above the diagonal of the last two axes.

    Documented saturation: after row_softmax the masked positions underflow
    to exactly 0.0, which makes causality bit-exact (see model tests).
    """
    scores = _as_tensor(scores)
    t1, t2 = scores.data.shape[-2], scores.data.shape[-1]
    if t1 != t2:
        raise ShapeMismatchError(f"causal_mask_add expects square last axes, got {scores.shape}")
    mask = np.triu(np.full((t1, t2), _MASK_FILL), k=1)
    out = scores.data + mask

    def rule(g):
        return ((scores, g),)

    return _node(out, (scores,), rule)


# ---------------------------------------------------------------------------
# dispatch table, mostly for contract tests and small scripting

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "subtract": subtract,
    "scale": scale,
    "row_softmax": row_softmax,
    "row_log_softmax": row_log_softmax,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "rms_normalize": rms_normalize,
    "embedding_lookup": embedding_lookup,
    "gather_logprob": gather_logprob,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "concat": concat,
    "causal_mask_add": causal_mask_add,
    "exp": exp,
    "log": log,
    "clamp_min": clamp_min,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply an op by name.  Hyphenated names are accepted."""
    key = kind.replace("-", "_")
    if key not in OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    return OPS[key](*inputs, **kwargs)
