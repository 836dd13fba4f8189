"""Dense tensors with reverse-mode automatic differentiation.

Minimal tape-style engine over numpy arrays: each op records its parents
and a backward closure on the output tensor, `trace` linearizes the DAG
below a loss, and `backward` walks it in reverse accumulating gradients.
Every op checks its output for NaN/Inf unless checks are globally
disabled; inference code wraps calls in `no_grad()` to skip closure
construction entirely.

Float32 is the working precision for training; tests build float64
tensors where finite-difference headroom matters. Ops never change the
dtype they were given.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

_CHECK_FINITE = True
_GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class no_grad:
    """Context manager: ops built inside record no backward closures."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 op="leaf", _check: bool = True):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if _check and _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values out of op {op!r}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward_from(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def param(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=True)


def _needs(t: Tensor) -> bool:
    """Whether a gradient must flow into this operand."""
    return t.requires_grad or t._backward is not None


def _make(data, parents, bwd, op, check: bool = True) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(data, op=op, _check=check)
    if not any(_needs(p) for p in parents):
        return Tensor(data, op=op, _check=check)
    return Tensor(data, _parents=tuple(parents), _backward=bwd, op=op, _check=check)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g, grads):
        if _needs(a):
            grads[0] = _unbroadcast(g, a.shape)
        if _needs(b):
            grads[1] = _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g, grads):
        if _needs(a):
            grads[0] = _unbroadcast(g, a.shape)
        if _needs(b):
            grads[1] = _unbroadcast(-g, b.shape)

    return _make(out_data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g, grads):
        if _needs(a):
            grads[0] = _unbroadcast(g * b.data, a.shape)
        if _needs(b):
            grads[1] = _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (cheaper than a constant-tensor mul)."""
    out_data = a.data * s

    def bwd(g, grads):
        grads[0] = g * s

    return _make(out_data, (a,), bwd, "scale")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p

    def bwd(g, grads):
        grads[0] = g * p * a.data ** (p - 1)

    return _make(out_data, (a,), bwd, f"pow{p}")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g, grads):
        grads[0] = g * out_data

    return _make(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def bwd(g, grads):
        grads[0] = g / a.data

    return _make(out_data, (a,), bwd, "log")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g, grads):
        grads[0] = g * (1.0 - out_data * out_data)

    return _make(out_data, (a,), bwd, "tanh")


def relu_sq(a: Tensor) -> Tensor:
    """Squared ReLU feed-forward activation: max(x, 0)^2."""
    r = np.maximum(a.data, 0.0)
    out_data = r * r

    def bwd(g, grads):
        grads[0] = g * (2.0 * r)

    return _make(out_data, (a,), bwd, "relu_sq")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), computed stably as -log(1 + exp(-x))."""
    out_data = -np.logaddexp(0.0, -a.data)

    def bwd(g, grads):
        grads[0] = g / (1.0 + np.exp(a.data))  # sigmoid(-x)

    return _make(out_data, (a,), bwd, "log_sigmoid")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, grads):
        if axis is None:
            grads[0] = np.broadcast_to(g, a.shape).copy()
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            grads[0] = np.broadcast_to(gg, a.shape).copy()

    return _make(out_data, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g, grads):
        if axis is None:
            grads[0] = np.broadcast_to(g / count, a.shape).copy()
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            grads[0] = np.broadcast_to(gg / count, a.shape).copy()

    return _make(out_data, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == b.data.ndim == 2:
        pass
    elif a.data.ndim == b.data.ndim == 3 and a.shape[0] == b.shape[0]:
        pass
    else:
        raise ShapeError(f"matmul expects 2D@2D or batched 3D@3D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g, grads):
        if _needs(a):
            grads[0] = g @ np.swapaxes(b.data, -1, -2)
        if _needs(b):
            grads[1] = np.swapaxes(a.data, -1, -2) @ g

    return _make(out_data, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g, grads):
        grads[0] = g.reshape(a.shape)

    return _make(out_data, (a,), bwd, "reshape", check=False)


def transpose(a: Tensor, axes) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g, grads):
        grads[0] = np.transpose(g, inv)

    return _make(out_data, (a,), bwd, "transpose", check=False)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows; also serves as embedding lookup (table as `a`)."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def bwd(g, grads):
        acc = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(acc, idx, g)
        grads[0] = acc

    return _make(out_data, (a,), bwd, "take_rows", check=False)


def put_rows(a: Tensor, idx, length: int) -> Tensor:
    """Scatter rows of `a` into a zero matrix of `length` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != a.shape[0]:
        raise ShapeError("put_rows index count must match row count")
    out_data = np.zeros((length,) + a.shape[1:], dtype=a.dtype)
    out_data[idx] = a.data

    def bwd(g, grads):
        grads[0] = g[idx]

    return _make(out_data, (a,), bwd, "put_rows", check=False)


def embedding(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to mask==True entries.

    Masked entries come out exactly 0.0; each row must have at least one
    visible entry. The mask broadcasts against leading axes of `scores`.
    """
    mask = np.asarray(mask, dtype=bool)
    neg = np.where(mask, scores.data, -np.inf)
    row_max = neg.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ShapeError("masked_softmax: a row has no visible entries")
    np.subtract(neg, row_max, out=neg)
    np.exp(neg, out=neg)  # exp(-inf) gives exactly 0.0 at masked entries
    denom = neg.sum(axis=-1, keepdims=True)
    out_data = np.divide(neg, denom, out=neg)

    def bwd(g, grads):
        dot = (out_data * g).sum(axis=-1, keepdims=True)
        grads[0] = out_data * (g - dot)

    return _make(out_data, (scores,), bwd, "masked_softmax", check=False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g, grads):
        n = x.shape[-1]
        gxh = g * gamma.data
        # d xhat -> d x with mean/variance coupling
        dx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        grads[0] = dx
        grads[1] = _unbroadcast(g * xhat, gamma.shape)
        grads[2] = _unbroadcast(g, beta.shape)

    return _make(out_data, (x, gamma, beta), bwd, "layer_norm")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row negative log-likelihood of integer labels: (M,V) -> (M,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross entropy shapes: {logits.shape} vs labels {labels.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    rows = np.arange(labels.shape[0])
    out_data = -logp[rows, labels]

    def bwd(g, grads):
        p = ez / denom
        p[rows, labels] -= 1.0
        grads[0] = p * g[:, None]

    return _make(out_data, (logits,), bwd, "softmax_cross_entropy")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse

    def bwd(g, grads):
        p = np.exp(out_data)
        grads[0] = g - p * g.sum(axis=-1, keepdims=True)

    return _make(out_data, (logits,), bwd, "log_softmax")


# ---------------------------------------------------------------------------
# Graph and backward pass
# ---------------------------------------------------------------------------

@dataclass
class OpRecord:
    tensor: Tensor
    op: str
    parents: tuple


@dataclass
class Graph:
    """Linearized op DAG below one output tensor, leaves first."""

    nodes: list = field(default_factory=list)

    @staticmethod
    def trace(output: Tensor) -> "Graph":
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        g = Graph([OpRecord(t, t.op, t._parents) for t in order])
        g.check()
        return g

    def check(self) -> None:
        """Every non-leaf's inputs must precede it (acyclicity witness)."""
        pos = {id(r.tensor): i for i, r in enumerate(self.nodes)}
        for i, rec in enumerate(self.nodes):
            for p in rec.parents:
                if pos[id(p)] >= i:
                    raise ShapeError("graph is not topologically ordered")


def backward_from(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into .grad for every reachable tensor."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for rec in reversed(graph.nodes):
        t = rec.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        local: dict[int, np.ndarray] = {}
        t._backward(g, local)
        if _CHECK_FINITE:
            for arr in local.values():
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteError(f"non-finite gradient out of op {t.op!r}")
        for slot, pg in local.items():
            p = rec.parents[slot]
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def backward(loss: Tensor, leaves: dict | None = None) -> dict:
    """Run the reverse pass; return gradients for the named leaves.

    Leaves that do not participate in the loss get zero gradients of the
    right shape. Existing .grad values on the leaves are not consumed; this
    call resets them first so repeated calls stay independent.
    """
    if leaves:
        for t in leaves.values():
            t.grad = None
    backward_from(loss)
    if leaves is None:
        return {}
    out = {}
    for name, t in leaves.items():
        out[name] = t.grad if t.grad is not None else np.zeros(t.shape, dtype=t.dtype)
    return out
