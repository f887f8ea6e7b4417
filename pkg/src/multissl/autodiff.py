"""Dense float32 tensors with reverse-mode differentiation.

The op set is deliberately closed: linear maps, ReLU, (log-)softmax,
elementwise arithmetic, reductions, concatenation, MSE, and row
normalization are everything an MLP-plus-contrastive-loss stack needs.
There is no general graph machinery beyond that. Reductions accumulate
in float64 and cast back to float32 so scalar losses are stable.

Gradients persist on nodes: ``backward`` adds this pass's adjoints into
``.grad`` (calling it twice without ``zero_grads`` accumulates).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, OptimizerError, ShapeError

DTYPE = np.float32

# Additive mask value for excluded softmax logits. Finite so that
# 0 * masked_output stays 0 (never NaN), yet exp() underflows to exactly 0.
MASK_NEG = np.float32(-1.0e9)


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    return arr


class Tensor:
    """A node in the computation graph.

    Attributes
    ----------
    data : np.ndarray
        Row-major float32 buffer.
    grad : np.ndarray or None
        Accumulated adjoint, same shape as ``data``. Allocated lazily.
    requires_grad : bool
        True for trainable leaves and anything computed from one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def leaf(data, requires_grad: bool = False, check_finite: bool = True) -> "Tensor":
        """Create a graph leaf from external data."""
        t = Tensor(data, requires_grad=requires_grad)
        if check_finite and not np.all(np.isfinite(t.data)):
            raise ContractError("tensor leaf contains non-finite values")
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new constant leaf sharing this node's values (gradient barrier)."""
        return Tensor(self.data.copy())

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


class Parameter:
    """A trainable tensor with AdamW state.

    ``value`` is the graph leaf; ``value.grad`` is where ``backward``
    accumulates. Moments are zero-initialized and ``step_count`` starts
    at 0.
    """

    __slots__ = ("name", "value", "moment1", "moment2", "step_count")

    def __init__(self, data, name: str = "param"):
        self.name = name
        self.value = Tensor.leaf(data, requires_grad=True)
        self.value._ensure_grad()
        self.moment1 = np.zeros_like(self.value.data)
        self.moment2 = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value._ensure_grad()

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def check_grad_finite(self) -> None:
        if not np.all(np.isfinite(self.grad)):
            raise OptimizerError(f"non-finite gradient for parameter '{self.name}'")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, step={self.step_count})"


def zero_grads(params) -> None:
    """Reset gradients of an iterable of Parameters (explicit, never implicit)."""
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node under ``loss``.

    ``loss`` must be a scalar. Adjoints are computed pass-locally and then
    added into persistent ``.grad`` buffers, so repeated calls accumulate
    without double-counting earlier passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        out_grad = adjoint.get(id(node))
        if out_grad is None or node._backward is None:
            continue
        for parent, contrib in node._backward(out_grad):
            if not parent.requires_grad:
                continue
            slot = adjoint.get(id(parent))
            if slot is None:
                adjoint[id(parent)] = contrib.astype(DTYPE, copy=True)
            else:
                slot += contrib

    for node in topo:
        local = adjoint.get(id(node))
        if local is not None and node.requires_grad:
            node._ensure_grad()
            node.grad += local


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(DTYPE, copy=False)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b),
                 _backward=lambda g: ((a, _unbroadcast(g, a.shape)),
                                      (b, _unbroadcast(g, b.shape))))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return Tensor(a.data - b.data, _parents=(a, b),
                  _backward=lambda g: ((a, _unbroadcast(g, a.shape)),
                                       (b, _unbroadcast(-g, b.shape))))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return Tensor(a.data * b.data, _parents=(a, b),
                  _backward=lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                                       (b, _unbroadcast(g * a.data, b.shape))))


def scale(a: Tensor, c: float) -> Tensor:
    c32 = DTYPE(c)
    return Tensor(a.data * c32, _parents=(a,),
                  _backward=lambda g: ((a, g * c32),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, DTYPE(0)), _parents=(a,),
                  _backward=lambda g: ((a, g * mask),))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return Tensor(out_data, _parents=(a,),
                  _backward=lambda g: ((a, g * out_data),))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), _parents=(a,),
                  _backward=lambda g: ((a, g / a.data),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    sig32 = sig.astype(DTYPE)
    return Tensor(out_data, _parents=(a,),
                  _backward=lambda g: ((a, g * sig32),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, _parents=(a, b),
                  _backward=lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-length vectors, accumulated in float64."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    val = np.dot(a.data.astype(np.float64), b.data.astype(np.float64))
    return Tensor(np.asarray(val, dtype=DTYPE), _parents=(a, b),
                  _backward=lambda g: ((a, g * b.data), (b, g * a.data)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return Tensor(np.ascontiguousarray(a.data.T), _parents=(a,),
                  _backward=lambda g: ((a, np.ascontiguousarray(g.T)),))


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out[b, o] = sum_i x[b, i] * weight[i, o] + bias[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear_forward needs 2-D x and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear_forward: input dim {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.data.ndim != 1 or bias.shape[0] != weight.shape[1]:
        raise ShapeError(
            f"linear_forward: bias shape {bias.shape} != output dim {weight.shape[1]}")
    return add(matmul(x, weight), bias)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    if any(t.data.ndim != ndim for t in tensors):
        raise ShapeError("concat operands must share rank")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        slicer = [slice(None)] * ndim
        outs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            slicer[axis] = slice(start, stop)
            outs.append((t, np.ascontiguousarray(g[tuple(slicer)])))
        return outs

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=_backward)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, cast back to float32)
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def _backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g.reshape(()), a.shape).astype(DTYPE)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).astype(DTYPE)),)

    return Tensor(out_data, _parents=(a,), _backward=_backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)
    inv = DTYPE(1.0 / n)

    def _backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g.reshape(()) * inv, a.shape).astype(DTYPE)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg * inv, a.shape).astype(DTYPE)),)

    return Tensor(out_data, _parents=(a,), _backward=_backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, accumulated in float64."""
    if a.shape != b.shape:
        raise ShapeError(f"mse needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out_data = np.asarray(np.mean(diff * diff), dtype=DTYPE)
    coeff = (2.0 / a.data.size)
    diff32 = (diff * coeff).astype(DTYPE)

    def _backward(g):
        gd = g.reshape(()) * diff32
        return ((a, gd), (b, -gd))

    return Tensor(out_data, _parents=(a, b), _backward=_backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        return ((a, out_data * (g - inner)),)

    return Tensor(out_data, _parents=(a,), _backward=_backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data.astype(np.float64) - m.astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    # log-probabilities are <= 0 by definition; clamp rounding residue
    out_data = np.minimum(shifted - lse, 0.0).astype(DTYPE)
    probs = np.exp(shifted - lse).astype(DTYPE)

    def _backward(g):
        return ((a, g - probs * np.sum(g, axis=axis, keepdims=True)),)

    return Tensor(out_data, _parents=(a,), _backward=_backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D tensor, got {a.shape}")
    norms = np.sqrt(np.sum(a.data.astype(np.float64) ** 2, axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    inv = (1.0 / norms).astype(DTYPE)
    out_data = a.data * inv

    def _backward(g):
        row_dot = np.sum(g * out_data, axis=1, keepdims=True)
        return ((a, (g - out_data * row_dot) * inv),)

    return Tensor(out_data, _parents=(a,), _backward=_backward)
