"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every value is a row-major ``float64`` matrix. Operations executed while a
:class:`Tape` is active are recorded in creation order, which is already a
topological order, so the backward sweep is a single reversed pass.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(w * w) * 0.5
    >>> tape.backward(loss)
    >>> tape.grad(w)
    array([[1., 2.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    InsufficientBatchError,
    NonFiniteError,
)

__all__ = [
    "Tensor",
    "Tape",
    "NormState",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "activation",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "mean",
    "take_rows",
    "gather",
    "concat_rows",
    "masked_logsumexp",
    "layernorm",
    "batchnorm",
    "cosine_similarity_matrix",
    "weighted_cosine",
]

_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A 2-D float64 matrix that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for one reverse sweep. Single owner, not shared."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.adjoints: dict[int, np.ndarray] = {}
        self._swept = False

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, node: Tensor) -> None:
        self.nodes.append(node)

    @property
    def values(self) -> list[np.ndarray]:
        return [n.data for n in self.nodes]

    def backward(self, output: Tensor, seed_adjoint=None) -> None:
        if output.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) output, got {output.shape}")
        seed = np.ones((1, 1)) if seed_adjoint is None else np.asarray(seed_adjoint, dtype=np.float64)
        if seed.reshape(-1).shape != (1,):
            raise ContractError("seed adjoint must be 1x1")
        adj = {id(output): seed.reshape(1, 1).copy()}
        for node in reversed(self.nodes):
            g = adj.get(id(node))
            if g is None or node._backward is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        self.adjoints = adj
        self._swept = True

    def grad(self, t: Tensor) -> np.ndarray:
        """Adjoint of ``t`` after :meth:`backward`; zeros if ``t`` did not feed the output."""
        if not self._swept:
            raise ContractError("call backward() first")
        g = self.adjoints.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def gradients(self, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self.grad(p) for name, p in params.items()}


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape._record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}: inner dimensions differ")

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# -- elementwise functions -------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without forming the sigmoid, finite for large ``|a|``."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ContractError(f"unknown activation {kind!r}")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# -- reductions and indexing ----------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum all entries (1x1 result) or along ``axis`` keeping 2-D shape."""
    a = as_tensor(a)
    if axis is None:
        out = np.array([[a.data.sum()]])
    else:
        out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def take_rows(a, index: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "take_rows")


def gather(a, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Column vector of ``a[rows[k], cols[k]]``."""
    a = as_tensor(a)
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (r, c), g[:, 0])
        return (out,)

    return _make(a.data[r, c].reshape(-1, 1), (a,), backward, "gather")


def concat_rows(parts: Iterable) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    widths = {p.cols for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.data for p in parts]), parts, backward, "concat_rows")


def masked_logsumexp(a, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp over entries where ``mask`` is true (column vector)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != {a.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("masked_logsumexp: a row has no unmasked entries")
    # multiplicative masking: exp(-inf), np.where and masked max are slow paths.
    # Shift by the unmasked row max; fall back to the masked max on underflow.
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    e *= mask
    s = e.sum(axis=1, keepdims=True)
    if not (s > 0).all():
        m = np.max(a.data, axis=1, keepdims=True, where=mask, initial=-np.inf)
        e = np.exp(np.minimum(a.data - m, 0.0)) * mask
        s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    p = e / s

    return _make(out, (a,), lambda g: (g * p,), "masked_logsumexp")


# -- normalisation ----------------------------------------------------------


def layernorm(a, epsilon: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine terms)."""
    a = as_tensor(a)
    if a.cols < 2:
        raise DimensionError(f"layernorm needs at least 2 columns, got {a.cols}")
    xc = a.data - a.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + epsilon)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), backward, "layernorm")


@dataclass
class NormState:
    """Running statistics for a batch-normalisation layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, epsilon: float = 1e-5) -> NormState:
        return cls(np.zeros(width), np.ones(width), momentum, epsilon)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ContractError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")


def batchnorm(a, state: NormState, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Per-column normalisation (no affine terms).

    ``train`` uses batch statistics and, if ``update_stats``, folds them into
    ``state`` with the usual momentum rule (unbiased variance for the running
    estimate). ``eval`` uses the running statistics.
    """
    a = as_tensor(a)
    if a.cols != state.running_mean.shape[0]:
        raise DimensionError(f"batchnorm: width {a.cols} != state width {state.running_mean.shape[0]}")
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        y = (a.data - state.running_mean) * inv
        return _make(y, (a,), lambda g: (g * inv,), "batchnorm_eval")
    if mode != "train":
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    n = a.rows
    if n < 2:
        raise InsufficientBatchError(f"batchnorm in train mode needs >= 2 rows, got {n}")
    mu = a.data.mean(axis=0, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    y = xc * inv
    if update_stats:
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu[0]
        state.running_var = (1.0 - m) * state.running_var + m * var[0] * n / (n - 1)

    def backward(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * y).mean(axis=0, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), backward, "batchnorm_train")


# -- similarity -------------------------------------------------------------


def cosine_similarity_matrix(z) -> Tensor:
    """All-pairs cosine similarity of the rows of ``z``."""
    z = as_tensor(z)
    norms = np.sqrt((z.data * z.data).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {zero[0]} has zero norm", row=int(zero[0]))
    u = z.data / norms
    s = np.clip(u @ u.T, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)

    def backward(g):
        du = (g + g.T) @ u
        return ((du - u * (du * u).sum(axis=1, keepdims=True)) / norms,)

    return _make(s, (z,), backward, "cosine_similarity_matrix")


def weighted_cosine(w, a, z, valid: np.ndarray | None = None) -> Tensor:
    """``s[r, j] = cos(sqrt(w_r) * a_r, sqrt(w_r) * z_j)`` for nonnegative weights ``w``.

    Row ``r`` of ``w`` reweights every coordinate before the cosine of anchor
    ``a_r`` with each row of ``z``. Entries outside ``valid`` are set to 0 and
    receive no gradient; a zero-norm anchor or valid row raises
    :class:`DegenerateVectorError`. Fused for speed: the unfused chain costs
    about ten full-size temporaries per step.
    """
    w, a, z = as_tensor(w), as_tensor(a), as_tensor(z)
    if w.shape != a.shape or a.cols != z.cols:
        raise DimensionError(f"weighted_cosine: w {w.shape}, a {a.shape}, z {z.shape}")
    W, A, Z = w.data, a.data, z.data
    valid = np.ones((A.shape[0], Z.shape[0]), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != (A.shape[0], Z.shape[0]):
        raise DimensionError(f"valid mask shape {valid.shape}, expected {(A.shape[0], Z.shape[0])}")
    WA = W * A
    Z2 = Z * Z
    num = WA @ Z.T
    asq = (WA * A).sum(axis=1, keepdims=True)
    rsq = W @ Z2.T
    bad = np.flatnonzero(asq[:, 0] <= 0.0)
    if bad.size:
        raise DegenerateVectorError("weighted anchor has zero norm", row=int(bad[0]))
    if ((rsq <= 0.0) & valid).any():
        r, c = np.argwhere((rsq <= 0.0) & valid)[0]
        raise DegenerateVectorError(f"weighted row {c} has zero norm", row=int(c))
    # invalid entries get a unit denominator and a zero numerator
    validf = valid.astype(np.float64)
    rsq += 1.0 - validf
    inv = 1.0 / np.sqrt(asq * rsq)
    inv *= validf
    s = num * inv

    def backward(g):
        dnum = g * inv
        gs = g * s
        dasq = -0.5 * gs.sum(axis=1, keepdims=True) / asq
        drsq = -0.5 * gs / rsq
        dWA = dnum @ Z
        dW = dasq * (A * A) + drsq @ Z2 + dWA * A
        dA = 2.0 * dasq * WA + dWA * W
        dZ = dnum.T @ WA + 2.0 * Z * (drsq.T @ W)
        return dW, dA, dZ

    return _make(s, (w, a, z), backward, "weighted_cosine")
