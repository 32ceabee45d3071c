"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with``).
When no tape is active nothing is recorded, which is how inference runs.
Shapes are explicit: binary elementwise ops require equal shapes and the only
implicit broadcast is the row-wise bias add in :func:`add_bias`.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MASK_NEG = -1e9
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is already a topological
    order; :meth:`backward` walks it in exact reverse.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    _accumulate(inp, ig)
        # loss itself may be a leaf (no ops recorded)
        if id(loss) in grads and id(loss) not in produced and loss.requires_grad:
            _accumulate(loss, grads[id(loss)])


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or Tape.current()
    if tape is None:
        raise StateError("no tape recorded for this loss")
    tape.backward(loss)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum proves every entry is finite; only fall back to the full scan otherwise
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    _check_finite(op, data)
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, bwd))
    return out


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Record a hand-written primitive; ``bwd(g)`` returns one grad (or None) per input."""
    return _make(op, data, inputs, bwd)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading dimension (no broadcasting)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make(
        "bmm",
        A @ B,
        (a, b),
        lambda g: (g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g),
    )


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add: ``b`` has shape ``(n,)`` and ``x`` ends in ``n``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(X))
    s = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _make("relu", y, (x,), lambda g: (g * (y > 0),))


def elementwise(kind: str, *inputs: Tensor) -> Tensor:
    ops = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "sub": sub, "relu": relu}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](*inputs)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    shp, dt = x.shape, x.data.dtype
    return _make("sum_all", np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.full(shp, g, dtype=dt),))


def mean_all(x: Tensor) -> Tensor:
    shp, dt, n = x.shape, x.data.dtype, x.data.size
    return _make(
        "mean_all",
        np.asarray(x.data.mean(), dtype=dt),
        (x,),
        lambda g: (np.full(shp, g / n, dtype=dt),),
    )


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``(B, T, D)`` using a constant ``(B, T)`` 0/1 mask."""
    m = np.asarray(mask, dtype=x.data.dtype)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask {m.shape} vs input {x.shape}")
    counts = m.sum(axis=1)
    if (counts <= 0).any():
        raise ValueError("masked_mean: a row has no valid positions")
    w = (m / counts[:, None])[:, :, None]
    return _make("masked_mean", (x.data * w).sum(axis=1), (x,), lambda g: (g[:, None, :] * w,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[u.shape for u in xs]}")
    splits = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    shp, dt = x.shape, x.data.dtype

    def bwd(g):
        out = np.zeros(shp, dtype=dt)
        out[key] = g
        return (out,)

    return _make("index", np.array(x.data[key]), (x,), bwd)


# ---------------------------------------------------------------- normalisation


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    y = _softmax_np(x.data, axis)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def mask_keys(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    """Add a large negative constant to logits of masked key columns.

    ``scores`` is ``(B, H, L, L)`` and ``key_mask`` is a boolean ``(B, L)``.
    The constant is not differentiated; the gradient passes straight through.
    """
    km = np.asarray(key_mask, dtype=bool)
    if scores.ndim != 4 or km.shape != (scores.shape[0], scores.shape[3]):
        raise ShapeError(f"mask_keys: mask {km.shape} vs scores {scores.shape}")
    if not km.any(axis=1).all():
        raise ValueError("attention: every token of a sequence is masked")
    bias = np.where(km, 0.0, MASK_NEG).astype(scores.data.dtype)[:, None, None, :]
    return _make("mask_keys", scores.data + bias, (scores,), lambda g: (g,))


def attention_core(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, heads: int) -> tuple[Tensor, np.ndarray]:
    """Fused softmax(q kᵀ / √dk + mask) v over ``(B*heads, L, dk)`` inputs.

    Same result as composing bmm, scale, mask_keys, softmax and bmm, but
    keeps only the weights for backward. Returns the context and the
    ``(B, heads, L, L)`` weights.
    """
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention_core: q {q.shape}, k {k.shape}, v {v.shape}")
    BH, L, dk = q.shape
    km = np.asarray(key_mask, dtype=bool)
    if BH % heads or km.shape != (BH // heads, L):
        raise ShapeError(f"attention_core: mask {km.shape} vs {BH // heads} x {L} tokens")
    if not km.any(axis=1).all():
        raise ValueError("attention: every token of a sequence is masked")
    c = float(1.0 / np.sqrt(dk))
    Q, K, V = q.data, k.data, v.data
    S = Q @ K.transpose(0, 2, 1)
    S *= c
    S = S.reshape(BH // heads, heads, L, L)
    S += np.where(km, 0.0, MASK_NEG).astype(S.dtype)[:, None, None, :]
    S -= S.max(axis=-1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=-1, keepdims=True)
    P4 = S
    P = P4.reshape(BH, L, L)
    out = P @ V

    def bwd(g):
        dV = P.transpose(0, 2, 1) @ g
        dP = g @ V.transpose(0, 2, 1)
        dP -= (dP * P).sum(axis=-1, keepdims=True)
        dP *= P
        dP *= c
        return dP @ K, dP.transpose(0, 2, 1) @ Q, dV

    return _make("attention_core", out, (q, k, v), bwd), P4


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    axes = tuple(range(X.ndim - 1))

    def bwd(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("layer_norm", xhat * G + beta.data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable tensors, kept in insertion order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._entries.items()

    def values(self) -> Iterable[Tensor]:
        return self._entries.values()

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def astype(self, dtype) -> None:
        for t in self._entries.values():
            t.data = t.data.astype(dtype)
            t.grad = None


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    corrupt: float = 1.0,
) -> float:
    """Max per-coordinate relative error between analytic and central-difference grads.

    ``f`` rebuilds the scalar loss from the current parameter values each call.
    ``corrupt`` multiplies the analytic gradient; values other than 1 exist to
    confirm the checker notices a wrong gradient.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [
        (p.grad if p.grad is not None else np.zeros_like(p.data)) * corrupt for p in params
    ]

    def value() -> float:
        return float(f().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(value, p, eps)
        rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
