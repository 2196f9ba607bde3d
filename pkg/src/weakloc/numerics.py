"""Small dense tensor library with tape-based reverse-mode differentiation.

Values are numpy arrays of rank 0-2 wrapped in :class:`Tensor`. Every
primitive below computes its result eagerly and, when a :class:`Tape` is
active and at least one operand requires gradients, appends a record holding
a vector-Jacobian closure. :func:`backward` replays those records in reverse.

Training runs in float32. :func:`finite_diff_check` promotes parameters to
float64 and compares analytic gradients with central differences.
"""
from __future__ import annotations

import logging
import threading
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data), name=name, requires_grad=True)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; while active, primitives record themselves.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.guard_events = 0

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (m,k)@(k,), (k,)@(k,n) and (k,)@(k,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    A, B = a.data, b.data

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _emit("matmul", np.asarray(A @ B), (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m,n) matrix, or to an (n,) vector."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape} do not conform")

    def vjp(g):
        return g, g.sum(axis=0) if g.ndim == 2 else g

    return _emit("add_bias", x.data + bias.data, (x, bias), vjp)


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Add a single-element tensor to every element of ``x``."""
    if s.data.size != 1:
        raise ShapeError(f"add_scalar: expected a single-element operand, got {s.shape}")
    shape = s.shape
    return _emit("add_scalar", x.data + s.data.reshape(()), (x, s),
                 lambda g: (g, np.sum(g).reshape(shape)))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by a single-element tensor."""
    if s.data.size != 1:
        raise ShapeError(f"scale: expected a single-element operand, got {s.shape}")
    X, S = x.data, s.data.reshape(())
    shape = s.shape
    return _emit("scale", X * S, (x, s),
                 lambda g: (g * S, np.sum(g * X).reshape(shape).astype(g.dtype)))


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """Elementwise ``a * x + b`` with constant coefficients."""
    dt = x.dtype.type
    return _emit("affine", x.data * dt(a) + dt(b), (x,), lambda g: (g * dt(a),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # two-branch form avoids overflow in exp
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1 / (1 + e), e / (1 + e)).astype(X.dtype)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    X = x.data
    z = np.exp(X - X.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(f"layernorm: input {x.shape} with gain {gain.shape}, shift {shift.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * rstd
    G = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead)
        gshift = np.sum(g, axis=lead)
        gx_hat = g * G
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        return gx, ggain, gshift

    return _emit("layernorm", xhat * G + shift.data, (x, gain, shift), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode requires an explicit rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """``sum_t weights[t] * rows[t]`` for a (T,) weight vector and a (T,d) matrix."""
    if weights.data.ndim != 1 or rows.data.ndim != 2 or weights.shape[0] != rows.shape[0]:
        raise ShapeError(f"weighted_sum: shapes {weights.shape} and {rows.shape} do not conform")
    return matmul(weights, rows)


def mean_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected a matrix, got shape {x.shape}")
    T = x.shape[0]
    return _emit("mean_rows", x.data.mean(axis=0), (x,),
                 lambda g: (np.broadcast_to(g / x.dtype.type(T), x.shape).copy(),))


def max_rows(x: Tensor) -> Tensor:
    """Per-column maximum over rows; gradient routed to the first maximal row."""
    if x.data.ndim != 2:
        raise ShapeError(f"max_rows: expected a matrix, got shape {x.shape}")
    idx = x.data.argmax(axis=0)
    cols = np.arange(x.shape[1])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g
        return (gx,)

    return _emit("max_rows", x.data[idx, cols], (x,), vjp)


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, returning a rank-0 tensor."""
    n = x.data.size
    return _emit("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat: expected vectors, got {a.shape} and {b.shape}")
    n = a.shape[0]
    return _emit("concat", np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:]))


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack single-element tensors into a vector."""
    for t in items:
        if t.data.size != 1:
            raise ShapeError(f"stack: expected single-element operands, got {t.shape}")
    shapes = [t.shape for t in items]
    data = np.array([t.data.reshape(()) for t in items], dtype=items[0].dtype)
    return _emit("stack", data, tuple(items),
                 lambda g: tuple(g[i].reshape(s) for i, s in enumerate(shapes)))


def index(x: Tensor, i: int) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"index: expected a vector, got shape {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _emit("index", np.asarray(x.data[i]), (x,), vjp)


def focal_loss(logits: Tensor, label: int, gamma: float, class_weights: Sequence[float]) -> Tensor:
    """Class-weighted focal loss ``-a_y (1 - p_y)^gamma log p_y`` on softmax probabilities."""
    if logits.shape != (2,):
        raise ShapeError(f"focal_loss: expected 2 logits, got shape {logits.shape}")
    if gamma < 0 or min(class_weights) <= 0:
        raise ContractError("focal_loss: gamma must be >= 0 and class weights > 0")
    Z = logits.data.astype(np.float64)
    z = np.exp(Z - Z.max())
    p = z / z.sum()
    pt_raw = p[label]
    pt = float(np.clip(pt_raw, PROB_CLAMP, 1 - PROB_CLAMP))
    clamped = pt != pt_raw
    if clamped:
        tape = active_tape()
        if tape is not None:
            tape.guard_events += 1
        logger.debug("focal_loss: p_t=%g clamped", pt_raw)
    alpha = float(class_weights[label])
    q = 1.0 - pt
    loss = -alpha * q ** gamma * np.log(pt)

    def vjp(g):
        if clamped:
            return (np.zeros_like(logits.data),)
        dpt = alpha * (gamma * q ** (gamma - 1) * np.log(pt) - q ** gamma / pt) if gamma else -alpha / pt
        onehot = np.zeros(2)
        onehot[label] = 1.0
        gz = g * dpt * pt * (onehot - p)
        return (gz.astype(logits.dtype),)

    return _emit("focal_loss", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each named parameter.

    Parameters that do not influence the loss receive zero arrays. The tape is
    not modified, so replaying it gives identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    result = {}
    for name, p in params.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        result[name] = g
    return result


def finite_diff_check(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    epsilon: float = 1e-5,
    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` receives float64 copies of ``params`` and must be deterministic.
    ``grad_hook`` may rewrite analytic gradients (used to test the checker).
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    p64 = {k: parameter(v.data.astype(np.float64), name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(p64)
        analytic = backward(tape, loss, p64)
    base = loss.item()
    again = loss_fn(p64).item()
    if base != again:
        raise ContractError(f"finite_diff_check: loss is not deterministic ({base!r} vs {again!r})")

    errors: dict[str, float] = {}
    for name, p in p64.items():
        a = analytic[name] if grad_hook is None else grad_hook(name, analytic[name])
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_fn(p64).item()
            flat[i] = orig - epsilon
            lm = loss_fn(p64).item()
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            denom = max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[i] - num) / denom)
        errors[name] = worst
    return errors
