"""Minimal reverse-mode differentiation engine on float64 numpy arrays.

Eager evaluation with an implicit tape: every operation computes its value
immediately and records a vector-Jacobian rule referencing its parents.
``backward`` walks the graph once in reverse topological order, accumulating
gradients additively across fan-out. A graph is confined to one thread.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NonScalarOutputError, ShapeMismatchError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 1 or b.value.ndim != 2:
        raise ShapeMismatchError(f"matmul expects (..., n) @ (n, m), got {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def vjp(g):
        ga = g @ b.value.T
        if a.value.ndim == 1:
            gb = np.outer(a.value, g)
        else:
            gb = a.value.reshape(-1, a.value.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor(value, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)
    return Tensor(value, (a,), lambda g: (g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.value)
    return Tensor(value, (a,), lambda g: (g * (1.0 - value**2),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = np.where(
        a.value >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.value))),
        np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))),
    )
    return Tensor(value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.value, -500, 500)))
    return Tensor(value, (a,), lambda g: (g * sig,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - inner),)

    return Tensor(value, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    value = m + np.log(s)
    soft = e / s
    if not keepdims:
        value = np.squeeze(value, axis=axis)

    def vjp(g):
        gg = np.expand_dims(g, axis) if not keepdims else g
        return (gg * soft,)

    return Tensor(value, (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Tensor(value, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(c) for c in np.split(g, splits, axis=axis))

    return Tensor(value, tuple(parts), vjp)


def narrow(a, start: int, length: int) -> Tensor:
    """Contiguous slice along the last axis."""
    a = as_tensor(a)
    value = a.value[..., start : start + length]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., start : start + length] = g
        return (out,)

    return Tensor(value, (a,), vjp)


def take_cols(a, idx) -> Tensor:
    """Gather columns of the last axis by an integer index list."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    value = a.value[..., idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out.reshape(-1, a.value.shape[-1]), (slice(None), idx), g.reshape(-1, len(idx)))
        return (out,)

    return Tensor(value, (a,), vjp)


def diag_part(a) -> Tensor:
    a = as_tensor(a)
    value = np.diagonal(a.value).copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        np.fill_diagonal(out, g)
        return (out,)

    return Tensor(value, (a,), vjp)


def diag_embed(v) -> Tensor:
    v = as_tensor(v)
    value = np.diag(v.value)
    return Tensor(value, (v,), lambda g: (np.diagonal(g).copy(),))


def tril_strict(a) -> Tensor:
    a = as_tensor(a)
    mask = np.tril(np.ones_like(a.value), k=-1)
    return mul(a, Tensor(mask))


def solve_lower_rows(L, y) -> Tensor:
    """Solve ``L u_i = y_i`` for each row ``y_i`` of a (n, K) matrix.

    L must be lower triangular (K, K); returns (n, K).
    """
    L, y = as_tensor(L), as_tensor(y)
    u = solve_triangular(L.value, y.value.T, lower=True).T

    def vjp(g):
        w = solve_triangular(L.value.T, g.T, lower=False).T  # L^{-T} g, row-wise
        grad_L = -(w.T @ u)
        grad_L = np.tril(grad_L)
        return grad_L, w

    return Tensor(u, (L, y), vjp)


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar output into ``.grad`` of the graph."""
    if out.value.size != 1:
        raise NonScalarOutputError(f"backward needs a scalar, got shape {out.value.shape}")

    # iterative DFS topological order over the needs-grad subgraph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> dict[str, np.ndarray]:
    """Scale the full gradient set so its global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g**2
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            self.params[k].value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ParamStore:
    """Named registry of trainable tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.value = np.asarray(state[k], dtype=np.float64).reshape(t.value.shape)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense:
    """Affine layer y = x @ W + b."""

    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator):
        self.W = store.add(f"{name}.W", glorot_uniform(rng, fan_in, fan_out))
        self.b = store.add(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.W), self.b)


class MLPBlock:
    """Two-layer network with tanh hidden activation."""

    def __init__(self, store: ParamStore, name: str, fan_in: int, hidden: int,
                 fan_out: int, rng: np.random.Generator):
        self.fc1 = Dense(store, f"{name}.fc1", fan_in, hidden, rng)
        self.fc2 = Dense(store, f"{name}.fc2", hidden, fan_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tanh(self.fc1(x)))


class GRUCell:
    """Standard gated recurrent unit update."""

    def __init__(self, store: ParamStore, name: str, input_size: int,
                 hidden_size: int, rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.x2h = Dense(store, f"{name}.x2h", input_size, 3 * hidden_size, rng)
        self.h2h = Dense(store, f"{name}.h2h", hidden_size, 3 * hidden_size, rng)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.hidden_size
        gx = self.x2h(x)
        gh = self.h2h(h)
        r = sigmoid(add(narrow(gx, 0, H), narrow(gh, 0, H)))
        z = sigmoid(add(narrow(gx, H, H), narrow(gh, H, H)))
        n = tanh(add(narrow(gx, 2 * H, H), mul(r, narrow(gh, 2 * H, H))))
        return add(mul(1.0 - z, n), mul(z, h))


def finite_difference_check(build_fn, params: dict[str, Tensor], n_probes: int = 100,
                            step: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Max relative error of backward gradients vs central differences.

    ``build_fn`` rebuilds the scalar loss from the current parameter values.
    Probes are random coordinates of random parameters.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    out = build_fn()
    backward(out)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for k, t in params.items()}
    names = sorted(params)
    worst = 0.0
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        t = params[name]
        if t.value.size == 0:
            continue
        flat_idx = int(rng.integers(t.value.size))
        idx = np.unravel_index(flat_idx, t.value.shape)
        orig = t.value[idx]
        t.value[idx] = orig + step
        f_plus = float(build_fn().value)
        t.value[idx] = orig - step
        f_minus = float(build_fn().value)
        t.value[idx] = orig
        fd = (f_plus - f_minus) / (2 * step)
        an = float(analytic[name][idx])
        err = abs(fd - an) / (max(abs(fd), abs(an)) + 1e-8)
        worst = max(worst, err)
    return worst
