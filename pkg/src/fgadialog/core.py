"""Dense tensors with reverse-mode gradients, the primitives built on them,
batch normalization state, an Adam optimizer and a finite-difference checker.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  ``Tensor.backward`` walks the
graph in reverse topological order.  Gradients accumulate (sum) into
:class:`Parameter` objects, so a parameter used several times receives the sum
of its contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor, accumulating into parameter grads."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate grads are only needed while walking
                if not isinstance(node, Parameter):
                    node.grad = None

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists between backward passes."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, copy=True))
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


class ParameterRegistry:
    """Ordered name -> Parameter map.  Names are unique."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    _check_finite(out, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    _check_finite(out, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    _check_finite(out, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)

    def backward(g):
        a._accumulate(g * a.dtype.type(c))

    return Tensor(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics for operands with ndim >= 2."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul expects operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _check_finite(out, "matmul")

    def backward(g):
        a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor(out, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = W x (+ b) applied along the last axis of ``x``.

    ``W`` has shape (d_out, d_in); ``x`` has shape (..., d_in).
    """
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ContractError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ContractError(f"linear: bias {b.shape} does not match W {W.shape}")
    y = np.tensordot(x.data, W.data, axes=([-1], [1]))
    if b is not None:
        y = y + b.data
    _check_finite(y, "linear")
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        x._accumulate(g @ W.data)
        lead = int(np.prod(g.shape[:-1]))
        W._accumulate(g.reshape(lead, -1).T @ x.data.reshape(lead, -1))
        if b is not None:
            b._accumulate(g.reshape(lead, -1).sum(axis=0))

    return Tensor(y, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    out = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor(out, (x,), backward)


def softmax(s: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if np.any(np.isnan(s.data)):
        raise NonFiniteError("softmax: NaN input")
    if s.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    z = s.data - s.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out, "softmax")

    def backward(g):
        s._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, (s,), backward)


def log_softmax(s: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(s.data)):
        raise NonFiniteError("log_softmax: NaN input")
    z = s.data - s.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    _check_finite(out, "log_softmax")

    def backward(g):
        p = np.exp(out)
        s._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (s,), backward)


def l2_normalize(x: Tensor, epsilon: float = 1e-12, axis: int = -1) -> Tensor:
    """x / max(||x||_2, epsilon) along ``axis``."""
    if epsilon <= 0:
        raise ContractError("l2_normalize: epsilon must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    active = norm >= epsilon
    denom = np.where(active, norm, x.dtype.type(epsilon))
    out = x.data / denom
    _check_finite(out, "l2_normalize")

    def backward(g):
        # inside the guard the map is linear: g / eps
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(active, (g - out * proj) / denom, g / denom)
        x._accumulate(gx)

    return Tensor(out, (x,), backward)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor(out, (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(out, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, int] = (-1, -2)) -> Tensor:
    """Swap two axes (the last two by default)."""
    out = np.swapaxes(x.data, *axes)

    def backward(g):
        x._accumulate(np.swapaxes(g, *axes))

    return Tensor(out, (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); gradient sums back."""
    out = np.broadcast_to(x.data, shape)

    def backward(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return Tensor(out, (x,), backward)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (np.ndarray, list)) for k in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        x._accumulate(gx)

    return Tensor(out, (x,), backward)


def embedding(ids: np.ndarray, E: Tensor) -> Tensor:
    """Row lookup ``E[ids]``; output shape ids.shape + (d,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise ContractError(f"embedding: id out of range [0, {E.shape[0]})")
    out = E.data[ids]

    def backward(g):
        gE = np.zeros_like(E.data)
        np.add.at(gE, ids.reshape(-1), g.reshape(-1, E.shape[1]))
        E._accumulate(gE)

    return Tensor(out, (E,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else tensors[0].data.ndim + axis
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for k, t in enumerate(tensors):
            t._accumulate(np.take(g, k, axis=axis))

    return Tensor(out, tuple(tensors), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  Identity (the same object) when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * mask

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Affine batch normalization with running statistics.

    ``gamma``/``beta`` are parameters of shape ``feature_shape`` (``()`` for the
    scalar variant used on interaction scores).  Statistics are pooled over all
    axes except the trailing ``len(feature_shape)`` ones.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    initialized: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("batchnorm epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ContractError("batchnorm momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ContractError("batchnorm running_var must be non-negative")

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.gamma.shape


def make_batchnorm(registry: ParameterRegistry, name: str, feature_shape=(), dtype=np.float64,
                   momentum: float = 0.1, epsilon: float = 1e-5) -> BatchNormState:
    gamma = registry.add(f"{name}.gamma", np.ones(feature_shape, dtype=dtype))
    beta = registry.add(f"{name}.beta", np.zeros(feature_shape, dtype=dtype))
    return BatchNormState(gamma, beta, np.zeros(feature_shape, dtype=dtype),
                          np.ones(feature_shape, dtype=dtype), momentum, epsilon)


def batch_norm(x: Tensor, st: BatchNormState, train: bool) -> Tensor:
    """Normalize ``x`` with batch (train) or running (eval) statistics, then
    apply ``gamma * xhat + beta``.  Train mode uses the population variance."""
    nf = len(st.feature_shape)
    if nf and x.shape[-nf:] != st.feature_shape:
        raise ContractError(f"batch_norm: features {x.shape[-nf:]} != {st.feature_shape}")
    axes = tuple(range(x.data.ndim - nf))
    pool = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    dt = x.dtype.type
    if train:
        if pool < 2:
            raise ContractError("batch_norm in train mode needs at least 2 pooled elements")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = dt(st.momentum)
        st.running_mean = ((1 - m) * st.running_mean + m * mu).astype(x.dtype)
        st.running_var = ((1 - m) * st.running_var + m * var).astype(x.dtype)
        st.initialized = True
    else:
        if not st.initialized:
            raise ContractError("batch_norm in eval mode before any statistics were collected")
        mu = st.running_mean.astype(x.dtype)
        var = st.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + dt(st.epsilon))
    xhat = (x.data - mu) * inv
    out = st.gamma.data * xhat + st.beta.data
    _check_finite(out, "batch_norm")

    def backward(g):
        st.gamma._accumulate(_unbroadcast(g * xhat, st.gamma.shape))
        st.beta._accumulate(_unbroadcast(g, st.beta.shape))
        gxhat = g * st.gamma.data
        if train:
            gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            gx = gxhat * inv
        x._accumulate(gx)

    return Tensor(out, (x, st.gamma, st.beta), backward)


def batchnorm_scalar(scores: Tensor, st: BatchNormState, train: bool) -> Tensor:
    """Scalar batch normalization pooled over every element of ``scores``."""
    if st.feature_shape != ():
        raise ContractError("batchnorm_scalar needs scalar gamma/beta")
    return batch_norm(scores, st, train)


# ---------------------------------------------------------------------------
# losses


def nll_loss(probs: Tensor, gt) -> Tensor:
    """Mean of -log probs[b, gt[b]] over the batch.  ``probs`` is (B, n) or (n,)."""
    p = probs if probs.data.ndim == 2 else reshape(probs, (1, -1))
    gt = np.atleast_1d(np.asarray(gt))
    n = p.shape[1]
    if gt.shape[0] != p.shape[0] or np.any(gt < 0) or np.any(gt >= n):
        raise ContractError(f"nll_loss: ground-truth index out of range [0, {n})")
    picked = index(p, (np.arange(p.shape[0]), gt))
    return scale(reduce_sum(log(picked)), -1.0 / p.shape[0])


def cross_entropy(scores: Tensor, gt) -> Tensor:
    """nll_loss(softmax(scores), gt) computed through log_softmax."""
    gt = np.atleast_1d(np.asarray(gt))
    n = scores.shape[-1]
    if np.any(gt < 0) or np.any(gt >= n):
        raise ContractError(f"cross_entropy: ground-truth index out of range [0, {n})")
    lp = log_softmax(scores, axis=-1)
    picked = index(lp, (np.arange(scores.shape[0]), gt))
    return scale(reduce_sum(picked), -1.0 / scores.shape[0])


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction.  Frozen (``trainable=False``) parameters are skipped."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, self.t)


def adam_step(params: Iterable[Parameter], m: dict, v: dict, lr: float, beta1: float,
              beta2: float, eps: float, t: int) -> None:
    """One Adam update in place; gradients are zeroed afterwards."""
    if t < 1:
        raise ContractError("adam step counter starts at 1")
    for p in params:
        if p.trainable:
            g = p.grad
            dt = p.data.dtype.type
            m[p.name] = dt(beta1) * m[p.name] + dt(1 - beta1) * g
            v[p.name] = dt(beta2) * v[p.name] + dt(1 - beta2) * g * g
            mhat = m[p.name] / dt(1 - beta1 ** t)
            vhat = v[p.name] / dt(1 - beta2 ** t)
            p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        p.zero_grad()


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple] | None = None
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5,
               corrupt: Callable[[Parameter], None] | None = None,
               max_per_param: int | None = None, rng=None) -> GradCheckResult:
    """Compare backprop gradients with central differences coordinate by coordinate.

    ``f`` must rebuild the computation from scratch on each call and be
    deterministic.  Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.  ``corrupt`` is a test hook that may tamper with gradients
    after backprop.  With ``max_per_param`` only that many randomly chosen
    coordinates of each larger parameter are perturbed.
    """
    params = list(params)
    for p in params:
        # perturbation writes through a flat view, so data must be a C-ordered array
        if not (isinstance(p.data, np.ndarray) and p.data.flags.c_contiguous):
            p.data = np.array(p.data, order="C")
        p.zero_grad()
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f must return a finite scalar")
    out.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    if corrupt is not None:
        for p in params:
            corrupt(p)
            analytic[p.name] = p.grad.copy()

    def value() -> float:
        r = f().data
        if not np.isfinite(r).all():
            raise NonFiniteError("grad_check: f returned a non-finite value")
        return float(r)

    result = GradCheckResult(0.0)
    for p in params:
        flat = p.data.reshape(-1)
        worst_p = 0.0
        coords = range(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            pick = (rng if rng is not None else np.random.default_rng(0)).choice(
                flat.size, max_per_param, replace=False)
            coords = sorted(int(k) for k in pick)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = value()
            flat[k] = orig - h
            fm = value()
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[p.name].reshape(-1)[k])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst_p:
                worst_p = err
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (p.name, np.unravel_index(k, p.shape))
        result.per_param[p.name] = worst_p
        p.zero_grad()
    return result
