"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive used by the model lives here.  Tensors wrap a
numpy array; operations record their parents and a closure that pushes the
output gradient back into them.  Leading axes are treated as batch axes by
every primitive, so a whole minibatch of (episode x hypothesis) pipelines is
one graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_ORACLE_DTYPE = np.longdouble


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype used for tensors built from non-float data."""
    global _DEFAULT_DTYPE
    old, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.array(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are no longer needed once propagated
                node.grad = None if node._parents else node.grad

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return swap_last(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False):
    """Add ``g`` into ``t.grad``.  ``owned`` means g is a fresh array nobody else holds."""
    if not t.requires_grad:
        return
    reduced = _unbroadcast(g, t.shape)
    if t.grad is None:
        if (owned or reduced is not g) and reduced.dtype == t.data.dtype and reduced.flags.writeable:
            t.grad = reduced
        else:
            t.grad = np.array(reduced, dtype=t.data.dtype)
    else:
        t.grad += reduced


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data, owned=True)
        if b.requires_grad:
            _accumulate(b, g * a.data, owned=True)

    return _make(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: _accumulate(x, g * (out > 0), owned=True))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: _accumulate(x, g * out * (1 - out), owned=True))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data, owned=True))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: _accumulate(x, g * inside, owned=True))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout.  Identity outside training; ``mask`` pins the kept set."""
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= p
    scale = (mask / (1.0 - p)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: _accumulate(x, g * scale, owned=True))


# ---------------------------------------------------------------------------
# shape and linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # a plain weight matrix: fold every leading axis into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                _accumulate(b, a2.T @ g2, owned=True)

        return _make(out, (a, b), backward)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2), owned=True)
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g, owned=True)

    return _make(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: _accumulate(x, np.transpose(g, inverse)))


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: _accumulate(x, np.swapaxes(g, -1, -2)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: _accumulate(x, g))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    shapes = [t.shape for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [s[ax] for s in shapes])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (view) indexing; the gradient is scattered back into place."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accumulate(x, full, owned=True)

    return _make(x.data[idx], (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, full, owned=True)

    return _make(table.data[ids], (table,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# normalisation, attention and pooling primitives
# ---------------------------------------------------------------------------

def _check_rows(mask: np.ndarray, axis: int, what: str):
    empty = ~mask.any(axis=axis)
    if empty.any():
        row = tuple(int(i) for i in np.argwhere(empty)[0])
        row = row[0] if len(row) == 1 else row
        raise ValueError(f"{what}: row {row} has no valid positions")


def masked_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked entries (mask False) come out exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        _check_rows(mask, axis, "masked_softmax")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)), owned=True)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True), owned=True)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, g * xhat, owned=True)
        if beta.requires_grad:
            _accumulate(beta, g)
        if x.requires_grad:
            gy = g * gamma.data
            gx = rstd * (gy - gy.mean(axis=-1, keepdims=True)
                         - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx, owned=True)

    return _make(out, (x, gamma, beta), backward)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 'same' 1-D convolution over axis -2.

    x is (..., T, d_in), kernel (k, d_in, d_out), bias (d_out,).  Tap j reads
    position t + j - (k-1)/2.
    """
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel width, got {k}")
    if x.shape[-1] != d_in:
        raise ValueError(f"conv1d_same: input width {x.shape[-1]} != kernel d_in {d_in}")
    T = x.shape[-2]
    half = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    cols = np.concatenate([xp[..., j:j + T, :] for j in range(k)], axis=-1)
    cols2 = cols.reshape(-1, k * d_in)
    w2 = kernel.data.reshape(k * d_in, d_out)
    out = (cols2 @ w2).reshape(x.shape[:-1] + (d_out,)) + bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if kernel.requires_grad:
            _accumulate(kernel, (cols2.T @ g2).reshape(kernel.shape), owned=True)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0), owned=True)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(x.shape[:-1] + (k, d_in))
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for j in range(k):
                gxp[..., j:j + T, :] += gcols[..., j, :]
            _accumulate(x, np.ascontiguousarray(gxp[..., half:half + T, :]), owned=True)

    return _make(out, (x, kernel, bias), backward)


def maxpool_over_axis(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max over ``axis`` ignoring masked positions; ties go to the lowest index."""
    ax = axis % x.ndim
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        _check_rows(mask, ax, "maxpool_over_axis")
        z = np.where(mask, z, -np.inf)
    arg = np.expand_dims(np.argmax(z, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax).squeeze(ax)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        _accumulate(x, full, owned=True)

    return _make(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    # a single vector goes through as a one-row matrix
    y = reshape(matmul(reshape(x, (1, -1)), w), (-1,)) if x.ndim == 1 else matmul(x, w)
    return y if b is None else y + b


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype or _DEFAULT_DTYPE)


class Dense:
    """Affine map ``x @ w + b`` with glorot-uniform weights and zero bias."""

    def __init__(self, w: Tensor, b: Tensor):
        self.w, self.b = w, b

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int):
        return cls(Tensor(glorot(rng, (d_in, d_out), d_in, d_out), True),
                   Tensor(np.zeros(d_out, dtype=_DEFAULT_DTYPE), True))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GradCheckError(RuntimeError):
    pass


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               epsilon: float = 1e-5, precision: int = 64, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> dict:
    """Compare backprop gradients with central differences.

    The analytic gradient is computed with every parameter cast to
    ``precision`` bits.  The finite-difference oracle runs in the widest float
    numpy offers (``np.longdouble``, 80-bit on x86) so that its own rounding
    stays far below the tolerances being checked.  The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    ``sqrt(machine eps)`` of the analytic precision times the largest analytic
    gradient entry, so structurally zero gradients are not judged on rounding
    noise alone.  ``fn`` must build its graph from the parameters' dtype.
    Returns ``max_rel_err`` plus the worst offending ``(name, index)``.
    """
    return grad_check_multi(fn, params, epsilon, (precision,), max_entries, rng)[precision]


def grad_check_multi(fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
                     epsilon: float = 1e-5, precisions=(32, 64), max_entries: int | None = None,
                     rng: np.random.Generator | None = None) -> dict[int, dict]:
    """``grad_check`` at several precisions sharing one finite-difference pass."""
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError(f"epsilon {epsilon} outside [1e-5, 1e-2]")
    for prec in precisions:
        if prec not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {prec}")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    originals = {k: p.data.copy() for k, p in params.items()}
    try:
        analytic = {prec: _analytic_grads(fn, params, originals, prec) for prec in precisions}
        numeric = _numeric_grads(fn, params, originals, epsilon, max_entries, rng)
    finally:
        for k, p in params.items():
            p.data = originals[k]
            p.grad = None
    results = {}
    for prec, grads in analytic.items():
        dtype = np.float32 if prec == 32 else np.float64
        # entries far below the gradient scale carry only rounding noise from the analytic pass
        scale = max((float(np.abs(g).max()) for g in grads.values() if g.size), default=0.0)
        floor = max(1e-8, float(np.sqrt(np.finfo(dtype).eps)) * scale)
        worst, where, per_param = 0.0, None, {}
        for k, (idx, num) in numeric.items():
            ana = grads[k].reshape(-1)[idx]
            err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
            per_param[k] = float(err.max()) if err.size else 0.0
            if err.size and per_param[k] > worst:
                worst, where = per_param[k], (k, int(idx[int(err.argmax())]))
        results[prec] = {"max_rel_err": worst, "worst": where, "per_param": per_param}
    return results


def _analytic_grads(fn, params, originals, precision: int) -> dict[str, np.ndarray]:
    dtype = np.float32 if precision == 32 else np.float64
    for k, p in params.items():
        p.data = originals[k].astype(dtype)
        p.grad = None
    with using_dtype(dtype):
        loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError("loss is not finite")
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64)
            for k, p in params.items()}


def _numeric_grads(fn, params, originals, epsilon, max_entries, rng) -> dict:
    for k, p in params.items():
        p.data = originals[k].astype(_ORACLE_DTYPE)
        p.grad = None

    def value():
        with no_grad(), using_dtype(_ORACLE_DTYPE):
            val = _ORACLE_DTYPE(fn().data)
        if not np.isfinite(val):
            raise GradCheckError("loss is not finite under perturbation")
        return val

    out = {}
    for k, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            saved = flat[i]
            flat[i] = saved + epsilon
            up = value()
            flat[i] = saved - epsilon
            down = value()
            flat[i] = saved
            num[j] = float((up - down) / (2 * _ORACLE_DTYPE(epsilon)))
        out[k] = (idx, num)
    return out

