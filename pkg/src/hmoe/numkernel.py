"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a :class:`Tape` is active (``with Tape()
as tape:``) every operation that touches a gradient-carrying input is
recorded; ``tape.backward(loss)`` replays the record in reverse and
accumulates gradients into the inputs. Without an active tape the same
functions just compute values, which is what finite-difference probes and
evaluation use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

try:
    from numba import njit
except ImportError:  # pragma: no cover - numpy fallback below
    njit = None

if njit is not None:

    @njit(cache=True)
    def _gelu_arg_kernel(x, u):
        for i in range(x.size):
            xi = x[i]
            u[i] = _GELU_C * xi * (1.0 + _GELU_A * xi * xi)

    @njit(cache=True)
    def _gelu_out_kernel(x, t, out):
        for i in range(x.size):
            out[i] = 0.5 * x[i] * (1.0 + t[i])

    @njit(cache=True)
    def _gelu_bwd_kernel(x, t, g, out):
        for i in range(x.size):
            xi = x[i]
            ti = t[i]
            dt = (1.0 - ti * ti) * _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
            out[i] = g[i] * (0.5 * (1.0 + ti) + 0.5 * xi * dt)

_local = threading.local()


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar; everything routes through the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named trainable tensor whose gradient persists across tapes."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass.

    ``backward`` may run once; call :meth:`reset` to clear intermediate
    gradients before replaying again.
    """

    def __init__(self, check_finite: bool = True):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._replayed = False
        self.check_finite = check_finite

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._ops.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | float = 1.0) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed; call reset() first")
        if not loss.requires_grad:
            raise RuntimeError("loss does not depend on any parameter")
        self._replayed = True
        loss.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), loss.shape).copy()
        for out, inputs, backward in reversed(self._ops):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # Fresh arrays are adopted; views and shared buffers are copied.
                    fresh = gi is not g and gi.flags.owndata and gi.flags.writeable
                    inp.grad = gi if fresh else np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad += gi

    def reset(self) -> None:
        """Drop intermediate gradients so the tape can be replayed again."""
        for out, _, _ in self._ops:
            out.grad = None
        self._replayed = False


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and tape.check_finite and not np.isfinite(data).all():
        raise NumericError("non-finite value produced in forward pass")
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _segment_sum(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Rows of ``values`` summed into ``n_rows`` buckets by ``index``, in input order."""
    out = np.zeros((n_rows,) + values.shape[1:])
    if index.size == 0:
        return out
    index = np.where(index < 0, index + n_rows, index)
    if (index[1:] > index[:-1]).all():
        # strictly increasing: no collisions, plain assignment suffices
        out[index] = values
        return out
    order = np.argsort(index, kind="stable")
    srt = index[order]
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    out[srt[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one 2-D product; BLAS handles that faster than a batch
        lead = ad.shape[:-1]
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(lead + (bd.shape[-1],))
    else:
        out = ad @ bd

    def backward(g):
        if a.requires_grad and bd.ndim == 2:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


# --- reductions and normalisers ----------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return mul(sum(x, axis), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax received non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return _result(out, (x,), backward)


# --- elementwise activations -------------------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    if njit is not None:
        xd = np.ascontiguousarray(xd)
        out = np.empty(xd.shape)
        t = np.empty(xd.shape)
        # tanh stays in numpy, whose SIMD tanh beats a scalar loop by a wide margin
        _gelu_arg_kernel(xd.reshape(-1), t.reshape(-1))
        np.tanh(t, out=t)
        _gelu_out_kernel(xd.reshape(-1), t.reshape(-1), out.reshape(-1))

        def backward(g):
            d = np.empty(xd.shape)
            _gelu_bwd_kernel(xd.reshape(-1), t.reshape(-1), np.ascontiguousarray(g).reshape(-1), d.reshape(-1))
            return (d,)

        return _result(out, (x,), backward)

    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(out, (x,), backward)


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return {"gelu": gelu, "relu": relu}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# --- indexing ----------------------------------------------------------------


def gather(x, index) -> Tensor:
    """Rows ``x[index]`` along axis 0; doubles as embedding lookup."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError("gather index out of range")
    shape = x.shape

    def backward(g):
        flat = index.reshape(-1)
        return (_segment_sum(flat, g.reshape((flat.size,) + shape[1:]), shape[0]),)

    return _result(x.data[index], (x,), backward)


embedding = gather


def take(x, rows, cols) -> Tensor:
    """Elements ``x[rows, cols]`` of a 2-D tensor."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if x.data.ndim != 2:
        raise DimensionError("take expects a 2-D tensor")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _result(x.data[rows, cols], (x,), backward)


def scatter_rows(values, index, n_rows: int) -> Tensor:
    """Sum rows of ``values`` into a zero tensor of ``n_rows`` rows at ``index``."""
    values = _as_tensor(values)
    index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != values.shape[0]:
        raise DimensionError("scatter_rows index/value length mismatch")
    out = _segment_sum(index, values.data, n_rows)
    return _result(out, (values,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# --- attention ---------------------------------------------------------------


def attention(q, k, v, causal: bool = False) -> Tensor:
    """Single-head scaled dot-product attention over batched ``[B, L, d]`` inputs.

    ``causal`` masks keys after each query position (self-attention).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if (
        q.data.ndim != 3
        or k.data.ndim != 3
        or v.data.ndim != 3
        or q.shape[-1] != k.shape[-1]
        or q.shape[0] != k.shape[0]
        or k.shape[:2] != v.shape[:2]
    ):
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    s = (qd @ np.swapaxes(kd, 1, 2)) * scale
    if causal:
        if qd.shape[1] != kd.shape[1]:
            raise DimensionError("causal attention needs equal query and key lengths")
        s = np.where(np.triu(np.ones(s.shape[1:], dtype=bool), k=1), -np.inf, s)
    s -= s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ vd

    def backward(g):
        gw = g @ np.swapaxes(vd, 1, 2)
        gv = np.swapaxes(w, 1, 2) @ g
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, 1, 2) @ qd
        return gq, gk, gv

    return _result(out, (q, k, v), backward)


# --- losses ------------------------------------------------------------------


def cross_entropy(logits, targets) -> Tensor:
    """Mean token negative log-likelihood of ``targets`` under ``logits[T, V]``."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp).ravel()
    if logits.data.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy logits {logits.shape} vs {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("target index outside vocabulary")
    picked = take(logits, np.arange(targets.size), targets)
    return mean(add(logsumexp(logits, axis=-1), mul(picked, -1.0)))


# --- verification ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    skipped: list[tuple[str, int]] = field(default_factory=list)
    worst: tuple[str, int] | None = None
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and not self.failures


def _evaluate(f: Callable) -> tuple[float, object]:
    res = f()
    loss, signature = res if isinstance(res, tuple) else (res, None)
    value = loss.item() if isinstance(loss, Tensor) else float(loss)
    if not math.isfinite(value):
        raise NumericError("loss is not finite")
    return value, signature


def finite_diff_check(
    f: Callable,
    params: Iterable[Param],
    eps: float = 1e-5,
    tolerance: float = 1e-5,
    abs_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f()`` returns the scalar loss, optionally paired with a hashable
    signature of every discrete routing decision. A coordinate whose ±eps
    probes change the signature is skipped rather than judged. The relative
    error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        res = f()
    loss, base_sig = res if isinstance(res, tuple) else (res, None)
    if not math.isfinite(loss.item()):
        raise NumericError("loss is not finite")
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(max_rel_error=0.0, n_checked=0, tolerance=tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, sp = _evaluate(f)
            flat[i] = orig - eps
            lm, sm = _evaluate(f)
            flat[i] = orig
            if sp != base_sig or sm != base_sig:
                report.skipped.append((p.name, i))
                continue
            num = (lp - lm) / (2 * eps)
            a = analytic[p.name].reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), abs_floor)
            report.n_checked += 1
            if report.worst is None or rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (p.name, i)
            if not rel < tolerance:
                report.failures.append((p.name, i, rel))
    return report
