"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded only while a :class:`Tape` is active (``with Tape() as tape``)
and at least one input requires a gradient. Everything else evaluates eagerly
as plain numpy math, which is how inference paths stay cheap.

Example::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = gc.sum(gc.mul(x, x))
    tape.backward(y)
    x.grad  # array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "backward",
    "set_strict_math",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1d",
    "relu",
    "tanh",
    "exp",
    "abs",
    "sqrt",
    "sum",
    "mean",
    "reshape",
    "concat",
    "take",
    "roll",
    "tile",
    "stat_pool",
    "norm",
    "cosine_similarity",
    "cross_entropy",
    "finite_diff_check",
    "FiniteDiffReport",
]

_STATE = threading.local()
_STRICT_MATH = True


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (reuse without reset, bad root)."""


def set_strict_math(strict: bool) -> None:
    """Division by zero raises when strict (default); otherwise IEEE inf/nan."""
    global _STRICT_MATH
    _STRICT_MATH = bool(strict)


class Tensor:
    """Dense real array optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: Callable  # (grad_out, needs) -> tuple of input grads (or None)


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed backward exactly once; call :meth:`reset` before
    recording a new graph on the same object.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before recording again")
        node.out._tape = self
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []
        self.consumed = False

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1 or root.data.ndim > 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise TapeError("root was not recorded on this tape")
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before a second backward")
        if not self.nodes:
            raise TapeError("tape is empty")
        self.consumed = True

        root.grad = _accum(root.grad, np.ones_like(root.data))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            needs = tuple(isinstance(t, Tensor) and t.requires_grad for t in node.inputs)
            grads = node.backward_fn(g, needs)
            for t, need, gi in zip(node.inputs, needs, grads):
                if need and gi is not None:
                    t.grad = _accum(t.grad, gi)
        # out -> tape -> node -> out is a cycle that would pin every activation
        # until the cyclic collector happens to run
        for node in self.nodes:
            if node.out is not root:
                node.out._tape = None
        self.nodes = []


def backward(root: Tensor) -> None:
    """Replay the tape that produced ``root``."""
    if root._tape is None:
        raise TapeError("root is not attached to a tape (was it computed inside `with Tape()`?)")
    root._tape.backward(root)


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _accum(existing: Optional[np.ndarray], g: np.ndarray) -> np.ndarray:
    if existing is None:
        return np.array(g, dtype=np.float64, copy=True)
    return existing + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=False)
    stack = _tape_stack()
    if requires and stack:
        out.requires_grad = True
        stack[-1].record(_Node(out, tuple(inputs), backward_fn))
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# elementwise binary -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    out = a.data + b.data

    def bw(g, needs):
        return (_reduce_to(g, a) if needs[0] else None, _reduce_to(g, b) if needs[1] else None)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    out = a.data - b.data

    def bw(g, needs):
        return (_reduce_to(g, a) if needs[0] else None, _reduce_to(-g, b) if needs[1] else None)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def bw(g, needs):
        ga = _reduce_to(g * b.data, a) if needs[0] else None
        gb = _reduce_to(g * a.data, b) if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    if _STRICT_MATH and np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero in divisor (strict_math is on)")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g, needs):
        ga = _reduce_to(g / b.data, a) if needs[0] else None
        gb = _reduce_to(-g * a.data / (b.data * b.data), b) if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (-g,))


# linear algebra ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    out = a.data @ b.data

    def bw(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw)


def _frames(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    c, t = x.shape
    t_out = (t - k) // stride + 1
    s0, s1 = x.strides
    return as_strided(x, shape=(c, k, t_out), strides=(s0, s1, s1 * stride), writeable=False)


def conv1d(signal, kernels, stride: int = 1, bias=None) -> Tensor:
    """Valid cross-correlation of a [C_in, T] signal with [C_out, C_in, K] kernels.

    ``bias`` (shape [C_out]) is added per output channel when given.
    """
    x, w = _as_tensor(signal), _as_tensor(kernels)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d expects signal [C_in, T] and kernels [C_out, C_in, K], got {x.shape}, {w.shape}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv1d: stride must be a positive int, got {stride}")
    c_in, t = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d: channel mismatch, signal has {c_in}, kernels expect {c_in_w}")
    if t < k:
        raise ValueError(f"conv1d: signal length {t} shorter than kernel {k}")
    xd = np.ascontiguousarray(x.data)
    cols = _frames(xd, k, stride).reshape(c_in * k, -1)
    w2 = w.data.reshape(c_out, c_in * k)
    out = w2 @ cols
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
        out += bias.data[:, None]
        inputs.append(bias)
    t_out = out.shape[1]

    def bw(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gcols = (w2.T @ g).reshape(c_in, k, t_out)
            gx = np.zeros_like(xd)
            stop = stride * (t_out - 1) + 1
            for j in range(k):
                gx[:, j:j + stop:stride] += gcols[:, j, :]
        if needs[1]:
            gw = (g @ cols.T).reshape(c_out, c_in, k)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=1)
        return (gx, gw, gb)[: len(needs)]

    return _make(out, inputs, bw)


# elementwise unary ------------------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, needs: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    # np.sign gives 0 at 0: the chosen subgradient
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g, needs: (g * sgn,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    if _STRICT_MATH and a.requires_grad and np.any(out == 0.0):
        raise ZeroDivisionError("sqrt: derivative undefined at 0 (strict_math is on)")

    def bw(g, needs):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (a,), bw)


# reductions and shape ops -----------------------------------------------------------


def _check_axis(a: Tensor, axis) -> None:
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ValueError(f"axis {axis} out of range for rank {a.data.ndim}")


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    _check_axis(a, axis)
    out = np.sum(a.data, axis=axis)

    def bw(g, needs):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    s = sum(a, axis)
    return div(s, float(n)) if s.requires_grad else Tensor(s.data / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g, needs: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if need:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                parts.append(g[tuple(sl)])
            else:
                parts.append(None)
        return tuple(parts)

    return _make(out, ts, bw)


def take(a, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` along the last axis."""
    a = _as_tensor(a)
    out = a.data[..., start:stop]

    def bw(g, needs):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _make(out.copy(), (a,), bw)


def roll(a, shift: int) -> Tensor:
    """Cyclic shift along the last axis (``np.roll`` semantics)."""
    a = _as_tensor(a)
    return _make(np.roll(a.data, shift, axis=-1), (a,), lambda g, needs: (np.roll(g, -shift, axis=-1),))


def tile(a, n: int, offset: int = 0) -> Tensor:
    """Cyclically repeat a 1-D tensor to length ``n``: out[i] = a[(i + offset) mod l]."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.data.size < 1:
        raise ValueError(f"tile expects a nonempty 1-D tensor, got shape {a.shape}")
    if n < 1:
        raise ValueError(f"tile length must be >= 1, got {n}")
    l = a.data.size
    idx = (np.arange(n) + offset) % l
    out = a.data[idx]

    def bw(g, needs):
        return (np.bincount(idx, weights=g, minlength=l),)

    return _make(out, (a,), bw)


def stat_pool(h) -> Tensor:
    """Concatenate per-channel temporal mean and standard deviation of [C, T]."""
    h = _as_tensor(h)
    if h.data.ndim != 2:
        raise ValueError(f"stat_pool expects [C, T], got {h.shape}")
    c, t = h.shape
    mu = h.data.mean(axis=1)
    centered = h.data - mu[:, None]
    var = (centered * centered).mean(axis=1)
    sd = np.sqrt(var + 1e-10)
    out = np.concatenate([mu, sd])

    def bw(g, needs):
        g_mu, g_sd = g[:c], g[c:]
        gh = (g_mu / t)[:, None] + (g_sd / (sd * t))[:, None] * centered
        return (gh,)

    return _make(out, (h,), bw)


def norm(a) -> Tensor:
    """Euclidean norm of all elements; subgradient 0 at the origin."""
    a = _as_tensor(a)
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g, needs):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _make(np.asarray(n), (a,), bw)


def cosine_similarity(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 1:
        raise ValueError(f"cosine_similarity expects equal 1-D shapes, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm input (degenerate embedding)")
    c = float(a.data @ b.data) / (na * nb)

    def bw(g, needs):
        ga = g * (b.data / (na * nb) - c * a.data / (na * na)) if needs[0] else None
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb)) if needs[1] else None
        return ga, gb

    return _make(np.asarray(c), (a, b), bw)


def cross_entropy(logits, label: int) -> Tensor:
    """Softmax cross-entropy of a 1-D logit vector against an integer class."""
    z = _as_tensor(logits)
    if z.data.ndim != 1:
        raise ValueError(f"cross_entropy expects 1-D logits, got {z.shape}")
    m = z.data.max()
    lse = m + np.log(np.exp(z.data - m).sum())
    out = lse - z.data[label]
    p = np.exp(z.data - lse)

    def bw(g, needs):
        gz = p.copy()
        gz[label] -= 1.0
        return (g * gz,)

    return _make(np.asarray(out), (z,), bw)


# finite-difference oracle -----------------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    passed: bool
    rel_tol: float
    analytic: np.ndarray
    numeric: np.ndarray
    nonsmooth: list

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        extra = f", {len(self.nonsmooth)} non-smooth coords skipped" if self.nonsmooth else ""
        return f"finite-diff {status}: max rel err {self.max_rel_error:.3e} (tol {self.rel_tol:g}){extra}"


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, rel_tol: float = 1e-4,
                      coords: Optional[Sequence[int]] = None) -> FiniteDiffReport:
    """Compare tape gradients of scalar ``fn`` at ``point`` against central differences.

    Step is 1e-5 * max(1, |x_i|). Coordinates where one-sided slopes disagree
    and keep disagreeing as the step shrinks are reported as non-smooth and
    excluded from the verdict. ``coords`` restricts probing to a subset of
    flat indices (all by default).
    """
    x0 = np.array(_as_tensor(point).data, dtype=np.float64, copy=True)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(leaf)
    if y.data.size != 1:
        raise ValueError("finite_diff_check: fn must be scalar-valued")
    if y.requires_grad:
        tape.backward(y)
    analytic_full = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    analytic_full = analytic_full.reshape(-1)

    def f_at(flat: np.ndarray) -> float:
        return float(fn(Tensor(flat.reshape(x0.shape))).data.reshape(()))

    flat0 = x0.reshape(-1)
    idx = np.arange(flat0.size) if coords is None else np.asarray(list(coords), dtype=int)
    f0 = f_at(flat0)
    numeric = np.empty(idx.size)
    analytic = analytic_full[idx]
    onesided_gap = np.empty(idx.size)
    steps = np.empty(idx.size)
    for j, i in enumerate(idx):
        h = 1e-5 * max(1.0, float(np.abs(flat0[i])))
        xp = flat0.copy()
        xp[i] += h
        xm = flat0.copy()
        xm[i] -= h
        fp, fm = f_at(xp), f_at(xm)
        numeric[j] = (fp - fm) / (2 * h)
        onesided_gap[j] = np.abs((fp - f0) / h - (f0 - fm) / h)
        steps[j] = h

    scale = max(1.0, float(np.max(np.abs(analytic)))) if analytic.size else 1.0
    floor = 1e-6 * scale
    nonsmooth = []
    for j, i in enumerate(idx):
        if onesided_gap[j] <= 1e-6 * scale:
            continue
        # a kink keeps its slope jump under step refinement; curvature shrinks with h
        h = steps[j] / 10
        xp = flat0.copy()
        xp[i] += h
        xm = flat0.copy()
        xm[i] -= h
        gap_small = np.abs((f_at(xp) - f0) / h - (f0 - f_at(xm)) / h)
        if gap_small > 0.5 * onesided_gap[j]:
            nonsmooth.append(int(i))

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    keep = np.array([int(i) not in set(nonsmooth) for i in idx], dtype=bool)
    max_rel = float(rel[keep].max()) if keep.any() else 0.0
    return FiniteDiffReport(max_rel, max_rel < rel_tol, rel_tol, analytic, numeric, nonsmooth)
