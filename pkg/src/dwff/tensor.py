"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input is tracked.  Outside a tape nothing is recorded, which keeps
plain forward evaluation (finite differences, inference) cheap.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "GradCheckError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "log",
    "exp",
    "power",
    "clip",
    "matmul",
    "conv1x1",
    "reduce",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "weighted_sum",
    "sum_squares",
    "softmax",
    "softmax_temperature",
    "elementwise",
    "grad_check",
]


class Tensor:
    """Immutable-shape float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def flat(self) -> list[float]:
        """Row-major values as a plain list."""
        return self.data.reshape(-1).tolist()

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

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


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def recording() -> bool:
    """True inside an active :class:`GradTape`."""
    return _active_tape() is not None


class GradTape:
    """Ordered record of differentiable operations.

    Usage::

        with GradTape() as tape:
            y = f(x)
        (dx,) = tape.gradient(y, [x])
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))
        self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._records)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray | None]:
        """Gradients of a scalar ``target`` w.r.t. ``sources``.

        Untracked sources get ``None``; tracked sources that the target does
        not depend on get zeros.
        """
        if target.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not self.is_tracked(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        result: list[np.ndarray | None] = []
        for src in sources:
            if not self.is_tracked(src):
                result.append(None)
            else:
                result.append(grads.get(id(src), np.zeros_like(src.data)))
        return result


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    tape = _active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape or b.data.ndim == 0:
        return a.data.shape
    if a.data.ndim == 0:
        return b.data.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out is None or out not in (a.shape, b.shape):
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    if p == 0.0:
        return _emit(out, (a,), lambda g: (np.zeros_like(g),))
    return _emit(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    inside = (a.data > lo) & (a.data < hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "log": log, "exp": exp, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a real ``b``."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _emit(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel linear map: ``out[b,o,h,w] = sum_c w[o,c] * x[b,c,h,w]``."""
    if x.ndim != 4 or w.ndim != 2:
        raise ValueError(f"conv1x1 expects B x C x H x W and O x C, got {x.shape} and {w.shape}")
    b, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    xf = x.data.reshape(b, c, h * wd)
    out = np.matmul(w.data, xf).reshape(b, w.shape[0], h, wd)

    def backward(g):
        gf = g.reshape(b, w.shape[0], h * wd)
        dx = np.matmul(w.data.T, gf).reshape(x.shape)
        dw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)
        return dx, dw

    return _emit(out, (x, w), backward)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        g = np.broadcast_to(g.reshape(kept), a.shape)
        return ((g / count) if kind == "mean" else g.copy(),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), backward)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ValueError(f"invalid permutation {perm} for ndim {a.ndim}")
    inv = tuple(np.argsort(perm))
    return _emit(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    axis = _norm_axes(axis, parts[0].ndim)[0]
    sizes = [p.shape[axis] for p in parts]
    edges = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def weighted_sum(parts: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``out[b] = sum_i weights[b, i] * parts[i][b]`` for equally shaped ``parts``."""
    parts = tuple(parts)
    shape = parts[0].shape
    if weights.ndim != 2 or weights.shape != (shape[0], len(parts)):
        raise ValueError(f"weights shape {weights.shape} does not match {len(parts)} parts of batch {shape[0]}")
    for p in parts:
        if p.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {p.shape}")
    bcast = (shape[0],) + (1,) * (len(shape) - 1)
    w = weights.data
    out = w[:, 0].reshape(bcast) * parts[0].data
    for i in range(1, len(parts)):
        out += w[:, i].reshape(bcast) * parts[i].data
    red = tuple(range(1, len(shape)))

    def backward(g):
        dparts = tuple(w[:, i].reshape(bcast) * g for i in range(len(parts)))
        dw = np.stack([(g * p.data).sum(axis=red) for p in parts], axis=1)
        return dparts + (dw,)

    return _emit(out, parts + (weights,), backward)


def sum_squares(parts: Sequence[Tensor]) -> Tensor:
    """Scalar sum of squared entries over all ``parts``."""
    parts = tuple(parts)
    out = np.asarray(float(np.sum([np.vdot(p.data, p.data) for p in parts])) if parts else 0.0)
    return _emit(out, parts, lambda g: tuple(2.0 * g * p.data for p in parts))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), backward)


def softmax_temperature(scores: Tensor, temp, axis: int = -1) -> Tensor:
    """softmax(scores / temp) along ``axis``; ``temp`` is a positive real or scalar Tensor."""
    t = _as_tensor(temp)
    if t.size != 1:
        raise ValueError(f"temperature must be scalar, got shape {t.shape}")
    if not float(t.data.reshape(-1)[0]) > 0.0:
        raise ValueError(f"temperature must be positive, got {float(t.data.reshape(-1)[0])}")
    if not np.all(np.isfinite(scores.data)):
        raise ValueError("scores must be finite")
    if t.ndim:
        t = reshape(t, ())
    return softmax(div(scores, t), axis=axis)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class GradCheckError(RuntimeError):
    """f evaluated to a non-finite value during a perturbation."""

    def __init__(self, param_index: int, coord: int, value: float):
        super().__init__(f"non-finite value {value} perturbing parameter {param_index} at flat index {coord}")
        self.param_index = param_index
        self.coord = coord


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max of |analytic - central difference| / max(1, |central difference|).

    ``f`` is a closure over ``params`` returning a scalar Tensor.  Parameter
    arrays are perturbed in place and restored.
    """
    params = list(params)
    with GradTape() as tape:
        y = f()
    analytic = tape.gradient(y, params)
    worst = 0.0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        if ga is None:
            raise ValueError(f"parameter {pi} is not tracked")
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(pi, j, fp if not math.isfinite(fp) else fm)
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[j] - num) / max(1.0, abs(num))
            if err > worst:
                worst = err
    return worst
