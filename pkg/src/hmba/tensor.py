"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op produces a tensor that remembers its parents and a
vector-Jacobian closure. Tensors carry a monotonically increasing creation
id, so creation order is a topological order of the compute graph and the
backward pass can walk reachable nodes exactly once, newest first.

Conventions:
  * all data is float64; inputs are coerced and results checked for NaN/Inf
    at construction (a non-finite result raises NonFiniteError);
  * broadcasting follows the numpy trailing-dimension rule;
  * sequences are time-major, shape (T, ..., features), so any axes between
    the first and the last act as batch dimensions.

Multiply-add accounting: inside a `count_multiply_adds()` block each
primitive tallies its scalar work (matmul m*k*n per batch item, elementwise
and transcendental ops one unit per output element, reductions one unit per
input element, pure data movement zero). The analytic cost model mirrors
these conventions.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "ShapeMismatchError", "NonFiniteError", "GradError",
    "no_grad", "count_multiply_adds", "concat", "stack", "matmul",
    "phi1", "softmax", "log_softmax", "rms_norm", "backward",
    "finite_diff_check", "elementwise",
]


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class NonFiniteError(ArithmeticError):
    """A stored value would be NaN or +/-Inf."""


class GradError(RuntimeError):
    """Backward called on an unsuitable value (e.g. non-scalar loss)."""


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; ops inside produce leaf tensors."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MultiplyAddCounter:
    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0


@contextmanager
def count_multiply_adds():
    """Yield a counter accumulating scalar multiply-adds of enclosed ops."""
    counter = MultiplyAddCounter()
    prev = getattr(_state, "ma_counter", None)
    _state.ma_counter = counter
    try:
        yield counter
    finally:
        _state.ma_counter = prev


def _tally(n: int) -> None:
    counter = getattr(_state, "ma_counter", None)
    if counter is not None:
        counter.total += int(n)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor holds NaN or Inf values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._seq = next(_seq)

    # -- construction -----------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _as_array(data)
        out.grad = None
        out._seq = next(_seq)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basics -----------------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _broadcast_op(np.add, self, other)
        return Tensor._op(out, (self, other), lambda g: (
            (self, _unbroadcast(g, self.shape)),
            (other, _unbroadcast(g, other.shape)),
        ))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        out = _broadcast_op(np.subtract, self, other)
        return Tensor._op(out, (self, other), lambda g: (
            (self, _unbroadcast(g, self.shape)),
            (other, _unbroadcast(-g, other.shape)),
        ))

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other)
        out = _broadcast_op(np.multiply, self, other)
        a_data, b_data = self.data, other.data
        return Tensor._op(out, (self, other), lambda g: (
            (self, _unbroadcast(g * b_data, self.shape)),
            (other, _unbroadcast(g * a_data, other.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = _broadcast_op(np.divide, self, other)
        a_data, b_data = self.data, other.data
        return Tensor._op(out, (self, other), lambda g: (
            (self, _unbroadcast(g / b_data, self.shape)),
            (other, _unbroadcast(-g * a_data / (b_data * b_data), other.shape)),
        ))

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __neg__(self):
        _tally(self.size)
        return Tensor._op(-self.data, (self,), lambda g: ((self, -g),))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    # -- transcendental ---------------------------------------------------

    def exp(self) -> "Tensor":
        _tally(self.size)
        out_data = np.exp(self.data)
        return Tensor._op(out_data, (self,), lambda g: ((self, g * out_data),))

    def log(self) -> "Tensor":
        _tally(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(self.data)
        src = self.data
        return Tensor._op(out_data, (self,), lambda g: ((self, g / src),))

    def sigmoid(self) -> "Tensor":
        _tally(self.size)
        out_data = _sigmoid(self.data)
        return Tensor._op(out_data, (self,),
                          lambda g: ((self, g * out_data * (1.0 - out_data)),))

    def softplus(self) -> "Tensor":
        # log(1 + exp(x)) via logaddexp, overflow-safe for large |x|
        _tally(self.size)
        out_data = np.logaddexp(0.0, self.data)
        src = self.data
        return Tensor._op(out_data, (self,),
                          lambda g: ((self, g * _sigmoid(src)),))

    def silu(self) -> "Tensor":
        _tally(self.size)
        sig = _sigmoid(self.data)
        src = self.data
        return Tensor._op(src * sig, (self,),
                          lambda g: ((self, g * sig * (1.0 + src * (1.0 - sig))),))

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        _tally(self.size)
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            # read-only broadcast view; backward only reads vjp outputs
            return ((self, np.broadcast_to(gg, shape)),)

        return Tensor._op(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        _tally(self.size)
        out = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.shape
        count = self.size if axis is None else np.prod(
            [shape[a] for a in _norm_axes(axis, self.ndim)])

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return ((self, np.broadcast_to(gg, shape) / count),)

        return Tensor._op(out, (self,), vjp)

    # -- data movement (zero multiply-adds) -------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self.data.reshape(shape)
        return Tensor._op(out, (self,), lambda g: ((self, g.reshape(old)),))

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._op(self.data.transpose(axes), (self,),
                          lambda g: ((self, g.transpose(inv)),))

    def moveaxis(self, src: int, dst: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes.insert(dst % self.ndim, axes.pop(src % self.ndim))
        return self.permute(axes)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeMismatchError(f".T needs a 2-d tensor, got {self.shape}")
        return self.permute(1, 0)

    def flip0(self) -> "Tensor":
        return Tensor._op(self.data[::-1].copy(), (self,),
                          lambda g: ((self, g[::-1].copy()),))

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        axis = axis % self.ndim
        if start < 0 or start + length > self.shape[axis]:
            raise ShapeMismatchError(
                f"narrow [{start}:{start + length}) outside axis {axis} of {self.shape}")
        idx = tuple(slice(None) if a != axis else slice(start, start + length)
                    for a in range(self.ndim))
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            full[idx] = g
            return ((self, full),)

        return Tensor._op(self.data[idx].copy(), (self,), vjp)

    def index_rows(self, indices) -> "Tensor":
        """Gather rows along axis 0; duplicate indices accumulate in backward."""
        idx = np.asarray(indices, dtype=np.intp)
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return ((self, full),)

        return Tensor._op(self.data[idx].copy(), (self,), vjp)

    def shift0(self, k: int) -> "Tensor":
        """Shift rows forward along axis 0 by k, filling vacated rows with 0."""
        if k < 0:
            raise ValueError("shift0 expects k >= 0")
        t = self.shape[0]
        out = np.zeros_like(self.data)
        if k < t:
            out[k:] = self.data[: t - k]

        def vjp(g):
            gx = np.zeros_like(g)
            if k < t:
                gx[: t - k] = g[k:]
            return ((self, gx),)

        return Tensor._op(out, (self,), vjp)

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        out = np.broadcast_to(self.data, shape).copy()
        return Tensor._op(out, (self,),
                          lambda g: ((self, _unbroadcast(g, self.shape)),))

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        out = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"cannot broadcast {a.shape} with {b.shape}") from exc
    _tally(out.size)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry leading batch dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _tally(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n
           if out.ndim > 2 else m * k * n)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return Tensor._op(out, (a, b), vjp)


def _phi1_np(zd: np.ndarray) -> np.ndarray:
    small = np.abs(zd) < 1e-6
    safe = np.where(small, 1.0, zd)
    return np.where(small, 1.0 + 0.5 * zd, np.expm1(safe) / safe)


def _phi1_grad_np(zd: np.ndarray) -> np.ndarray:
    tiny = np.abs(zd) < 1e-4
    safe = np.where(tiny, 1.0, zd)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + zd / 3.0 + zd * zd / 8.0
    return np.where(tiny, series, exact)


def phi1(z: Tensor) -> Tensor:
    """(exp(z) - 1)/z elementwise, switching to 1 + z/2 when |z| < 1e-6.

    The derivative uses its own series 1/2 + z/3 + z^2/8 below |z| < 1e-4,
    where the direct quotient loses digits to cancellation.
    """
    z = _wrap(z)
    _tally(z.size)
    zd = z.data
    out = _phi1_np(zd)

    def vjp(g):
        return ((z, g * _phi1_grad_np(zd)),)

    return Tensor._op(out, (z,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"concat shapes incompatible: {[t.shape for t in tensors]}") from exc
    axis_n = axis % out.ndim
    sizes = [t.shape[axis_n] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis_n)
        return tuple((t, p) for t, p in zip(tensors, parts))

    return Tensor._op(out, tuple(tensors), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each last-axis row to unit root-mean-square.

    Weightless: no learned gain, so it adds no parameters. exp(-log/2)
    stands in for rsqrt since the op set has no direct power. eps keeps
    the all-zero row finite (it maps to zero).
    """
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + eps).log() * -0.5).exp()


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds need both operands."""
    a = _wrap(a)
    binary = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y,
              "mul": lambda x, y: x * y, "div": lambda x, y: x / y}
    unary = {"exp": Tensor.exp, "log": Tensor.log, "sigmoid": Tensor.sigmoid,
             "softplus": Tensor.softplus, "silu": Tensor.silu, "neg": Tensor.__neg__}
    if kind in binary:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return binary[kind](a, _wrap(b))
    if kind in unary:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' takes one operand")
        return unary[kind](a)
    raise ValueError(f"unknown elementwise kind '{kind}'")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The loss must be a scalar (shape ()). Reachable nodes are visited once
    each, in reverse creation order, which is a reverse topological order.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward expects a Tensor loss")
    if loss.shape != ():
        raise GradError(f"loss must be scalar, got shape {loss.shape}")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    todo = [loss]
    while todo:
        node = todo.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        todo.extend(node._parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in node._vjp(g):
            if not (parent.requires_grad or parent._vjp is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Compare analytic grad of scalar f(x) against central differences.

    Returns max over coordinates of |analytic - numeric| divided by
    (|analytic| + |numeric| + 1e-12). f must be deterministic.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise GradError("finite_diff_check expects f to return a scalar Tensor")
    backward(loss)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    worst = 0.0
    flat = leaf.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(leaf).item()
            flat[i] = orig - step
            lo = f(leaf).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
