"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every tensor produced by an operation on inputs that require gradients records
its parents and a closure computing the parents' gradients.  Tensors receive a
monotonically increasing id at creation, so creation order is a valid
topological order; :class:`Graph` recovers the recorded tape reachable from an
output and :func:`backward` replays it in exact reverse order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

EPS_NORM = 1e-12

_ids = itertools.count()
_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op: Optional[str] = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.id = next(_ids)
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

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __deepcopy__(self, memo) -> "Tensor":
        # a copy gets a fresh id so it never aliases the original on a tape
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out.op = None
        out.parents = ()
        out._backward = None
    return out


# -- elementwise ---------------------------------------------------------------

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar-with-tensor broadcasting is the only implicit kind
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _record(out, "div", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log: non-positive value {a.data[idx]!r} at index {idx}")
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"sqrt: non-positive value {a.data[idx]!r} at index {idx}")
    out = np.sqrt(a.data)
    return _record(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0  # subgradient at exactly 0 is 0
    return _record(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- shape ---------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, "broadcast", (a,), backward)


def index_select(a, indices: Sequence[int], axis: int) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = _check_axis(axis, a.ndim, "index_select")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _record(np.take(a.data, idx, axis=axis), "index_select", (a,), backward)


# -- reductions ----------------------------------------------------------------

def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _norm_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (axis,)
    return tuple(sorted(_check_axis(int(ax), ndim, op) for ax in axis))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim, "sum")
    src = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return _record(a.data.sum(axis=axes), "sum", (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim, "mean")
    src = a.shape
    n = int(np.prod([src[ax] for ax in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, src).copy(),)

    return _record(a.data.sum(axis=axes) / n, "mean", (a,), backward)


# -- linear algebra ------------------------------------------------------------

def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulates over the inner index in a fixed order, one rank-1 update at a
    # time, so every output entry depends only on its own row and column.
    out = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(_ordered_matmul(a.data, b.data), "matmul", (a, b), backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*9) patches of the zero-padded input."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    Accepts a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be CxHxW or NxCxHxW, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be Cout x Cin x 3 x 3, got {kernel.shape}")
    n, c, h, w = xd.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kernel.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    cols = _im2col(xd)
    kmat = kernel.data.reshape(cout, c * 9)
    out = (cols @ kmat.T + bias.data).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        g_kernel = (gmat.T @ cols).reshape(kernel.shape)
        g_bias = gmat.sum(axis=0)
        g_cols = (gmat @ kmat).reshape(n, h, w, c, 3, 3)
        g_pad = np.zeros((n, c, h + 2, w + 2))
        for di in range(3):
            for dj in range(3):
                g_pad[:, :, di : di + h, dj : dj + w] += g_cols[..., di, dj].transpose(0, 3, 1, 2)
        g_x = g_pad[:, :, 1:-1, 1:-1]
        return (g_x[0] if single else g_x), g_kernel, g_bias

    return _record(np.ascontiguousarray(out), "conv2d", (x, kernel, bias), backward)


# -- normalizations ------------------------------------------------------------

def l2_normalize(a, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "l2_normalize")
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    bad = np.argwhere(norm < eps)
    if bad.size:
        idx = tuple(int(i) for k, i in enumerate(bad[0]) if k != axis)
        raise DomainError(f"l2_normalize: norm below {eps:g} at slice {idx}")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, "l2_normalize", (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "softmax")
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, "softmax", (a,), backward)


# -- graph + backward ----------------------------------------------------------

class Graph:
    """The recorded tape reachable from an output, in append (creation) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.visits: dict[int, int] = {}

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.id in seen or not t.requires_grad:
                continue
            seen[t.id] = t
            stack.extend(t.parents)
        return cls(sorted(seen.values(), key=lambda t: t.id))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        pending: dict[int, np.ndarray] = {output.id: np.ones_like(output.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = pending.pop(node.id, None)
            self.visits[node.id] = self.visits.get(node.id, 0) + 1
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the map from leaf tensor to its (accumulated) gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    return Graph.trace(loss).backward(loss)


# -- gradient checking ---------------------------------------------------------

class GradCheck(NamedTuple):
    max_rel_error: float
    skipped: tuple[int, ...]


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    eps: float = 1e-6,
    kink_tol: float = 1e-2,
) -> GradCheck:
    """Compare autodiff against central differences coordinate by coordinate.

    A coordinate whose one-sided differences disagree by more than ``kink_tol``
    (relative) sits on a non-differentiable point; it is reported in
    ``skipped`` instead of counting toward the error.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    backward(f(xt))
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    with no_grad():
        f0 = f(Tensor(x0)).item()
    worst = 0.0
    skipped = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        with no_grad():
            fm = f(Tensor(x0)).item()
        flat[i] = orig
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(i)
            continue
        central = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, err)
    return GradCheck(worst, tuple(skipped))


def parameters_gradients(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(autodiff, central-difference) gradient pairs for every parameter of a closure."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    pairs = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        pairs.append((analytic, numeric))
    return pairs


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - c| / max(|a|, |c|, floor)."""
    a, c = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - c) / np.maximum(np.maximum(np.abs(a), np.abs(c)), floor)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6
) -> float:
    """Max elementwise relative error over every coordinate of every parameter."""
    pairs = parameters_gradients(loss_fn, params, eps)
    return max((float(relative_error(a, c).max(initial=0.0)) for a, c in pairs), default=0.0)
