"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine in the micrograd style: every operation on a
:class:`Tensor` records its operands and a vector-Jacobian-product closure,
and ``backward`` walks the tape in reverse creation order.  The primitive
set is deliberately minimal -- enough to differentiate swish MLPs, a PD
controller, semi-implicit Euler integration and quaternion/frame math, and
nothing more.

All public math functions are polymorphic: given plain numpy arrays they
compute with numpy and return arrays (no tape, no overhead); given at least
one Tensor they record onto the tape.  Physics and network code is written
once against this module and runs either traced or untraced.

Everything is float64.  Non-finite values are detected eagerly (with the
offending node's index and op name) unless checks are disabled via
:func:`finite_checks`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "evaluate",
    "gradient",
    "finite_difference",
    "finite_checks",
    "add", "sub", "mul", "div", "neg", "pow", "matmul",
    "exp", "log", "sqrt", "sin", "cos", "tanh", "sigmoid", "swish",
    "clip", "minimum", "maximum", "where_const",
    "reduce_sum", "mean", "concat", "stack", "reshape", "transpose",
    "solve_spd",
]

_ids = itertools.count()
_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a tensor or an op result."""


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable eager NaN/Inf detection."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _check(data: np.ndarray, op: str, node_id: int) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value in op '{op}' (node {node_id})")


class Tensor:
    """A float64 array plus the tape machinery to differentiate through it.

    Leaves carry ``requires_grad``; interior nodes are created by ops and
    hold a vjp closure mapping an output cotangent to per-parent cotangents.
    ``data`` is treated as immutable while a tape referencing it is alive
    (optimizers mutate parameter data only between tapes).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]] | None = None
        _check(self.data, op, self._id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut from the tape."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value in op '{self.op}' (node {self._id})")
        return self

    # -- tape -----------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Accumulate d(seed . self)/d(leaf) into ``grad`` of every leaf.

        ``seed`` defaults to ones (the usual scalar-loss case).  Creation
        order is a valid topological order, so the walk just sorts the
        reachable subgraph by node id; no recursion, so arbitrarily long
        tapes (e.g. integrator unrolls) are fine.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        # Reachable sub-tape, leaves included.
        visited: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in visited:
                continue
            visited[t._id] = t
            stack.extend(t._parents)
        order = sorted(visited.values(), key=lambda t: t._id, reverse=True)

        cotangents: dict[int, np.ndarray] = {self._id: seed}
        for node in order:
            g = cotangents.pop(node._id, None)
            if g is None:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(
                    f"non-finite gradient at op '{node.op}' (node {node._id})")
            if node._vjp is not None:
                for parent, pg in node._vjp(g):
                    if not parent.requires_grad:
                        continue
                    acc = cotangents.get(parent._id)
                    cotangents[parent._id] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op) -> Tensor:
    """Create an op result; prune the tape below constant subgraphs."""
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, op=op)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Tensor(data, requires_grad=False, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- binary elementwise ----------------------------------------------------

def add(a, b):
    if not _is_tensor(a, b):
        return _data(a) + _data(b)
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def vjp(g, a=a, b=b):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return _make(out_data, (a, b), vjp, "add")


def sub(a, b):
    if not _is_tensor(a, b):
        return _data(a) - _data(b)
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, a=a, b=b):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    if not _is_tensor(a, b):
        return _data(a) * _data(b)
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, a=a, b=b):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    if not _is_tensor(a, b):
        return _data(a) / _data(b)
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, a=a, b=b):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    if not _is_tensor(a):
        return -_data(a)

    def vjp(g, a=a):
        return ((a, -g),)

    return _make(-a.data, (a,), vjp, "neg")


def pow(a, p):
    """Elementwise power with a constant (non-differentiated) exponent."""
    if not _is_tensor(a):
        return _data(a) ** p
    pf = float(p)

    def vjp(g, a=a, pf=pf):
        return ((a, g * pf * a.data ** (pf - 1.0)),)

    return _make(a.data ** pf, (a,), vjp, "pow")


def minimum(a, b):
    """Elementwise min; subgradient goes to the smaller operand (ties to a)."""
    if not _is_tensor(a, b):
        return np.minimum(_data(a), _data(b))
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data

    def vjp(g, a=a, b=b, take_a=take_a):
        return ((a, _unbroadcast(g * take_a, a.data.shape)),
                (b, _unbroadcast(g * ~take_a, b.data.shape)))

    return _make(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


def maximum(a, b):
    if not _is_tensor(a, b):
        return np.maximum(_data(a), _data(b))
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data

    def vjp(g, a=a, b=b, take_a=take_a):
        return ((a, _unbroadcast(g * take_a, a.data.shape)),
                (b, _unbroadcast(g * ~take_a, b.data.shape)))

    return _make(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


def where_const(cond, a, b):
    """Select elementwise by a constant boolean mask (mask is not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    if not _is_tensor(a, b):
        return np.where(cond, _data(a), _data(b))
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, a=a, b=b, cond=cond):
        return ((a, _unbroadcast(g * cond, a.data.shape)),
                (b, _unbroadcast(g * ~cond, b.data.shape)))

    return _make(np.where(cond, a.data, b.data), (a, b), vjp, "where")


# -- unary elementwise ------------------------------------------------------

def _unary(x, fwd: Callable, dfn: Callable, op: str):
    if not _is_tensor(x):
        return fwd(_data(x))
    out_data = fwd(x.data)

    def vjp(g, x=x, out_data=out_data):
        return ((x, g * dfn(x.data, out_data)),)

    return _make(out_data, (x,), vjp, op)


def exp(x):
    return _unary(x, np.exp, lambda xd, od: od, "exp")


def log(x):
    return _unary(x, np.log, lambda xd, od: 1.0 / xd, "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda xd, od: 0.5 / od, "sqrt")


def sin(x):
    return _unary(x, np.sin, lambda xd, od: np.cos(xd), "sin")


def cos(x):
    return _unary(x, np.cos, lambda xd, od: -np.sin(xd), "cos")


def tanh(x):
    return _unary(x, np.tanh, lambda xd, od: 1.0 - od * od, "tanh")


def _sigmoid_np(x):
    # Stable both directions.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    return _unary(x, _sigmoid_np, lambda xd, od: od * (1.0 - od), "sigmoid")


def swish(x):
    """x * sigmoid(x), fused."""

    def fwd(xd):
        return xd * _sigmoid_np(xd)

    def dfn(xd, od):
        s = _sigmoid_np(xd)
        return s + xd * s * (1.0 - s)

    return _unary(x, fwd, dfn, "swish")


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is passed through strictly inside the interval."""
    if not _is_tensor(x):
        return np.clip(_data(x), lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def vjp(g, x=x, inside=inside):
        return ((x, g * inside),)

    return _make(np.clip(x.data, lo, hi), (x,), vjp, "clip")


# -- matmul / structure ------------------------------------------------------

def matmul(a, b):
    """Matrix product following numpy semantics for 1-D/2-D/batched operands."""
    if not _is_tensor(a, b):
        return _data(a) @ _data(b)
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out_data = ad @ bd

    def vjp(g, a=a, b=b):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            ga, gb = g * bd, g * ad
        elif ad.ndim == 1:
            # (k,) @ (..., k, n) -> (..., n)
            ga = _unbroadcast((bd @ g[..., :, None])[..., 0], ad.shape)
            gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
        elif bd.ndim == 1:
            # (..., m, k) @ (k,) -> (..., m)
            ga = _unbroadcast(g[..., :, None] * bd, ad.shape)
            gb = _unbroadcast((np.swapaxes(ad, -1, -2) @ g[..., :, None])[..., 0], bd.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ((a, ga), (b, gb))

    return _make(out_data, (a, b), vjp, "matmul")


def reduce_sum(x, axis=None, keepdims: bool = False):
    if not _is_tensor(x):
        return _data(x).sum(axis=axis, keepdims=keepdims)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, x=x, axis=axis, keepdims=keepdims):
        if axis is None:
            return ((x, np.broadcast_to(g, x.data.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.data.shape).copy()),)

    return _make(out_data, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False):
    n = _data(x).size if axis is None else _data(x).shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence, axis: int = -1):
    if not _is_tensor(*parts):
        return np.concatenate([_data(p) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def vjp(g, parts=parts, sizes=sizes, axis=axis):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(zip(parts, pieces))

    return _make(out_data, tuple(parts), vjp, "concat")


def stack(parts: Sequence, axis: int = -1):
    if not _is_tensor(*parts):
        return np.stack([_data(p) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def vjp(g, parts=parts, axis=axis):
        pieces = np.moveaxis(g, axis, 0)
        return tuple((p, pieces[i]) for i, p in enumerate(parts))

    return _make(out_data, tuple(parts), vjp, "stack")


def reshape(x, shape):
    if not _is_tensor(x):
        return _data(x).reshape(shape)
    old_shape = x.data.shape

    def vjp(g, x=x, old_shape=old_shape):
        return ((x, g.reshape(old_shape)),)

    return _make(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes=None):
    if not _is_tensor(x):
        return np.transpose(_data(x), axes)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(g, x=x, inv=inv):
        return ((x, np.transpose(g, inv)),)

    return _make(np.transpose(x.data, axes), (x,), vjp, "transpose")


def _getitem(x: Tensor, idx):
    out_data = x.data[idx]

    def vjp(g, x=x, idx=idx):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _make(out_data, (x,), vjp, "slice")


# -- SPD solve ---------------------------------------------------------------

def _cholesky(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(
            f"Cholesky factorization failed (matrix not SPD): {e}") from e


def _cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor L of A.

    Unrolled forward/back substitution, vectorized over leading batch dims
    (matrix sizes here are <= ~8 so the Python loop is cheap).
    """
    n = L.shape[-1]
    y = np.empty_like(b)
    for i in range(n):
        acc = b[..., i]
        for j in range(i):
            acc = acc - L[..., i, j] * y[..., j]
        y[..., i] = acc / L[..., i, i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        acc = y[..., i]
        for j in range(i + 1, n):
            acc = acc - L[..., j, i] * x[..., j]
        x[..., i] = acc / L[..., i, i]
    return x


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` (vector rhs).

    Forward uses a Cholesky factorization (raises LinAlgError on non-SPD
    input).  The backward pass solves the adjoint system with the saved
    factor instead of differentiating the factorization:

        gb = A^-1 g      (A symmetric)
        gA = -gb x^T
    """
    if not _is_tensor(a, b):
        ad, bd = _data(a), _data(b)
        return _cho_solve(_cholesky(ad), bd)
    a, b = _as_tensor(a), _as_tensor(b)
    L = _cholesky(a.data)
    x = _cho_solve(L, b.data)

    def vjp(g, a=a, b=b, L=L, x=x):
        gb = _cho_solve(L, g)
        ga = -gb[..., :, None] * x[..., None, :]
        return ((a, ga), (b, gb))

    return _make(x, (a, b), vjp, "solve_spd")


# -- graph wrapper -----------------------------------------------------------

class Graph:
    """A differentiable function of named tensors.

    Wraps ``fn(inputs: dict[str, Tensor]) -> Tensor``.  The tape is rebuilt
    on every call (callers may cache whole Graphs but replay is not a
    semantic of this engine).  ``trace`` exposes the recorded node list in
    topological (creation) order for inspection.
    """

    def __init__(self, fn: Callable[[dict[str, Tensor]], Tensor]):
        self.fn = fn

    def _run(self, inputs: dict[str, np.ndarray], requires_grad: bool):
        leaves = {k: Tensor(v, requires_grad=requires_grad) for k, v in inputs.items()}
        out = self.fn(leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        return leaves, out

    def trace(self, inputs: dict[str, np.ndarray]) -> list[tuple[int, str, tuple[int, ...]]]:
        """Node records (id, op, parent ids) reachable from the output."""
        _, out = self._run(inputs, requires_grad=True)
        seen: dict[int, Tensor] = {}
        todo = [out]
        while todo:
            t = todo.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            todo.extend(t._parents)
        return [(t._id, t.op, tuple(p._id for p in t._parents))
                for t in sorted(seen.values(), key=lambda t: t._id)]


def evaluate(graph: Graph, inputs: dict[str, np.ndarray]) -> np.ndarray:
    """Forward pass; deterministic, pure, identical inputs give identical bits."""
    _, out = graph._run(inputs, requires_grad=False)
    return out.data


def gradient(graph: Graph, inputs: dict[str, np.ndarray], seed=None) -> dict[str, np.ndarray]:
    """d(seed . output)/d(input) for every named input, via the reverse tape."""
    leaves, out = graph._run(inputs, requires_grad=True)
    out.backward(seed)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in leaves.items()}


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    One perturbation pair per coordinate; the verification oracle against
    which the tape is checked, so it never touches the tape itself.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xw = x.copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        fp = float(f(xw))
        xf[i] = orig - eps
        fm = float(f(xw))
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * eps)
    return g
