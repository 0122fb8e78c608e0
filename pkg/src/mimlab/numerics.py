"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive is a pair of pure array functions: a forward ``fwd(*arrays)``
and a backward ``bwd(grad, out, *arrays)`` returning one gradient (or None)
per input. While a :class:`Graph` is active, primitives touching a tensor
that requires gradients are appended to its tape; :func:`backward` walks the
tape in exact reverse order.

Arrays are numpy; forward passes run in float32 and gradient checks rerun the
same code in float64.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.graph: Graph | None = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


@dataclass
class Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    fwd: Callable[..., np.ndarray]
    bwd: Callable[..., tuple]


_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of primitive applications plus the named leaves they used.

    Use as a context manager; only primitives evaluated inside the ``with``
    block are recorded.
    """

    def __init__(self):
        self.ops: list[Op] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph stack corrupted")
        stack.pop()

    def _register(self, t: Tensor) -> None:
        if t.name is None or t.graph is not None:
            return
        held = self.params.get(t.name)
        if held is None:
            self.params[t.name] = t
        elif held is not t:
            raise ValueError(f"two distinct parameters share the name {t.name!r}")

    def record(self, op: Op) -> None:
        for t in op.inputs:
            if t.requires_grad:
                self._register(t)
        op.output.graph = self
        self.ops.append(op)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the leaf values, in order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for op in self.ops:
            args = [values.get(id(t), t.data) for t in op.inputs]
            out = op.fwd(*args)
            values[id(op.output)] = out
            outs.append(out)
        return outs


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def apply(name: str, fwd: Callable, bwd: Callable, *inputs: Tensor) -> Tensor:
    """Evaluate a primitive and record it on the active graph when needed."""
    with np.errstate(all="ignore"):
        out = fwd(*[t.data for t in inputs])
    _check_finite(name, out)
    graph = current_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=track)
    if track:
        graph.record(Op(name, tuple(inputs), res, fwd, bwd))
    return res


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    return _as_tensor(a, like), _as_tensor(b, like)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    return apply(
        "div",
        np.divide,
        lambda g, out, x, y: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * x / (y * y), y.shape),
        ),
        a,
        b,
    )


def sqrt(x: Tensor) -> Tensor:
    return apply("sqrt", np.sqrt, lambda g, out, a: (g * 0.5 / out,), x)


def exp(x: Tensor) -> Tensor:
    return apply("exp", np.exp, lambda g, out, a: (g * out,), x)


def log(x: Tensor) -> Tensor:
    return apply("log", np.log, lambda g, out, a: (g / a,), x)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def _gelu_bwd(g, out, x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (g * (cdf + x * pdf),)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    return apply("gelu", _gelu_fwd, _gelu_bwd, x)


def smooth_l1(d: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Smooth-L1 of a residual."""
    if beta <= 0:
        raise ValueError("beta must be positive")

    def fwd(a):
        ad = np.abs(a)
        return np.where(ad < beta, 0.5 * a * a / beta, ad - 0.5 * beta)

    def bwd(g, out, a):
        return (g * np.where(np.abs(a) < beta, a / beta, np.sign(a)),)

    return apply("smooth_l1", fwd, bwd, d)


# -- reductions and shape --------------------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def fwd(a):
        return np.asarray(np.sum(a, axis=axes, keepdims=keepdims))

    def bwd(g, out, a):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply("sum", fwd, bwd, x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply(
        "reshape",
        lambda a: a.reshape(shape),
        lambda g, out, a: (g.reshape(a.shape),),
        x,
    )


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply(
        "transpose",
        lambda a: np.ascontiguousarray(np.transpose(a, axes)),
        lambda g, out, a: (np.transpose(g, inv),),
        x,
    )


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row selection: ``out[b, i] = x[b, index[b, i]]`` for x of shape [B, N, ...]."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"cannot gather {index.shape} rows from {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError("row index out of range")
    rows = np.arange(x.shape[0])[:, None]

    def fwd(a):
        return a[rows, index]

    def bwd(g, out, a):
        ga = np.zeros_like(a)
        np.add.at(ga, (rows, index), g)
        return (ga,)

    return apply("gather_rows", fwd, bwd, x)


# -- linear algebra and normalization ---------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(g, out, x, y):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return apply("matmul", np.matmul, bwd, a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axis(axis, x.ndim)

    def fwd(a):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def bwd(g, out, a):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply("softmax", fwd, bwd, x)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axis(axis, x.ndim)

    def fwd(a):
        shifted = a - a.max(axis=axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g, out, a):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return apply("log_softmax", fwd, bwd, x)


def standardize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-vector standardization over the last axis (population variance)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine must have shape ({d},)")
    lead = tuple(range(x.ndim - 1))

    def fwd(a, gm, bt):
        return standardize(a, eps) * gm + bt

    def bwd(g, out, a, gm, bt):
        mu = a.mean(axis=-1, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        gx_hat = g * gm
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply("layernorm", fwd, bwd, x, gamma, beta)


# -- differentiation ---------------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every parameter registered in ``graph``.

    Returns a name -> gradient mapping. Gradients are accumulated in the
    reverse of recording order, so results are deterministic.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.graph is not graph:
        raise ValueError("loss was not produced under this graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(graph.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        in_grads = op.bwd(g, op.output.data, *[t.data for t in op.inputs])
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    out = {}
    for name, p in graph.params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = np.asarray(g, dtype=p.dtype).reshape(p.shape)
        out[name] = p.grad
    return out


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray | Tensor],
    eps: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps a name -> Tensor dict to a scalar Tensor. Everything runs in
    float64. With ``probes=None`` every coordinate is perturbed; otherwise that
    many random unit directions over all parameters jointly. The relative
    error of a pair (a, n) is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    base = {
        k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        for k, v in params.items()
    }
    names = sorted(base)

    with Graph() as g:
        leaves = {k: Tensor(base[k].copy(), requires_grad=True, name=k) for k in names}
        loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("f is not finite at the base point")
    backward(g, loss)
    analytic = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base[k]) for k in names}

    def evaluate(shifted: dict[str, np.ndarray]) -> float:
        val = f({k: Tensor(shifted[k], dtype=np.float64) for k in names}).data
        if not np.isfinite(val).all():
            raise NonFiniteError("f is not finite at a perturbed point")
        return float(val.reshape(()))

    def rel(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), floor)

    worst = 0.0
    if probes is None:
        for k in names:
            flat = base[k].reshape(-1)
            for i in range(flat.size):
                plus = dict(base)
                minus = dict(base)
                p = flat.copy()
                p[i] += eps
                plus[k] = p.reshape(base[k].shape)
                m = flat.copy()
                m[i] -= eps
                minus[k] = m.reshape(base[k].shape)
                num = (evaluate(plus) - evaluate(minus)) / (2 * eps)
                worst = max(worst, rel(float(analytic[k].reshape(-1)[i]), num))
        return worst

    rng = np.random.default_rng(seed)
    for _ in range(probes):
        direction = {k: rng.standard_normal(base[k].shape) for k in names}
        norm = math.sqrt(sum(float((d * d).sum()) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        plus = {k: base[k] + eps * direction[k] for k in names}
        minus = {k: base[k] - eps * direction[k] for k in names}
        num = (evaluate(plus) - evaluate(minus)) / (2 * eps)
        ana = sum(float((analytic[k] * direction[k]).sum()) for k in names)
        worst = max(worst, rel(ana, num))
    return worst

