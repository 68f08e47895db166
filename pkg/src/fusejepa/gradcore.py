"""Reverse-mode differentiable arrays on numpy: define-by-run, one graph per step.

Only the op kinds the encoder, losses and probes need are provided. Every op
reports its multiply-add count so the profiler can instrument a run.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import MaskError, ShapeError
from .types import CheckReport

logger = logging.getLogger(__name__)

OP_KINDS: frozenset[str] = frozenset({
    "matmul", "add", "sub", "mul", "scalar_mul", "reshape", "transpose", "concat",
    "slice", "gather", "mean", "sum", "square", "sqrt", "exp", "cos", "sin", "gelu",
    "layer_norm", "masked_softmax", "broadcast", "softplus", "log_softmax",
})

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_node_ids = itertools.count()
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


# ---------------------------------------------------------------------------
# Thread-local context: grad mode, recorder, scope labels
# ---------------------------------------------------------------------------


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Ops inside build no graph; outputs never require grad."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _scope_stack() -> list[str]:
    if not hasattr(_state, "scopes"):
        _state.scopes = []
    return _state.scopes


@contextmanager
def scope(name: str) -> Iterator[None]:
    """Label every op recorded inside with ``name`` (nested scopes join with '.')."""
    stack = _scope_stack()
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_scope() -> str:
    return ".".join(_scope_stack())


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    madds: int
    nbytes: int
    scope: str
    retained: bool  # inputs saved for backward


class Graph:
    """Records every op executed while active. Used for instrumentation only."""

    def __init__(self) -> None:
        self.records: list[OpRecord] = []

    def __enter__(self) -> Graph:
        if not hasattr(_state, "graphs"):
            _state.graphs = []
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _state.graphs.remove(self)

    def madds(self, prefix: str | None = None, kinds: set[str] | None = None) -> int:
        total = 0
        for rec in self.records:
            if prefix is not None and not (rec.scope == prefix or rec.scope.startswith(prefix + ".")):
                continue
            if kinds is not None and rec.kind not in kinds:
                continue
            total += rec.madds
        return total

    def count(self, kind: str) -> int:
        return sum(1 for rec in self.records if rec.kind == kind)

    def peak_live_bytes(self, base_bytes: int = 0) -> int:
        """Peak bytes of live op outputs over the forward schedule, plus ``base_bytes``.

        An output dies after its last consumer unless some consumer saved it for
        backward, in which case it stays live until the end of the forward pass.
        """
        produced = {rec.output: rec.nbytes for rec in self.records}
        last_use: dict[int, int] = {}
        retained: set[int] = set()
        for i, rec in enumerate(self.records):
            for nid in rec.inputs:
                if nid in produced:
                    last_use[nid] = i
                    if rec.retained:
                        retained.add(nid)
        live = base_bytes
        peak = live
        for i, rec in enumerate(self.records):
            live += rec.nbytes
            peak = max(peak, live)
            for nid in set(rec.inputs):
                if nid in produced and last_use.get(nid) == i and nid not in retained:
                    live -= produced[nid]
        return peak


def _active_graphs() -> list[Graph]:
    return getattr(_state, "graphs", [])


# ---------------------------------------------------------------------------
# DiffArray
# ---------------------------------------------------------------------------


class DiffArray:
    """Dense array participating in a reverse-mode differentiation graph."""

    __array_priority__ = 100.0

    def __init__(
        self,
        values: Any,
        *,
        requires_grad: bool = False,
        is_param: bool = False,
        dtype: Any = None,
    ) -> None:
        arr = np.asarray(values, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.is_param = is_param
        self.requires_grad = requires_grad or is_param
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: BackwardFn | None = None
        self._kind: str | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> DiffArray:
        return DiffArray(self.values)

    def __repr__(self) -> str:
        tag = "param" if self.is_param else ("grad" if self.requires_grad else "const")
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}, {tag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other: Any) -> DiffArray:
        return add(self, other)

    def __radd__(self, other: Any) -> DiffArray:
        return add(other, self)

    def __sub__(self, other: Any) -> DiffArray:
        return sub(self, other)

    def __rsub__(self, other: Any) -> DiffArray:
        return sub(other, self)

    def __mul__(self, other: Any) -> DiffArray:
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Any) -> DiffArray:
        return self.__mul__(other)

    def __neg__(self) -> DiffArray:
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: Any) -> DiffArray:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> DiffArray:
        return slice_(self, index)

    def reshape(self, *shape: int) -> DiffArray:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> DiffArray:
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_array(x: Any, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _make(
    kind: str,
    values: np.ndarray,
    parents: Sequence[DiffArray],
    backward_fn: BackwardFn,
    madds: int,
) -> DiffArray:
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = DiffArray(values, requires_grad=False)
    if requires:
        out.requires_grad = True
        out.grad = None  # intermediate grads live in backward()'s table
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._kind = kind
    for graph in _active_graphs():
        graph.records.append(OpRecord(
            kind=kind,
            inputs=tuple(p.node_id for p in parents),
            output=out.node_id,
            madds=int(madds),
            nbytes=int(values.nbytes),
            scope=current_scope(),
            retained=requires,
        ))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _align(a: DiffArray, b: DiffArray, kind: str) -> tuple[DiffArray, DiffArray]:
    if a.shape == b.shape:
        return a, b
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None
    if a.shape != target:
        a = broadcast(a, target)
    if b.shape != target:
        b = broadcast(b, target)
    return a, b


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Any, b: Any) -> DiffArray:
    """Matrix product with numpy leading-dimension semantics (both operands >= 2-D)."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not conform") from None
    av, bv = a.values, b.values
    out = av @ bv

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward_fn, out.size * a.shape[-1])


def _pair(a: Any, b: Any, kind: str) -> tuple[DiffArray, DiffArray]:
    if isinstance(a, DiffArray):
        b = as_array(b, like=a)
    else:
        b = as_array(b)
        a = as_array(a, like=b)
    return _align(a, b, kind)


def add(a: Any, b: Any) -> DiffArray:
    a, b = _pair(a, b, "add")
    return _make("add", a.values + b.values, (a, b), lambda g: (g, g), a.size)


def sub(a: Any, b: Any) -> DiffArray:
    a, b = _pair(a, b, "sub")
    return _make("sub", a.values - b.values, (a, b), lambda g: (g, -g), a.size)


def mul(a: Any, b: Any) -> DiffArray:
    a, b = _pair(a, b, "mul")
    av, bv = a.values, b.values
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av), av.size)


def scalar_mul(x: DiffArray, c: float) -> DiffArray:
    c = float(c)
    return _make("scalar_mul", x.values * c, (x,), lambda g: (g * c,), x.size)


def broadcast(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.values, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {x.shape} to {shape}") from None
    src = x.shape
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, src),), 0)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),), 0)


def transpose(x: DiffArray, axes: Sequence[int] | None = None) -> DiffArray:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.values.transpose(axes), (x,), lambda g: (g.transpose(inverse),), 0)


def concat(xs: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    xs = [as_array(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} do not conform on axis {axis}")
    out = np.concatenate([x.values for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _make("concat", out, xs, backward_fn, 0)


def slice_(x: DiffArray, index: Any) -> DiffArray:
    """Basic (non-fancy) indexing."""
    out = np.array(x.values[index], copy=True)
    src_shape, dtype = x.shape, x.dtype

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(src_shape, dtype=dtype)
        full[index] += g
        return (full,)

    return _make("slice", out, (x,), backward_fn, 0)


def gather(x: DiffArray, indices: np.ndarray, axis: int = 0) -> DiffArray:
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of {x.shape}")
    out = np.take(x.values, indices, axis=axis)
    src_shape, dtype = x.shape, x.dtype
    lead = (slice(None),) * axis

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, lead + (indices,), g)
        return (full,)

    return _make("gather", out, (x,), backward_fn, 0)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: DiffArray, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axes(axis, x.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims)
    src = x.shape

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.asarray(out), (x,), backward_fn, x.size)


def mean(x: DiffArray, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.values.mean(axis=axes, keepdims=keepdims)
    src = x.shape

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make("mean", np.asarray(out), (x,), backward_fn, x.size)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------


def square(x: DiffArray) -> DiffArray:
    xv = x.values
    return _make("square", xv * xv, (x,), lambda g: (2.0 * xv * g,), x.size)


def sqrt(x: DiffArray) -> DiffArray:
    out = np.sqrt(x.values)
    return _make("sqrt", out, (x,), lambda g: (g / (2.0 * out),), x.size)


def exp(x: DiffArray) -> DiffArray:
    out = np.exp(x.values)
    return _make("exp", out, (x,), lambda g: (g * out,), x.size)


def cos(x: DiffArray) -> DiffArray:
    xv = x.values
    return _make("cos", np.cos(xv), (x,), lambda g: (-g * np.sin(xv),), x.size)


def sin(x: DiffArray) -> DiffArray:
    xv = x.values
    return _make("sin", np.sin(xv), (x,), lambda g: (g * np.cos(xv),), x.size)


def gelu(x: DiffArray) -> DiffArray:
    """GELU, tanh approximation."""
    xv = x.values
    t = np.tanh(_GELU_C * (xv + _GELU_K * xv**3))
    out = 0.5 * xv * (1.0 + t)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * xv**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du),)

    return _make("gelu", out, (x,), backward_fn, x.size)


def softplus(x: DiffArray) -> DiffArray:
    xv = x.values
    out = np.logaddexp(0.0, xv)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / (1.0 + np.exp(-xv)),)

    return _make("softplus", out, (x,), backward_fn, x.size)


def layer_norm(
    x: DiffArray,
    gamma: DiffArray | None = None,
    beta: DiffArray | None = None,
    eps: float = LAYER_NORM_EPS,
) -> DiffArray:
    """Normalize over the last axis, then scale/shift by ``gamma``/``beta``."""
    dim = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (dim,):
            raise ShapeError(f"layer_norm: affine shape {p.shape} != ({dim},)")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.values
    if beta is not None:
        out = out + beta.values
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        gxhat = g * gamma.values if gamma is not None else g
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, dim).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, dim).sum(axis=0))
        return grads

    return _make("layer_norm", out, parents, backward_fn, 4 * x.size)


def masked_softmax(x: DiffArray, mask: np.ndarray) -> DiffArray:
    """Softmax over the last axis restricted to keys where ``mask`` is True.

    Disallowed keys get exactly zero weight. Every row must allow a key.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        full_mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_softmax: mask {mask.shape} does not fit scores {x.shape}") from None
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax: a query row has zero allowed keys")
    xv = x.values
    shifted = np.where(full_mask, xv, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(full_mask, np.exp(shifted), 0.0)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(xv.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("masked_softmax", out, (x,), backward_fn, x.size)


def log_softmax(x: DiffArray, axis: int = -1) -> DiffArray:
    xv = x.values
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), backward_fn, 2 * x.size)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

_DISPATCH: dict[str, Callable[..., DiffArray]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "slice": slice_,
    "gather": gather,
    "mean": mean,
    "sum": sum_,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "cos": cos,
    "sin": sin,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "masked_softmax": masked_softmax,
    "broadcast": broadcast,
    "softplus": softplus,
    "log_softmax": log_softmax,
}


def forward_op(kind: str, inputs: Sequence[DiffArray], attrs: dict[str, Any] | None = None) -> DiffArray:
    """Run one op by kind name. ``attrs`` are passed as keyword arguments."""
    if kind not in _DISPATCH:
        raise ValueError(f"Unknown op kind={kind!r}. Valid: {sorted(OP_KINDS)}")
    return _DISPATCH[kind](*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    visited: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[DiffArray], DiffArray],
    x: DiffArray,
    step: float = 1e-5,
    tol: float = 1e-3,
) -> CheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    The error is the infinity-norm of the difference relative to the larger of
    the two gradients' infinity-norms.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if not x.requires_grad:
        x.requires_grad = True
    x.grad = np.zeros_like(x.values)

    loss = f(x)
    if not np.all(np.isfinite(loss.values)):
        return CheckReport(float("inf"), False, tol, location="loss at x")
    backward(loss)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.values)
    base = x.values.copy()
    with no_grad():
        for idx in np.ndindex(x.shape):
            x.values[idx] = base[idx] + step
            plus = f(x).item()
            x.values[idx] = base[idx] - step
            minus = f(x).item()
            x.values[idx] = base[idx]
            if not (math.isfinite(plus) and math.isfinite(minus)):
                return CheckReport(float("inf"), False, tol, location=f"index {idx}")
            numeric[idx] = (plus - minus) / (2.0 * step)

    bad = np.argwhere(~np.isfinite(analytic))
    if bad.size:
        return CheckReport(float("inf"), False, tol, location=f"analytic grad index {tuple(bad[0])}")

    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    err = float(np.abs(analytic - numeric).max(initial=0.0))
    rel = 0.0 if err == 0.0 else err / max(scale, 1e-12)
    report = CheckReport(rel, rel < tol, tol, checked=x.size)
    if not report.passed:
        logger.debug("grad_check failed: rel=%.3e over %d entries", rel, x.size)
    return report
