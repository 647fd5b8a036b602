"""Reverse-mode differentiation over flat float64 parameter vectors.

The engine records a tape of primitive operations (add, mul, matmul, exp,
log, log-sum-exp, sigmoid, indexing, reductions) and differentiates the
recorded scalar exactly by walking the tape backwards.  Objectives are
plain callables that receive the parameter leaf as a :class:`Var` and must
build their result out of the primitives below; anything else is rejected.

Hessian-vector products come in two modes behind one interface:

* ``fd`` (default) — central differences of the exact gradient with step
  ``h * (1 + ||theta||)``.
* ``exact`` — forward-over-reverse: the forward pass is re-run in dual
  arithmetic (:class:`DualVar`) so the directional derivative is itself a
  recorded scalar, and one backward pass over it yields ``H @ v`` exactly.

Every primitive checks its output for NaN/Inf and raises
:class:`NonFiniteError` naming the offending primitive.  A tape is
single-threaded; concurrent evaluations must each use their own tape
(``grad``/``value``/``hvp`` create one per call).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _expit

from .params import Gradient, ParamVector, Segment

__all__ = [
    "EngineError",
    "NonFiniteError",
    "Tape",
    "Var",
    "DualVar",
    "HvpResult",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "logaddexp",
    "logsigmoid",
    "logsumexp",
    "vsum",
    "mean",
    "dot",
    "take",
    "take_rows",
    "segment_sum",
    "reshape",
    "transpose",
    "grad",
    "value",
    "grad_and_value",
    "hvp",
    "finite_diff_grad",
]


class EngineError(RuntimeError):
    """Objective was not built through the engine, or tapes were mixed."""


class NonFiniteError(EngineError):
    """A primitive produced NaN/Inf; carries the primitive's name."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by primitive '{op}'")
        self.op = op


class Tape:
    """Append-only record of one forward computation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Var] = []


class Var:
    """Handle to one tape node: a float64 array plus its backward rule."""

    __slots__ = ("tape", "value", "parents", "vjp", "op", "index")

    def __init__(self, tape, value, parents, vjp, op):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; constants are lifted onto this Var's tape
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
        if isinstance(other, (Var, DualVar)):
            raise EngineError("division by a variable is not a primitive; use mul")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class DualVar:
    """Primal/tangent pair used by the exact HVP mode.

    ``tangent is None`` encodes a structurally zero tangent (constants).
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Var, tangent):
        self.primal = primal
        self.tangent = tangent

    @property
    def value(self):
        return self.primal.value

    @property
    def shape(self):
        return self.primal.value.shape

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
        if isinstance(other, (Var, DualVar)):
            raise EngineError("division by a variable is not a primitive; use mul")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(tape: Tape, value) -> Var:
    """Lift a plain array onto a tape as a non-differentiable node."""
    return Var(tape, value, (), None, "const")


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise EngineError("operation needs at least one engine variable")


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise EngineError("variables from different tapes cannot be mixed")
        return x
    return constant(tape, x)


def _is_dual(*args) -> bool:
    return any(isinstance(a, DualVar) for a in args)


def _split(x):
    """(primal, tangent) with tangent None for constants and plain Vars."""
    if isinstance(x, DualVar):
        return x.primal, x.tangent
    return x, None


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to the shape of the operand it flows into."""
    if adj.shape == shape:
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and adj.shape[i] != 1)
    if keep:
        adj = adj.sum(axis=keep, keepdims=True)
    return adj.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        return DualVar(add(ap, bp), _tadd(at, bt))
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = a.value + b.value

    def vjp(adj):
        return _unbroadcast(adj, a.value.shape), _unbroadcast(adj, b.value.shape)

    return Var(tape, out, (a, b), vjp, "add")


def mul(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = mul(at, bp) if at is not None else None
        t2 = mul(ap, bt) if bt is not None else None
        return DualVar(mul(ap, bp), _tadd(t1, t2))
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = a.value * b.value

    def vjp(adj):
        return (
            _unbroadcast(adj * b.value, a.value.shape),
            _unbroadcast(adj * a.value, b.value.shape),
        )

    return Var(tape, out, (a, b), vjp, "mul")


def neg(a):
    if isinstance(a, (Var, DualVar)):
        return mul(a, -1.0)
    return -np.asarray(a, dtype=np.float64)


def sub(a, b):
    return add(a, neg(b))


def matmul(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = matmul(at, bp) if at is not None else None
        t2 = matmul(ap, bt) if bt is not None else None
        return DualVar(matmul(ap, bp), _tadd(t1, t2))
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise EngineError("matmul supports 1-D and 2-D operands only")
    out = av @ bv

    def vjp(adj):
        if av.ndim == 1 and bv.ndim == 2:  # (n,) @ (n,m) -> (m,)
            return bv @ adj, np.outer(av, adj)
        if av.ndim == 2 and bv.ndim == 1:  # (n,m) @ (m,) -> (n,)
            return np.outer(adj, bv), av.T @ adj
        if av.ndim == 1 and bv.ndim == 1:  # inner product
            return adj * bv, adj * av
        return adj @ bv.T, av.T @ adj

    return Var(tape, out, (a, b), vjp, "matmul")


def exp(a):
    if _is_dual(a):
        ap, at = _split(a)
        out = exp(ap)
        return DualVar(out, mul(at, out) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = np.exp(a.value)

    def vjp(adj):
        return (adj * out,)

    return Var(tape, out, (a,), vjp, "exp")


def log(a):
    if _is_dual(a):
        ap, at = _split(a)
        out = log(ap)
        # d log x = dx / x; 1/x stays on the tape via exp(-log x), x > 0 here
        tan = mul(at, exp(neg(out))) if at is not None else None
        return DualVar(out, tan)
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = np.log(a.value)

    def vjp(adj):
        return (adj / a.value,)

    return Var(tape, out, (a,), vjp, "log")


def sigmoid(a):
    if _is_dual(a):
        ap, at = _split(a)
        out = sigmoid(ap)
        tan = mul(at, mul(out, sub(1.0, out))) if at is not None else None
        return DualVar(out, tan)
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = _expit(a.value)

    def vjp(adj):
        return (adj * out * (1.0 - out),)

    return Var(tape, out, (a,), vjp, "sigmoid")


def logaddexp(a, b):
    """Elementwise two-term log-sum-exp, the stable core of softplus."""
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        out = logaddexp(ap, bp)
        wa = sigmoid(sub(ap, bp))
        t1 = mul(at, wa) if at is not None else None
        t2 = mul(bt, sub(1.0, wa)) if bt is not None else None
        return DualVar(out, _tadd(t1, t2))
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = np.logaddexp(a.value, b.value)

    def vjp(adj):
        wa = _expit(a.value - b.value)
        return (
            _unbroadcast(adj * wa, a.value.shape),
            _unbroadcast(adj * (1.0 - wa), b.value.shape),
        )

    return Var(tape, out, (a, b), vjp, "logaddexp")


def logsumexp(a, axis=None):
    if _is_dual(a):
        ap, at = _split(a)
        out = logsumexp(ap, axis)
        if at is None:
            return DualVar(out, None)
        if axis is None:
            soft = exp(sub(ap, out))
        else:
            keep = list(ap.value.shape)
            keep[axis] = 1
            soft = exp(sub(ap, reshape(out, tuple(keep))))
        return DualVar(out, vsum(mul(soft, at), axis))
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) if axis is not None else m.reshape(())
    out = out + np.log(np.sum(np.exp(av - m), axis=axis))

    def vjp(adj):
        lse = out if axis is None else np.expand_dims(out, axis)
        g = np.exp(av - lse)
        a_adj = adj if axis is None else np.expand_dims(adj, axis)
        return (a_adj * g,)

    return Var(tape, out, (a,), vjp, "logsumexp")


def vsum(a, axis=None):
    if _is_dual(a):
        ap, at = _split(a)
        return DualVar(vsum(ap, axis), vsum(at, axis) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    out = np.sum(a.value, axis=axis)

    def vjp(adj):
        if axis is None:
            return (np.broadcast_to(adj, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(adj, axis), a.value.shape).copy(),)

    return Var(tape, out, (a,), vjp, "sum")


def mean(a, axis=None):
    shape = a.value.shape if isinstance(a, (Var, DualVar)) else np.shape(a)
    n = int(np.prod(shape)) if axis is None else shape[axis]
    return mul(vsum(a, axis), 1.0 / n)


def dot(a, b):
    return vsum(mul(a, b))


def tanh(a):
    # 2*sigmoid(2x) - 1, composed from the primitive set
    return sub(mul(sigmoid(mul(a, 2.0)), 2.0), 1.0)


def logsigmoid(a):
    # log sigmoid(x) = -logaddexp(0, -x), stable for large |x|
    return neg(logaddexp(0.0, neg(a)))


def take(a, indices):
    """Fancy indexing of a 1-D vector."""
    idx = np.asarray(indices, dtype=np.intp)
    if _is_dual(a):
        ap, at = _split(a)
        return DualVar(take(ap, idx), take(at, idx) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    if a.value.ndim != 1:
        raise EngineError("take expects a 1-D operand")
    out = a.value[idx]

    def vjp(adj):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, adj)
        return (z,)

    return Var(tape, out, (a,), vjp, "take")


def take_rows(a, indices):
    """Row gather from a 2-D matrix."""
    idx = np.asarray(indices, dtype=np.intp)
    if _is_dual(a):
        ap, at = _split(a)
        return DualVar(take_rows(ap, idx), take_rows(at, idx) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    if a.value.ndim != 2:
        raise EngineError("take_rows expects a 2-D operand")
    out = a.value[idx]

    def vjp(adj):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, adj)
        return (z,)

    return Var(tape, out, (a,), vjp, "take_rows")


def segment_sum(a, segment_ids, num_segments: int):
    """Sum rows (or entries) of ``a`` into ``num_segments`` buckets."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if _is_dual(a):
        ap, at = _split(a)
        tan = segment_sum(at, seg, num_segments) if at is not None else None
        return DualVar(segment_sum(ap, seg, num_segments), tan)
    tape = _tape_of(a)
    a = _lift(a, tape)
    av = a.value
    shape = (num_segments,) + av.shape[1:]
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, seg, av)

    def vjp(adj):
        return (adj[seg],)

    return Var(tape, out, (a,), vjp, "segment_sum")


def reshape(a, shape):
    shape = tuple(shape)
    if _is_dual(a):
        ap, at = _split(a)
        return DualVar(reshape(ap, shape), reshape(at, shape) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    old = a.value.shape
    out = a.value.reshape(shape)

    def vjp(adj):
        return (adj.reshape(old),)

    return Var(tape, out, (a,), vjp, "reshape")


def transpose(a):
    if _is_dual(a):
        ap, at = _split(a)
        return DualVar(transpose(ap), transpose(at) if at is not None else None)
    tape = _tape_of(a)
    a = _lift(a, tape)
    if a.value.ndim != 2:
        raise EngineError("transpose expects a 2-D operand")
    out = a.value.T.copy()

    def vjp(adj):
        return (adj.T.copy(),)

    return Var(tape, out, (a,), vjp, "transpose")


# ---------------------------------------------------------------------------
# differentiation entry points
# ---------------------------------------------------------------------------


def _as_values_and_segments(theta) -> tuple[np.ndarray, tuple[Segment, ...]]:
    if isinstance(theta, ParamVector):
        return theta.values, theta.segments
    arr = np.asarray(theta, dtype=np.float64)
    return arr, (Segment("params", 0, arr.shape[0]),)


def _backward(out: Var, wrt: Var) -> np.ndarray:
    adjoints: dict[int, np.ndarray] = {out.index: np.ones((), dtype=np.float64)}
    for node in reversed(out.tape.nodes[: out.index + 1]):
        if node.vjp is None:
            continue  # leaves and constants keep their accumulated adjoints
        adj = adjoints.pop(node.index, None)
        if adj is None:
            continue
        adj = np.broadcast_to(adj, node.value.shape)
        for parent, contrib in zip(node.parents, node.vjp(adj)):
            if parent.vjp is None and parent.op == "const" and parent.index != wrt.index:
                continue
            prev = adjoints.get(parent.index)
            adjoints[parent.index] = contrib if prev is None else prev + contrib
    res = adjoints.get(wrt.index)
    if res is None:
        return np.zeros_like(wrt.value)
    return np.asarray(res, dtype=np.float64)


def _check_scalar_output(out, tape: Tape) -> Var:
    if isinstance(out, DualVar):
        out = out.primal
    if not isinstance(out, Var):
        raise EngineError("objective did not return an engine variable; build it from engine primitives")
    if out.tape is not tape:
        raise EngineError("objective returned a variable from a foreign tape")
    if out.value.shape != ():
        raise EngineError(f"objective must be scalar, got shape {out.value.shape}")
    return out


def grad(objective, theta) -> Gradient:
    """Exact reverse-mode gradient of ``objective`` at ``theta``.

    ``objective`` receives the parameter vector as a :class:`Var` and must
    return a scalar built from engine primitives.
    """
    values, segments = _as_values_and_segments(theta)
    tape = Tape()
    th = Var(tape, values, (), None, "leaf")
    out = _check_scalar_output(objective(th), tape)
    return Gradient(_backward(out, th), segments)


def value(objective, theta) -> float:
    """Evaluate an engine objective at ``theta`` (fresh throwaway tape)."""
    values, _ = _as_values_and_segments(theta)
    tape = Tape()
    th = Var(tape, values, (), None, "leaf")
    out = _check_scalar_output(objective(th), tape)
    return float(out.value)


def grad_and_value(objective, theta) -> tuple[Gradient, float]:
    """Gradient and objective value from a single recorded forward pass."""
    values, segments = _as_values_and_segments(theta)
    tape = Tape()
    th = Var(tape, values, (), None, "leaf")
    out = _check_scalar_output(objective(th), tape)
    return Gradient(_backward(out, th), segments), float(out.value)


@dataclass(frozen=True)
class HvpResult:
    """Hessian-vector product plus the mode that produced it."""

    values: np.ndarray
    mode: str


def hvp(objective, theta, v, mode: str = "fd", fd_step: float = 1e-4) -> HvpResult:
    """Hessian-vector product ``H(theta) @ v`` of a scalar objective.

    ``mode='fd'`` uses central differences of the exact gradient with step
    ``fd_step * (1 + ||theta||)``; ``mode='exact'`` differentiates the
    directional derivative recorded in dual arithmetic.
    """
    values, _ = _as_values_and_segments(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != values.shape:
        raise EngineError(f"direction shape {v.shape} does not match parameters {values.shape}")
    if not np.all(np.isfinite(v)):
        raise EngineError("direction vector must be finite")

    if mode == "fd":
        vnorm = float(np.linalg.norm(v))
        if vnorm == 0.0:
            return HvpResult(np.zeros_like(values), "fd")
        u = v / vnorm
        h = fd_step * (1.0 + float(np.linalg.norm(values)))
        g_plus = grad(objective, values + h * u).values
        g_minus = grad(objective, values - h * u).values
        return HvpResult(vnorm * (g_plus - g_minus) / (2.0 * h), "fd")

    if mode == "exact":
        tape = Tape()
        th = Var(tape, values, (), None, "leaf")
        tv = constant(tape, v)
        out = objective(DualVar(th, tv))
        if not isinstance(out, DualVar):
            raise EngineError("objective did not propagate dual values; build it from engine primitives")
        _check_scalar_output(out, tape)
        if out.tangent is None:
            return HvpResult(np.zeros_like(values), "exact")
        return HvpResult(_backward(out.tangent, th), "exact")

    raise EngineError(f"unknown hvp mode {mode!r}")


def finite_diff_grad(objective, theta, h: float = 1e-5) -> Gradient:
    """Central-difference gradient oracle, entry k = (f(x+h e_k) - f(x-h e_k)) / 2h."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    values, segments = _as_values_and_segments(theta)
    g = np.zeros_like(values)
    probe = values.copy()
    for k in range(values.shape[0]):
        orig = probe[k]
        probe[k] = orig + h
        f_plus = value(objective, probe)
        probe[k] = orig - h
        f_minus = value(objective, probe)
        probe[k] = orig
        g[k] = (f_plus - f_minus) / (2.0 * h)
    return Gradient(g, segments)
