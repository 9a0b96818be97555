"""
Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every primitive in execution order; each recorded node keeps
its value and, per parent, the vector-Jacobian product closure. Backprop walks
the record in reverse, so topological order is the recording order.
"""

import logging
import weakref
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from csst.core.config.settings import settings
from csst.core.errors import NumericError, ShapeError
from csst.numerics.params import ParamStore, Tensor

logger = logging.getLogger(__name__)

VJP = Callable[[Tensor], Tensor]


class Var:
    """Handle to one recorded node."""

    __slots__ = ("tape", "index", "value", "parents", "op", "name", "__weakref__")

    def __init__(self, tape: "Tape", value: Tensor, parents: Tuple[Tuple["Var", VJP], ...], op: str,
                 name: Optional[str] = None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.op = op
        self.name = name
        self.index = tape._append(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, index={self.index})"

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __neg__(self) -> "Var":
        return scale(self, -1.0)


class Tape:
    """Computation record: ordered primitives with their input nodes.

    Nodes are held weakly; a Var keeps its parents and its tape alive, so a
    step's graph is freed by refcount as soon as its last Var is dropped.
    """

    def __init__(self):
        self.nodes: List[weakref.ref] = []
        self.disconnected: List[str] = []

    def _append(self, var: Var) -> int:
        self.nodes.append(weakref.ref(var))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def constant(self, value, name: Optional[str] = None) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64), (), "constant", name)

    def leaf(self, value: Tensor, name: str) -> Var:
        return Var(self, value, (), "leaf", name)

    def watch(self, params: ParamStore) -> Dict[str, Var]:
        """Register every parameter as a differentiable leaf."""
        return {name: self.leaf(value, name) for name, value in params.items()}

    def gradient(self, loss: Var, leaves: Dict[str, Var]) -> ParamStore:
        """Exact reverse-mode gradients of a scalar `loss` w.r.t. `leaves`."""
        if loss.tape is not self:
            raise NumericError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

        adjoints: Dict[int, Tensor] = {loss.index: np.ones_like(loss.value)}
        for ref in reversed(self.nodes[: loss.index + 1]):
            node = ref()
            if node is None:
                continue
            adj = adjoints.pop(node.index, None) if node.parents else adjoints.get(node.index)
            if adj is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(adj)
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + contribution
                else:
                    adjoints[parent.index] = contribution

        grads: Dict[str, Tensor] = {}
        self.disconnected = []
        for name, leaf in leaves.items():
            g = adjoints.get(leaf.index)
            if g is None:
                self.disconnected.append(name)
                g = np.zeros_like(leaf.value)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}", detail={"param": name})
            grads[name] = np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
        if self.disconnected and settings.debug:
            logger.warning("parameters disconnected from loss: %s", ", ".join(self.disconnected))
        return ParamStore(grads, validate=False)


def grad(loss: Var, leaves: Dict[str, Var]) -> ParamStore:
    """Gradient store for `leaves` (same names and shapes); parameters are not touched."""
    return loss.tape.gradient(loss, leaves)


# ---------------------------------------------------------------------------
# primitives

def _emit(op: str, value: Tensor, parents: Sequence[Tuple[Var, VJP]]) -> Var:
    tape = parents[0][0].tape
    if settings.finite_check and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from {op}", detail={"op": op})
    return Var(tape, value, tuple(parents), op)


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


def add(a: Var, b: Var) -> Var:
    """Elementwise sum; `b` may be a row vector broadcast over the rows of `a`."""
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return _emit("add", value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def mul(a: Var, b: Var) -> Var:
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    av, bv = a.value, b.value
    return _emit("mul", value, [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def scale(a: Var, factor: float) -> Var:
    return _emit("scale", a.value * factor, [(a, lambda g: g * factor)])


def matmul(a: Var, b: Var) -> Var:
    _require(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
             f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    _require(len(parts) > 0, "concat: no inputs")
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def slicer(lo: int, hi: int) -> VJP:
        def vjp(g: Tensor) -> Tensor:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return vjp

    return _emit("concat", value, [(p, slicer(bounds[i], bounds[i + 1])) for i, p in enumerate(parts)])


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def sigmoid(a: Var) -> Var:
    s = expit(a.value)
    return _emit("sigmoid", s, [(a, lambda g: g * s * (1.0 - s))])


def log(a: Var) -> Var:
    _require(bool(np.all(a.value > 0)), "log: non-positive input")
    av = a.value
    return _emit("log", np.log(av), [(a, lambda g: g / av)])


def sum_reduce(a: Var, axis: Optional[int] = None) -> Var:
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.value.sum()), [(a, lambda g: np.broadcast_to(g, shape).copy())])
    ax = axis % a.value.ndim
    return _emit("sum", a.value.sum(axis=ax),
                 [(a, lambda g: np.broadcast_to(np.expand_dims(g, ax), shape).copy())])


def mean(a: Var) -> Var:
    return scale(sum_reduce(a), 1.0 / a.value.size)


def softmax(a: Var) -> Var:
    """Row-wise softmax over the last axis (max-subtracted)."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", p, [(a, lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True)))])


def log_softmax(a: Var) -> Var:
    lse = logsumexp(a.value, axis=-1, keepdims=True)
    out = a.value - lse
    p = np.exp(out)
    return _emit("log_softmax", out, [(a, lambda g: g - p * g.sum(axis=-1, keepdims=True))])


def gather_rows(a: Var, index: np.ndarray) -> Var:
    """Rows `a[index]`; the adjoint scatters back with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    n_rows = a.shape[0]

    def vjp(g: Tensor) -> Tensor:
        out = np.zeros((n_rows,) + g.shape[1:])
        np.add.at(out, index, g)
        return out

    return _emit("gather", a.value[index], [(a, vjp)])


def segment_sum(a: Var, segment_ids: np.ndarray, n_segments: int) -> Var:
    """Sum rows of `a` into `n_segments` buckets; rows are added in their given order."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    _require(segment_ids.shape[0] == a.shape[0], "segment_sum: one id per row required")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segment_ids, a.value)
    return _emit("segment_sum", out, [(a, lambda g: g[segment_ids])])


def l2_normalize(a: Var, eps: float = 1e-12) -> Var:
    """Row-wise unit L2 norm."""
    norms = np.sqrt((a.value ** 2).sum(axis=-1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = a.value / norms
    return _emit("l2_normalize", y,
                 [(a, lambda g: (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms)])


def transpose(a: Var) -> Var:
    _require(a.value.ndim == 2, "transpose: matrix required")
    return _emit("transpose", a.value.T.copy(), [(a, lambda g: g.T)])


def bce_with_logits(z: Var, target: Tensor) -> Var:
    """Elementwise -[t log s(z) + (1-t) log(1-s(z))] evaluated from logits."""
    t = np.asarray(target, dtype=np.float64).reshape(z.shape)
    value = -(t * log_expit(z.value) + (1.0 - t) * log_expit(-z.value))
    s = expit(z.value)
    return _emit("bce_with_logits", value, [(z, lambda g: g * (s - t))])


def cross_entropy(target: Tensor, log_probs: Var) -> Var:
    """Mean over rows of -sum_k q_k log p_k, with `target` a constant distribution."""
    q = np.asarray(target, dtype=np.float64)
    _require(q.shape == log_probs.shape, f"cross_entropy: {q.shape} vs {log_probs.shape}")
    n = q.shape[0]
    value = np.asarray(-(q * log_probs.value).sum() / n)
    return _emit("cross_entropy", value, [(log_probs, lambda g: -g * q / n)])
