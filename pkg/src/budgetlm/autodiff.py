"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is 64-bit and single-threaded per tape: small models make
determinism and gradient-check fidelity worth more than speed. A tape is
rebuilt for every training window; operations executed outside any tape
(or under `no_grad`) compute values only.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray

_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("op_kind", "inputs", "output", "backward_rule")

    def __init__(self, op_kind, inputs, output, backward_rule):
        self.op_kind = op_kind
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class _Block:
    """Gradient contribution confined to a sub-index of the input, so the
    accumulator only touches the affected rows."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


class Tape:
    """Ordered operation record; every entry's inputs precede it."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)


class no_grad:
    """Context that suppresses recording even when a tape is active."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _emit(op_kind: str, inputs: tuple[Tensor, ...], values: Array,
          backward_rule: Callable[[Array], tuple]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(values, requires_grad=True)
        out.tape = tape
        tape.entries.append(_Entry(op_kind, inputs, out, backward_rule))
        return out
    return Tensor(values)


def backward(loss: Tensor, retain_intermediate_grads: bool = False) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor that
    requires gradients and is reachable from `loss`.

    Gradients add across multiple uses of the same tensor. Unless
    `retain_intermediate_grads` is set, the gradient of each recorded
    output is released as soon as its entry has been visited, so peak
    memory stays close to the forward pass; leaf gradients always persist.
    """
    if loss.values.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    tape = loss.tape
    if tape is None or not tape.entries:
        raise ContractError("loss was not recorded on a tape (empty tape)")
    loss.grad = np.ones((), dtype=np.float64)
    for entry in reversed(tape.entries):
        out_grad = entry.output.grad
        if out_grad is None:
            continue
        grads = entry.backward_rule(out_grad)
        for inp, g in zip(entry.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if isinstance(g, _Block):
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.values)
                inp.grad[g.index] += g.values  # touch only the sliced block
            elif inp.grad is None:
                # first contribution: copy instead of zeros+add (rules may
                # return views or share arrays between inputs)
                inp.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                inp.grad += g
        if not retain_intermediate_grads:
            entry.output.grad = None  # all consumers already visited


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), av @ bv, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-dim bias ((..., n) + (n,))."""
    if a.shape == b.shape:
        def rule(g):
            return g, g
        return _emit("add", (a, b), a.values + b.values, rule)
    if b.values.ndim == 1 and a.values.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]

        def rule(g):
            gb = g.reshape(-1, n).sum(axis=0) if b.requires_grad else None
            return g, gb

        return _emit("add", (a, b), a.values + b.values, rule)
    raise DimensionError(f"add: incompatible shapes {a.shape} + {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul: incompatible shapes {a.shape} * {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        ga = g * bv if a.requires_grad else None
        gb = g * av if b.requires_grad else None
        return ga, gb

    return _emit("elementwise_mul", (a, b), av * bv, rule)


def elementwise_min(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum. Ties route the gradient to the first argument."""
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_min: incompatible shapes {a.shape}, {b.shape}")
    first = a.values <= b.values

    def rule(g):
        ga = g * first if a.requires_grad else None
        gb = g * ~first if b.requires_grad else None
        return ga, gb

    return _emit("elementwise_min", (a, b), np.minimum(a.values, b.values), rule)


def sigmoid(x: Tensor) -> Tensor:
    # clipping at +-60 only changes values already saturated to 0/1
    out = 1.0 / (1.0 + np.exp(-np.clip(x.values, -60.0, 60.0)))

    def rule(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, rule)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (x,), out, rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty input list")
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)
    ndim = len(base)

    def _piece(g, i):
        index = [slice(None)] * ndim
        index[axis] = slice(offsets[i], offsets[i + 1])
        return g[tuple(index)]

    def rule(g):
        return tuple(
            _piece(g, i) if t.requires_grad else None for i, t in enumerate(tensors)
        )

    return _emit("concat", tuple(tensors), np.concatenate([t.values for t in tensors], axis=axis), rule)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= x.values.ndim or stop > x.shape[axis] or start < 0 or start >= stop:
        raise DimensionError(f"slice: [{start}:{stop}] on axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        return (_Block(index, g),)

    # forward value is a view; intermediate buffers are never mutated
    return _emit("slice", (x,), x.values[index], rule)


def sum_over_axis(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.full(shape, g, dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum_over_axis", (x,), x.values.sum(axis=axis), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    def rule(g):
        return (g * factor,)

    return _emit("scale", (x,), x.values * factor, rule)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")

    def rule(g):
        return (g.T,)

    return _emit("transpose", (x,), x.values.T.copy(), rule)


def lookup(table: Tensor, ids: Array) -> Tensor:
    """Row gather: out[k] = table[ids[k]]. Backward scatter-adds into the table."""
    if table.values.ndim != 2:
        raise DimensionError(f"lookup: table must be a matrix, got shape {table.shape}")
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError(f"lookup: ids must be a vector, got shape {ids.shape}")

    def rule(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("lookup", (table,), table.values[ids], rule)


def softmax_cross_entropy(logits: Tensor, target_ids: Array) -> Tensor:
    """Per-row negative log-likelihood (natural log) of the target class."""
    if logits.values.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    target_ids = np.asarray(target_ids)
    n, v = logits.shape
    if target_ids.shape != (n,):
        raise DimensionError(
            f"softmax_cross_entropy: targets shape {target_ids.shape} does not match {n} rows")
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = (np.log(denom[:, 0]) + zmax[:, 0]) - z[rows, target_ids]

    def rule(g):
        probs = ez / denom
        probs[rows, target_ids] -= 1.0
        probs *= g[:, None]
        return (probs,)

    return _emit("softmax_cross_entropy", (logits,), nll, rule)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": elementwise_mul,
    "elementwise_min": elementwise_min,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "concat": concat,
    "slice": slice_axis,
    "sum_over_axis": sum_over_axis,
    "scale": scale,
    "softmax_cross_entropy": softmax_cross_entropy,
    # extensions used by the model assembly
    "transpose": transpose,
    "lookup": lookup,
}


def record(op_kind: str, *args, **kwargs) -> Tensor:
    """Apply a named operation, recording it on the active tape."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    return op(*args, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    tolerance: float
    epsilon: float
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:.0e})"


def finite_difference_check(f: Callable[[], Tensor],
                            params: dict[str, Tensor],
                            epsilon: float = 1e-4,
                            tolerance: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients of a scalar map against central differences.

    `f` must be deterministic (fix seeds and masks before calling) and
    return a scalar Tensor built from `params`. For every coordinate of
    every parameter the analytic gradient is compared against
    (f(p+eps) - f(p-eps)) / (2 eps); the relative error uses
    max(|analytic|, |numeric|, 1) as denominator so near-zero gradients
    are judged absolutely.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = f()
        if not np.isfinite(loss.values):
            raise NumericError("finite_difference_check: non-finite loss value")
        backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }

    def value() -> float:
        with no_grad():
            v = float(f().values)
        if not math.isfinite(v):
            raise NumericError("finite_difference_check: non-finite probe value")
        return v

    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = value()
            flat[i] = orig - epsilon
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1.0)
            if err > worst:
                worst = err
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
