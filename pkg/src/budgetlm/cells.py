"""Recurrent cell mathematics: LSTM with three gate couplings, and the
recurrent highway cell, behind one pluggable interface.

The LSTM cell state update comes in three flavours:

    untied:  c = f * c_prev + i * j
    tied:    c = f * c_prev + (1 - f) * j          (no input-gate block)
    capped:  c = f * c_prev + min(1 - f, i) * j

The tied and capped variants keep the cell state inside [-1, 1] whenever
it starts there. The highway cell runs `micro_layers` transform/carry
updates per time step, with the external input entering only the first:

    s_l = tanh(W_h x [l=1] + R_h s_{l-1} + b_h) * t_l + s_{l-1} * (1 - t_l)
    t_l = sigmoid(W_t x [l=1] + R_t s_{l-1} + b_t)

A cell exposes (input_contrib, step, count_params, zero_state); anything
with that surface can be registered by name as an additional cell kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

COUPLINGS = ("untied", "tied", "capped")


def _check_coupling(coupling: str) -> None:
    if coupling not in COUPLINGS:
        raise ContractError(f"unknown gate coupling {coupling!r}; expected one of {COUPLINGS}")


def _ones_like(t: Tensor, cache: dict) -> Tensor:
    ones = cache.get(t.shape)
    if ones is None:
        ones = Tensor(np.ones(t.shape))
        cache[t.shape] = ones
    return ones


def combine_cell_state(coupling: str, c_prev: Tensor, f: Tensor,
                       i: Tensor | None, j: Tensor,
                       _ones_cache: dict | None = None) -> Tensor:
    """Next cell state under the chosen gate coupling.

    Ties in the capped minimum route the gradient to the (1 - f) branch.
    """
    _check_coupling(coupling)
    for name, t in (("f", f), ("j", j)):
        if t.shape != c_prev.shape:
            raise DimensionError(f"combine_cell_state: {name} shape {t.shape} != {c_prev.shape}")
    cache = _ones_cache if _ones_cache is not None else {}
    retained = ad.elementwise_mul(f, c_prev)
    if coupling == "untied":
        if i is None or i.shape != c_prev.shape:
            raise DimensionError("combine_cell_state: untied coupling needs a conforming input gate")
        return ad.add(retained, ad.elementwise_mul(i, j))
    one_minus_f = ad.add(_ones_like(f, cache), ad.scale(f, -1.0))
    if coupling == "tied":
        return ad.add(retained, ad.elementwise_mul(one_minus_f, j))
    if i is None or i.shape != c_prev.shape:
        raise DimensionError("combine_cell_state: capped coupling needs a conforming input gate")
    gate = ad.elementwise_min(one_minus_f, i)
    return ad.add(retained, ad.elementwise_mul(gate, j))


def count_cell_params(cell_kind: str, coupling: str, input_dim: int,
                      hidden_dim: int, micro_layers: int = 1) -> int:
    """Trainable scalars in one cell instance."""
    e, h, L = input_dim, hidden_dim, micro_layers
    if min(e, h, L) < 1:
        raise ContractError("dimensions must be positive")
    if cell_kind == "lstm":
        _check_coupling(coupling)
        gates = 3 if coupling == "tied" else 4
        return gates * (e * h + h * h + h)
    if cell_kind == "rhn":
        return 2 * (e * h) + L * 2 * (h * h + h)
    raise ContractError(f"unknown cell kind {cell_kind!r}")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class _Fused:
    """Per-window concatenations of gate blocks; gradients fan back out."""

    wx: Tensor            # (in, G*h) input weights
    bias: Tensor          # (G*h,)
    rec: list[Tensor]     # recurrent weights, one per micro-layer (LSTM: one)
    rec_bias: list[Tensor]


class LstmCell:
    """Standard gated memory cell with a configurable state coupling."""

    kind = "lstm"

    def __init__(self, input_dim: int, hidden_dim: int, coupling: str = "capped"):
        _check_coupling(coupling)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.coupling = coupling
        self.gates = ("f", "o", "j") if coupling == "tied" else ("i", "f", "o", "j")
        self._ones: dict = {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        e, h = self.input_dim, self.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {}
        for g in self.gates:
            shapes[f"W_{g}"] = (e, h)
            shapes[f"R_{g}"] = (h, h)
            shapes[f"b_{g}"] = (h,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        # forget bias +1 eases early gradient flow; the rest uniform(+-1/sqrt(h))
        bound = 1.0 / math.sqrt(self.hidden_dim)
        params = {}
        for name, shape in self.param_shapes().items():
            values = _uniform(rng, shape, bound)
            if name == "b_f":
                values = np.ones(shape)
            params[name] = Tensor(values, requires_grad=True)
        return params

    def count_params(self) -> int:
        return count_cell_params("lstm", self.coupling, self.input_dim, self.hidden_dim)

    def zero_state(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        h = self.hidden_dim
        return (np.zeros((batch_size, h)), np.zeros((batch_size, h)))

    def begin_window(self, params: dict[str, Tensor]) -> _Fused:
        return _Fused(
            wx=ad.concat([params[f"W_{g}"] for g in self.gates], axis=1),
            bias=ad.concat([params[f"b_{g}"] for g in self.gates], axis=0),
            rec=[ad.concat([params[f"R_{g}"] for g in self.gates], axis=1)],
            rec_bias=[],
        )

    def input_contrib(self, fused: _Fused, x: Tensor) -> Tensor:
        """Input-side preactivations for a whole window, bias included."""
        return ad.add(ad.matmul(x, fused.wx), fused.bias)

    def step(self, fused: _Fused, x_contrib: Tensor, state: tuple[Tensor, Tensor],
             state_mask: Tensor | None = None,
             candidate_mask: Tensor | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        h_prev, c_prev = state
        h = self.hidden_dim
        h_in = ad.elementwise_mul(h_prev, state_mask) if state_mask is not None else h_prev
        pre = ad.add(ad.matmul(h_in, fused.rec[0]), x_contrib)
        # sigmoid gates are laid out contiguously ahead of the candidate, so
        # one activation call covers them all
        n_sig = len(self.gates) - 1
        sig = ad.sigmoid(ad.slice_axis(pre, 1, 0, n_sig * h))
        parts = {
            g: ad.slice_axis(sig, 1, k * h, (k + 1) * h)
            for k, g in enumerate(self.gates[:-1])
        }
        i_gate = parts.get("i")
        f_gate = parts["f"]
        o_gate = parts["o"]
        j = ad.tanh(ad.slice_axis(pre, 1, n_sig * h, (n_sig + 1) * h))
        if candidate_mask is not None:
            j = ad.elementwise_mul(j, candidate_mask)
        c = combine_cell_state(self.coupling, c_prev, f_gate, i_gate, j, self._ones)
        out = ad.elementwise_mul(o_gate, ad.tanh(c))
        return out, (out, c)


class RhnCell:
    """Recurrent highway cell: a stack of transform/carry micro-layers."""

    kind = "rhn"

    def __init__(self, input_dim: int, hidden_dim: int, micro_layers: int = 1):
        if micro_layers < 1:
            raise ContractError("micro_layers must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.micro_layers = micro_layers
        self._ones: dict = {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        e, h = self.input_dim, self.hidden_dim
        shapes = {"W_h": (e, h), "W_t": (e, h)}
        for l in range(self.micro_layers):
            shapes[f"l{l}.R_h"] = (h, h)
            shapes[f"l{l}.R_t"] = (h, h)
            shapes[f"l{l}.b_h"] = (h,)
            shapes[f"l{l}.b_t"] = (h,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        bound = 1.0 / math.sqrt(self.hidden_dim)
        params = {}
        for name, shape in self.param_shapes().items():
            values = _uniform(rng, shape, bound)
            if name.endswith("b_t"):
                values = np.ones(shape)  # transform bias +1, mirroring the forget gate
            params[name] = Tensor(values, requires_grad=True)
        return params

    def count_params(self) -> int:
        return count_cell_params("rhn", "untied", self.input_dim, self.hidden_dim,
                                 self.micro_layers)

    def zero_state(self, batch_size: int) -> tuple[np.ndarray]:
        return (np.zeros((batch_size, self.hidden_dim)),)

    def begin_window(self, params: dict[str, Tensor]) -> _Fused:
        return _Fused(
            wx=ad.concat([params["W_h"], params["W_t"]], axis=1),
            bias=Tensor(np.zeros(2 * self.hidden_dim)),
            rec=[ad.concat([params[f"l{l}.R_h"], params[f"l{l}.R_t"]], axis=1)
                 for l in range(self.micro_layers)],
            rec_bias=[ad.concat([params[f"l{l}.b_h"], params[f"l{l}.b_t"]], axis=0)
                      for l in range(self.micro_layers)],
        )

    def input_contrib(self, fused: _Fused, x: Tensor) -> Tensor:
        return ad.matmul(x, fused.wx)

    def step(self, fused: _Fused, x_contrib: Tensor, state: tuple[Tensor],
             state_mask: Tensor | None = None,
             candidate_mask: Tensor | None = None) -> tuple[Tensor, tuple[Tensor]]:
        (s_prev,) = state
        h = self.hidden_dim
        s = ad.elementwise_mul(s_prev, state_mask) if state_mask is not None else s_prev
        for l in range(self.micro_layers):
            pre = ad.add(ad.matmul(s, fused.rec[l]), fused.rec_bias[l])
            if l == 0:
                pre = ad.add(pre, x_contrib)
            cand = ad.tanh(ad.slice_axis(pre, 1, 0, h))
            if candidate_mask is not None:
                cand = ad.elementwise_mul(cand, candidate_mask)
            t_gate = ad.sigmoid(ad.slice_axis(pre, 1, h, 2 * h))
            carry = ad.add(_ones_like(t_gate, self._ones), ad.scale(t_gate, -1.0))
            s = ad.add(ad.elementwise_mul(cand, t_gate), ad.elementwise_mul(s, carry))
        return s, (s,)


CELL_KINDS: dict[str, type] = {"lstm": LstmCell, "rhn": RhnCell}


def register_cell(name: str, factory: type) -> None:
    """Extension point: any class with the cell surface can be plugged in."""
    for attr in ("input_contrib", "step", "count_params", "zero_state"):
        if not hasattr(factory, attr):
            raise ContractError(f"cell factory lacks required attribute {attr!r}")
    CELL_KINDS[name] = factory


def make_cell(kind: str, input_dim: int, hidden_dim: int, *,
              coupling: str = "capped", micro_layers: int = 1):
    if kind == "lstm":
        return LstmCell(input_dim, hidden_dim, coupling)
    if kind == "rhn":
        return RhnCell(input_dim, hidden_dim, micro_layers)
    try:
        return CELL_KINDS[kind](input_dim, hidden_dim)
    except KeyError:
        raise ContractError(f"unknown cell kind {kind!r}") from None
