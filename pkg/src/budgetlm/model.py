"""Model assembly: embeddings, stacked cells with additive skip
connections, optional down-projection, shared output embedding, four
dropout sites, and parameter-budget sizing.

Sizes are never specified directly. A configuration carries a total
trainable-parameter budget, a depth and an input embedding ratio r; the
hidden size is the largest h whose full model still fits the budget,
with embedding size e = max(1, floor(r*h)) and a down-projection present
exactly when e < h.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import COUPLINGS, count_cell_params, make_cell
from .errors import ContractError, DimensionError, SizingError

MODES = ("train", "meanfield", "mc")
STATE_DROP_VARIANTS = ("variational", "recurrent", "none")


@dataclass
class ModelConfig:
    budget: int
    vocab_size: int | None = None
    cell_kind: str = "lstm"
    coupling: str = "capped"
    depth: int = 1
    input_embedding_ratio: float = 1.0
    input_drop: float = 0.0
    intra_layer_drop: float = 0.0
    output_drop: float = 0.0
    state_drop: float = 0.0
    state_drop_variant: str = "variational"
    shared_embeddings: bool = True

    def validate(self) -> None:
        if self.vocab_size is not None and self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.budget < 1:
            raise ContractError("budget must be positive")
        if not 0.0 < self.input_embedding_ratio <= 1.0:
            raise ContractError("input_embedding_ratio must lie in (0, 1]")
        for name in ("input_drop", "intra_layer_drop", "output_drop", "state_drop"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ContractError(f"{name} must lie in [0, 1)")
        if self.state_drop_variant not in STATE_DROP_VARIANTS:
            raise ContractError(f"state_drop_variant must be one of {STATE_DROP_VARIANTS}")
        if self.cell_kind == "lstm" and self.coupling not in COUPLINGS:
            raise ContractError(f"coupling must be one of {COUPLINGS}")
        if self.cell_kind == "rhn" and self.intra_layer_drop != 0.0:
            raise ContractError("intra-layer dropout does not apply to highway cells; "
                                "only the recurrent state passes between micro-layers")
        if not self.shared_embeddings and self.input_embedding_ratio != 1.0:
            raise ContractError("unshared embeddings force input_embedding_ratio = 1 "
                                "(no down-projection)")

    def has_dropout(self) -> bool:
        return any(getattr(self, n) > 0.0 for n in
                   ("input_drop", "intra_layer_drop", "output_drop", "state_drop"))


@dataclass(frozen=True)
class SizingSolution:
    embedding_dim: int
    hidden_dim: int
    down_projection_present: bool
    realized_param_count: int


def _embedding_dim(ratio: float, hidden: int) -> int:
    # tiny epsilon absorbs float noise in ratio*h at integer boundaries
    return max(1, math.floor(ratio * hidden + 1e-9))


def parameter_total(config: ModelConfig, hidden: int) -> int:
    """Full-model trainable parameter count at a candidate hidden size."""
    v = config.vocab_size
    if v is None:
        raise ContractError("vocab_size must be bound before sizing")
    e = _embedding_dim(config.input_embedding_ratio, hidden)
    total = v * e * (1 if config.shared_embeddings else 2)
    total += v  # output bias
    if e < hidden:
        total += hidden * e  # down-projection, no bias
    if config.cell_kind == "rhn":
        total += count_cell_params("rhn", config.coupling, e, hidden, config.depth)
    else:
        for layer in range(config.depth):
            width = e if layer == 0 else hidden
            total += count_cell_params(config.cell_kind, config.coupling, width, hidden)
    return total


def solve_sizing(config: ModelConfig) -> SizingSolution:
    """Largest hidden size whose realized model still fits the budget."""
    config.validate()
    budget = config.budget
    if parameter_total(config, 1) > budget:
        raise SizingError(
            f"budget {budget} is below the minimum {parameter_total(config, 1)} "
            f"for this configuration", minimum_budget=parameter_total(config, 1))
    hi = 1
    while parameter_total(config, hi) <= budget:
        hi *= 2
    lo = hi // 2  # total(lo) <= budget < total(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if parameter_total(config, mid) <= budget:
            lo = mid
        else:
            hi = mid
    h = lo
    e = _embedding_dim(config.input_embedding_ratio, h)
    return SizingSolution(
        embedding_dim=e,
        hidden_dim=h,
        down_projection_present=e < h,
        realized_param_count=parameter_total(config, h),
    )


# ---------------------------------------------------------------------------
# dropout plans
# ---------------------------------------------------------------------------

class DropoutPlan:
    """Sampled masks for one window, t-major to match the forward layout.

    Per-step masks (input, intra-layer, output) are independent draws for
    every time step; the state mask is drawn once per layer and reused at
    every step of the window. All masks scale surviving units by
    1/(1-rate). Entries for zero rates are None, which the forward pass
    treats as an exact identity.
    """

    def __init__(self, config: ModelConfig, sizing: SizingSolution,
                 batch_size: int, unroll: int, seed: int):
        self.batch_size = batch_size
        self.unroll = unroll
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF]))
        n = unroll * batch_size
        e, h = sizing.embedding_dim, sizing.hidden_dim
        n_layers = 1 if config.cell_kind == "rhn" else config.depth

        def draw(shape, rate):
            if rate <= 0.0:
                return None
            keep = rng.random(shape) >= rate
            return keep.astype(np.float64) / (1.0 - rate)

        self.input = draw((n, e), config.input_drop)
        self.intra = [draw((n, h), config.intra_layer_drop) for _ in range(n_layers - 1)]
        self.out_combined = draw((n, h), config.output_drop)
        self.out_projected = (draw((n, e), config.output_drop)
                              if sizing.down_projection_present else None)
        if config.state_drop_variant == "none":
            self.state = [None] * n_layers
        else:
            self.state = [draw((batch_size, h), config.state_drop) for _ in range(n_layers)]

    def step_rows(self, t: int) -> slice:
        return slice(t * self.batch_size, (t + 1) * self.batch_size)

    def input_mask_at(self, t: int) -> np.ndarray | None:
        return None if self.input is None else self.input[self.step_rows(t)]

    def intra_mask_at(self, boundary: int, t: int) -> np.ndarray | None:
        m = self.intra[boundary]
        return None if m is None else m[self.step_rows(t)]

    def output_mask_at(self, t: int, projected: bool = False) -> np.ndarray | None:
        m = self.out_projected if projected else self.out_combined
        return None if m is None else m[self.step_rows(t)]

    def state_mask(self, layer: int) -> np.ndarray | None:
        return self.state[layer]


def sample_masks(config: ModelConfig, sizing: SizingSolution, batch_size: int,
                 unroll: int, seed: int) -> DropoutPlan:
    return DropoutPlan(config, sizing, batch_size, unroll, seed)


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

@dataclass
class WindowOutput:
    nll: np.ndarray            # (B, T) per-token negative log-likelihood
    loss: Tensor               # scalar mean NLL per token, on the tape
    final_state: list          # detached per-layer state arrays


class LanguageModel:
    """Embeddings, stacked cells, skip sum, projection and output layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        if config.vocab_size is None:
            raise ContractError("vocab_size must be bound before building a model")
        self.config = config
        self.sizing = solve_sizing(config)
        e, h = self.sizing.embedding_dim, self.sizing.hidden_dim
        if config.cell_kind == "rhn":
            self.cells = [make_cell("rhn", e, h, micro_layers=config.depth)]
        else:
            self.cells = [
                make_cell(config.cell_kind, e if layer == 0 else h, h,
                          coupling=config.coupling)
                for layer in range(config.depth)
            ]
        self._params: dict[str, Tensor] = {}
        self._bias_names: set[str] = set()
        self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, 0]))
        v = self.config.vocab_size
        e, h = self.sizing.embedding_dim, self.sizing.hidden_dim
        self._params["embedding"] = Tensor(
            rng.uniform(-1, 1, size=(v, e)) / math.sqrt(e), requires_grad=True)
        if not self.config.shared_embeddings:
            self._params["output_embedding"] = Tensor(
                rng.uniform(-1, 1, size=(v, e)) / math.sqrt(e), requires_grad=True)
        if self.sizing.down_projection_present:
            self._params["projection"] = Tensor(
                rng.uniform(-1, 1, size=(h, e)) / math.sqrt(h), requires_grad=True)
        self._params["output_bias"] = Tensor(np.zeros(v), requires_grad=True)
        self._bias_names.add("output_bias")
        for layer, cell in enumerate(self.cells):
            for name, tensor in cell.init_params(rng).items():
                full = f"layer{layer}.{name}"
                self._params[full] = tensor
                if name.split(".")[-1].startswith("b_"):
                    self._bias_names.add(full)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def bias_names(self) -> frozenset[str]:
        return frozenset(self._bias_names)

    def count_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._params):
            missing = set(self._params) ^ set(values)
            raise ContractError(f"parameter names do not match the architecture: {sorted(missing)}")
        for name, arr in values.items():
            p = self._params[name]
            if arr.shape != p.values.shape:
                raise ContractError(f"parameter {name} has shape {arr.shape}, "
                                    f"expected {p.values.shape}")
            p.values = np.array(arr, dtype=np.float64, copy=True)

    def snapshot_values(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    # -- state --------------------------------------------------------------

    def zero_state(self, batch_size: int) -> list:
        return [cell.zero_state(batch_size) for cell in self.cells]

    def _layer_params(self, layer: int) -> dict[str, Tensor]:
        prefix = f"layer{layer}."
        return {name[len(prefix):]: p for name, p in self._params.items()
                if name.startswith(prefix)}

    # -- forward ------------------------------------------------------------

    def forward_window(self, inputs: np.ndarray, targets: np.ndarray, state: list,
                       plan: DropoutPlan | None = None,
                       mode: str = "train") -> WindowOutput:
        """Score one window; masks apply only in train/mc modes.

        Mean-field mode runs the identity network, which equals the
        dropout expectation because masks use inverted scaling.
        """
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        inputs = np.asarray(inputs)
        targets = np.asarray(targets)
        if inputs.shape != targets.shape or inputs.ndim != 2:
            raise DimensionError(f"inputs {inputs.shape} and targets {targets.shape} "
                                 "must be equal-shaped (B, T) arrays")
        batch, unroll = inputs.shape
        masked = mode != "meanfield"
        if masked and plan is None:
            if self.config.has_dropout():
                raise ContractError(f"mode={mode!r} requires a dropout plan")
            masked = False
        if len(state) != len(self.cells):
            raise DimensionError(f"state has {len(state)} layers, model has {len(self.cells)}")

        e, h = self.sizing.embedding_dim, self.sizing.hidden_dim
        variational = self.config.state_drop_variant == "variational"
        n = batch * unroll

        x = ad.lookup(self._params["embedding"], inputs.T.reshape(-1))  # t-major (T*B, e)
        if masked and plan.input is not None:
            x = ad.elementwise_mul(x, Tensor(plan.input))

        combined: Tensor | None = None
        layer_input = x
        new_states: list = []
        for layer, cell in enumerate(self.cells):
            expected = cell.zero_state(batch)
            for got, want in zip(state[layer], expected):
                if np.shape(got) != want.shape:
                    raise DimensionError(
                        f"layer {layer} state shape {np.shape(got)} != {want.shape}")
            fused = cell.begin_window(self._layer_params(layer))
            contrib = cell.input_contrib(fused, layer_input)
            smask = cmask = None
            if masked and plan.state_mask(layer) is not None:
                mask_tensor = Tensor(plan.state_mask(layer))
                if variational:
                    smask = mask_tensor
                else:
                    cmask = mask_tensor
            st = tuple(Tensor(np.asarray(a)) for a in state[layer])
            outs = []
            for t in range(unroll):
                xc = ad.slice_axis(contrib, 0, t * batch, (t + 1) * batch)
                out, st = cell.step(fused, xc, st, state_mask=smask, candidate_mask=cmask)
                outs.append(out)
            new_states.append(tuple(np.array(s.values, copy=True) for s in st))
            layer_flat = ad.concat(outs, axis=0)
            combined = layer_flat if combined is None else ad.add(combined, layer_flat)
            if layer < len(self.cells) - 1:
                nxt = layer_flat
                if masked and plan.intra[layer] is not None:
                    nxt = ad.elementwise_mul(nxt, Tensor(plan.intra[layer]))
                layer_input = nxt

        out = combined
        if masked and plan.out_combined is not None:
            out = ad.elementwise_mul(out, Tensor(plan.out_combined))
        if self.sizing.down_projection_present:
            out = ad.matmul(out, self._params["projection"])
            if masked and plan.out_projected is not None:
                out = ad.elementwise_mul(out, Tensor(plan.out_projected))
        output_table = self._params.get("output_embedding", self._params["embedding"])
        logits = ad.add(ad.matmul(out, ad.transpose(output_table)),
                        self._params["output_bias"])
        nll_flat = ad.softmax_cross_entropy(logits, targets.T.reshape(-1))
        loss = ad.scale(ad.sum_over_axis(nll_flat), 1.0 / n)
        nll = nll_flat.values.reshape(unroll, batch).T.copy()
        return WindowOutput(nll=nll, loss=loss, final_state=new_states)
