"""Optimisation loop: Adam without first-moment averaging, truncated
backpropagation with carried state, zero-state injection, plateau
learning-rate decay and periodic checkpointing.

A run is single-threaded and fully determined by (seed, config); reloads
from a checkpoint continue bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .corpus import make_windows
from .errors import CheckpointError, ContractError, NumericError, TrainingDiverged
from .model import LanguageModel, ModelConfig, sample_masks
from .threads import single_thread_blas


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-9
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ContractError("betas must lie in [0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ContractError("epsilon must be positive and weight_decay non-negative")


@dataclass
class TrainSchedule:
    batch_size: int = 64
    unroll: int = 35
    checkpoint_interval: int = 100
    decay_factor: float = 0.1
    patience: int = 30
    zero_state_prob: float = 0.01
    max_epochs: int = 39
    max_steps: int | None = None
    valid_cap: int = 20_000


class AdamOptimizer:
    """Adam with decoupled-from-nothing L2: the decay term joins the raw
    gradient before the moment updates, biases exempt."""

    def __init__(self, params: dict[str, "ad.Tensor"], config: OptimizerConfig,
                 bias_names: frozenset[str] = frozenset()):
        config.validate()
        self.params = params
        self.config = config
        self.bias_names = bias_names
        self.learning_rate = config.learning_rate
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bias_corr1 = 1.0 - b1 ** self.t
        bias_corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if cfg.weight_decay > 0.0 and name not in self.bias_names:
                g = g + cfg.weight_decay * p.values
            self.m[name] = (1.0 - b1) * g + b1 * self.m[name]
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bias_corr1
            v_hat = self.v[name] / bias_corr2
            p.values -= self.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        out["t"] = np.array(float(self.t))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"m.{name}"], copy=True)
            self.v[name] = np.array(arrays[f"v.{name}"], copy=True)
        self.t = int(arrays["t"])


class LrDecayController:
    """Decays the learning rate after `patience` consecutive checkpoints
    with no new best; the counter restarts after each decay."""

    def __init__(self, patience: int = 30, factor: float = 0.1):
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stale = 0

    def update(self, valid_nll: float) -> bool:
        if valid_nll < self.best:
            self.best = valid_nll
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return True
        return False


def maybe_decay_lr(history: Sequence[float], learning_rate: float,
                   patience: int = 30, factor: float = 0.1) -> float:
    """Learning rate after replaying a checkpoint-validation history."""
    if not history:
        raise ContractError("history must be nonempty")
    controller = LrDecayController(patience=patience, factor=factor)
    lr = learning_rate
    for value in history:
        if controller.update(value):
            lr *= factor
    return lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"BLMCKPT1"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]   # optimizer moments plus scheduler/carry records
    step: int
    lr: float
    best_valid_nll: float
    rng_state: dict
    config: dict
    vocab: list


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.offset}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]


def _read_record(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    if rank > 8:
        raise CheckpointError(f"implausible tensor rank {rank} at offset {r.offset}")
    dims = tuple(r.u64() for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    values = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(dims).copy()
    return name, values


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            _write_record(fh, name, arr)
        fh.write(struct.pack("<I", len(ckpt.state)))
        for name, arr in ckpt.state.items():
            _write_record(fh, name, arr)
        fh.write(struct.pack("<Q", ckpt.step))
        fh.write(struct.pack("<d", ckpt.lr))
        fh.write(struct.pack("<d", ckpt.best_valid_nll))
        rng_blob = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
        meta_blob = json.dumps({"config": ckpt.config, "vocab": ckpt.vocab},
                               sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    params = dict(_read_record(r) for _ in range(r.u32()))
    state = dict(_read_record(r) for _ in range(r.u32()))
    step = r.u64()
    lr = r.f64()
    best = r.f64()
    rng_state = json.loads(r.take(r.u32()).decode("utf-8"))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    return Checkpoint(params=params, state=state, step=step, lr=lr,
                      best_valid_nll=best, rng_state=rng_state,
                      config=meta["config"], vocab=meta["vocab"])


def model_from_checkpoint(ckpt: Checkpoint) -> LanguageModel:
    model_cfg = ModelConfig(**ckpt.config["model"])
    model = LanguageModel(model_cfg, seed=0)
    model.load_values(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    train_nll: float
    valid_nll: float
    lr: float
    wall_s: float = 0.0


LOG_HEADER = "step\ttrain_nll\tvalid_nll\tlr\twall_s"


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    lines = [LOG_HEADER]
    for row in rows:
        lines.append(f"{row.step}\t{row.train_nll!r}\t{row.valid_nll!r}"
                     f"\t{row.lr!r}\t{row.wall_s:.3f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class TrainResult:
    best_valid_nll: float          # full validation pass at the best checkpoint
    best_valid_nll_capped: float   # capped-slice value that selected it
    best_step: int
    final_step: int
    log: list[LogRow]
    checkpoint: Checkpoint
    injection_count: int = 0
    diverged: bool = False


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, step]))


def _mean_field_nll(model: LanguageModel, ids: np.ndarray, unroll: int) -> float:
    """Zero-state, batch-1, mask-free scoring used for checkpoint decisions."""
    windows = make_windows(ids, 1, min(unroll, max(1, len(ids) - 1)), include_partial=True)
    state = model.zero_state(1)
    total = 0.0
    count = 0
    with ad.no_grad():
        for inputs, targets, _ in windows:
            out = model.forward_window(inputs, targets, state, mode="meanfield")
            state = out.final_state
            total += float(out.nll.sum())
            count += out.nll.size
    return total / count


def _snapshot(model: LanguageModel, opt: AdamOptimizer, controller: LrDecayController,
              state: list, cursor: int, step: int, best_capped: float,
              seed: int, config_snapshot: dict, vocab: list) -> Checkpoint:
    state_arrays = opt.state_arrays()
    state_arrays["sched.stale"] = np.array(float(controller.stale))
    state_arrays["sched.best"] = np.array(controller.best)
    state_arrays["sched.cursor"] = np.array(float(cursor))
    for layer, layer_state in enumerate(state):
        for j, arr in enumerate(layer_state):
            state_arrays[f"carry.layer{layer}.{j}"] = np.array(arr, copy=True)
    return Checkpoint(
        params=model.snapshot_values(),
        state=state_arrays,
        step=step,
        lr=opt.learning_rate,
        best_valid_nll=best_capped,
        rng_state={"seed": seed, "scheme": "per-step"},
        config=config_snapshot,
        vocab=vocab,
    )


def train(model: LanguageModel,
          train_ids: np.ndarray,
          valid_ids: np.ndarray,
          schedule: TrainSchedule,
          opt_config: OptimizerConfig,
          seed: int,
          run_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          config_snapshot: dict | None = None,
          vocab: list | None = None) -> TrainResult:
    """Run the full loop and return the best checkpoint.

    State carries across windows (and epoch wraps); before every window
    each batch row is independently reset to zeros with probability
    `zero_state_prob`. Every `checkpoint_interval` steps the capped
    validation slice is scored mean-field at batch size 1, checkpoints
    are written, and the plateau decay rule is applied. The recorded
    best checkpoint is rescored on the full validation set at the end.
    """
    config = model.config
    windows = make_windows(train_ids, schedule.batch_size, schedule.unroll)
    n_windows = len(windows)
    max_steps = schedule.max_steps or schedule.max_epochs * n_windows
    opt = AdamOptimizer(model.parameters(), opt_config, model.bias_names())
    controller = LrDecayController(schedule.patience, schedule.decay_factor)
    state = model.zero_state(schedule.batch_size)
    cursor = 0
    step = 0
    best_capped = math.inf
    best_ckpt: Checkpoint | None = None
    best_step = 0
    injections = 0
    log: list[LogRow] = []
    config_snapshot = config_snapshot or {"model": _model_config_dict(config)}
    vocab = vocab if vocab is not None else []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_values(ckpt.params)
        opt.load_state_arrays(ckpt.state)
        opt.learning_rate = ckpt.lr
        controller.stale = int(ckpt.state["sched.stale"])
        controller.best = float(ckpt.state["sched.best"])
        cursor = int(ckpt.state["sched.cursor"])
        step = ckpt.step
        best_capped = ckpt.best_valid_nll
        seed = int(ckpt.rng_state["seed"])
        state = []
        for layer in range(len(model.cells)):
            parts = []
            j = 0
            while f"carry.layer{layer}.{j}" in ckpt.state:
                parts.append(np.array(ckpt.state[f"carry.layer{layer}.{j}"], copy=True))
                j += 1
            state.append(tuple(parts))

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    valid_slice = np.asarray(valid_ids)[: schedule.valid_cap]
    interval_nll_sum = 0.0
    interval_tokens = 0
    t0 = time.perf_counter()

    def checkpoint_now() -> Checkpoint:
        return _snapshot(model, opt, controller, state, cursor, step,
                         best_capped, seed, config_snapshot, vocab)

    with single_thread_blas():
        while step < max_steps:
            step += 1
            rng = _step_rng(seed, step)
            reset_rows = np.nonzero(rng.random(schedule.batch_size)
                                    < schedule.zero_state_prob)[0]
            if reset_rows.size:
                injections += int(reset_rows.size)
                for layer_state in state:
                    for arr in layer_state:
                        arr[reset_rows] = 0.0
            plan = None
            if config.has_dropout():
                mask_seed = int(rng.integers(0, 2 ** 62))
                plan = sample_masks(config, model.sizing, schedule.batch_size,
                                    schedule.unroll, seed=mask_seed)
            inputs, targets, _ = windows[cursor]
            cursor = (cursor + 1) % n_windows
            with Tape():
                out = model.forward_window(inputs, targets, state, plan, "train")
                backward(out.loss)
            opt.step()
            opt.zero_grads()
            state = out.final_state
            interval_nll_sum += float(out.nll.sum())
            interval_tokens += out.nll.size

            if step % schedule.checkpoint_interval == 0 or step == max_steps:
                valid_nll = _mean_field_nll(model, valid_slice, schedule.unroll)
                train_nll = interval_nll_sum / max(1, interval_tokens)
                interval_nll_sum = 0.0
                interval_tokens = 0
                if not math.isfinite(valid_nll):
                    if run_dir is not None:
                        write_log(log, run_dir / "train_log.tsv")
                    raise TrainingDiverged(
                        f"validation loss is not finite at step {step}; "
                        "last checkpoint preserved")
                improved = valid_nll < best_capped
                if improved:
                    best_capped = valid_nll
                if controller.update(valid_nll):
                    opt.learning_rate *= schedule.decay_factor
                if improved:
                    best_ckpt = checkpoint_now()
                    best_ckpt.best_valid_nll = best_capped
                    best_step = step
                    if run_dir is not None:
                        save_checkpoint(best_ckpt, run_dir / "best.ckpt")
                log.append(LogRow(step=step, train_nll=train_nll, valid_nll=valid_nll,
                                  lr=opt.learning_rate,
                                  wall_s=time.perf_counter() - t0))
                if run_dir is not None:
                    save_checkpoint(checkpoint_now(), run_dir / "last.ckpt")
                    write_log(log, run_dir / "train_log.tsv")

        if best_ckpt is None:
            best_ckpt = checkpoint_now()
            best_step = step
        model.load_values(best_ckpt.params)
        full_valid = _mean_field_nll(model, np.asarray(valid_ids), schedule.unroll)
    if run_dir is not None:
        write_log(log, run_dir / "train_log.tsv")
    return TrainResult(
        best_valid_nll=full_valid,
        best_valid_nll_capped=best_capped if math.isfinite(best_capped) else full_valid,
        best_step=best_step,
        final_step=step,
        log=log,
        checkpoint=best_ckpt,
        injection_count=injections,
    )


def _model_config_dict(config: ModelConfig) -> dict:
    return {
        "budget": config.budget,
        "vocab_size": config.vocab_size,
        "cell_kind": config.cell_kind,
        "coupling": config.coupling,
        "depth": config.depth,
        "input_embedding_ratio": config.input_embedding_ratio,
        "input_drop": config.input_drop,
        "intra_layer_drop": config.intra_layer_drop,
        "output_drop": config.output_drop,
        "state_drop": config.state_drop,
        "state_drop_variant": config.state_drop_variant,
        "shared_embeddings": config.shared_embeddings,
    }
