"""Scoring: batch-1 coverage of a split, mean-field or Monte-Carlo
dropout, and rendering of mean NLL as perplexity or bits per character.

Mean-field evaluation runs the mask-free network, which equals the
dropout expectation because masks use inverted scaling. Monte-Carlo
evaluation runs K independent passes with freshly sampled masks and
mixes the predictive distributions in probability space before taking
the log; averaging log-probabilities instead would not be a mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import make_windows
from .errors import ContractError
from .model import LanguageModel, sample_masks
from .threads import single_thread_blas


@dataclass
class EvalResult:
    split: str
    token_count: int
    mean_nll: float
    ppl: float
    bpc: float
    mode: str
    mc_samples: int
    batch_size: int = 1


def nll_to_ppl(nll: float) -> float:
    """Perplexity: exp of the mean per-token NLL (natural log)."""
    if not (nll >= 0 and math.isfinite(nll)):
        raise ContractError(f"nll must be finite and non-negative, got {nll}")
    return math.exp(nll)


def nll_to_bpc(nll: float) -> float:
    """Bits per character: mean per-token NLL divided by ln 2."""
    if not (nll >= 0 and math.isfinite(nll)):
        raise ContractError(f"nll must be finite and non-negative, got {nll}")
    return nll / math.log(2.0)


def _nll_pass(model: LanguageModel, ids: np.ndarray, batch_size: int,
              unroll: int, sample_seed: int | None) -> np.ndarray:
    """One full pass over the stream from a zero state; returns the
    per-target NLL in stream order (row-major over batch segments)."""
    windows = make_windows(ids, batch_size, unroll, include_partial=True)
    state = model.zero_state(batch_size)
    pieces = []
    with ad.no_grad(), single_thread_blas():
        for inputs, targets, k in windows:
            plan = None
            mode = "meanfield"
            if sample_seed is not None and model.config.has_dropout():
                plan = sample_masks(model.config, model.sizing, batch_size,
                                    inputs.shape[1],
                                    seed=(sample_seed * 1_000_003 + k) & 0x7FFFFFFFFFFFFFFF)
                mode = "mc"
            out = model.forward_window(inputs, targets, state, plan, mode)
            state = out.final_state
            pieces.append(out.nll)
    return np.concatenate([p.reshape(p.shape[0], -1) for p in pieces], axis=1).reshape(-1)


def evaluate(model: LanguageModel, ids: np.ndarray, batch_size: int = 1,
             mode: str = "meanfield", mc_samples: int = 16, seed: int = 0,
             split: str = "test", unroll: int = 128) -> EvalResult:
    """Score a stream; batch size 1 covers every target token exactly once."""
    if mode not in ("meanfield", "mc"):
        raise ContractError(f"mode must be 'meanfield' or 'mc', got {mode!r}")
    if mode == "mc" and mc_samples < 1:
        raise ContractError("mc_samples must be >= 1")
    ids = np.asarray(ids)
    if ids.size < 2:
        raise ContractError("stream too short to score")
    if model.config.vocab_size is not None and ids.max() >= model.config.vocab_size:
        raise ContractError(
            f"stream contains id {int(ids.max())} outside the checkpoint "
            f"vocabulary of size {model.config.vocab_size}")

    if mode == "meanfield" or not model.config.has_dropout() or mc_samples == 1:
        # without dropout every MC sample is the identical network; the
        # degenerate mixture is computed directly to keep bit-equality
        sample_seed = None if mode == "meanfield" or not model.config.has_dropout() else seed
        nll = _nll_pass(model, ids, batch_size, unroll, sample_seed)
        mean_nll = float(nll.sum() / nll.size)
        count = nll.size
    else:
        mixture = None
        count = 0
        for k in range(mc_samples):
            nll_k = _nll_pass(model, ids, batch_size, unroll, seed * 7919 + k)
            probs = np.exp(-nll_k)
            if mixture is None:
                mixture = probs
                count = probs.size
            else:
                mixture += (probs - mixture) / (k + 1)  # running mean, exact for ties
        mean_nll = float(-np.log(mixture).sum() / count)

    return EvalResult(split=split, token_count=count, mean_nll=mean_nll,
                      ppl=nll_to_ppl(mean_nll), bpc=nll_to_bpc(mean_nll),
                      mode=mode, mc_samples=(mc_samples if mode == "mc" else 0),
                      batch_size=batch_size)
