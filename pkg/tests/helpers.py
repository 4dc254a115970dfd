"""Shared fixtures: deterministic corpora and small trained models."""

import numpy as np

from budgetlm.model import LanguageModel, ModelConfig
from budgetlm.trainer import OptimizerConfig, TrainSchedule, train

# cycle of 25 distinct tokens: every token has a unique successor, so the
# sequence is learnable from bigrams alone and a scoring pass needs no
# warm-up context to be exact
CYCLE_VOCAB = 25


def cyclic_ids(length: int = 1000) -> np.ndarray:
    return np.arange(length, dtype=np.int64) % CYCLE_VOCAB


def memorization_config(**overrides) -> ModelConfig:
    # budget chosen so the solved hidden size is exactly 64
    kwargs = dict(budget=35_000, vocab_size=CYCLE_VOCAB, cell_kind="lstm",
                  coupling="capped", depth=1)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def quick_schedule(**overrides) -> TrainSchedule:
    kwargs = dict(batch_size=10, unroll=20, checkpoint_interval=100,
                  zero_state_prob=0.0, max_steps=100, valid_cap=2000)
    kwargs.update(overrides)
    return TrainSchedule(**kwargs)


def train_memorizer(max_steps: int = 150, seed: int = 1, **model_overrides):
    ids = cyclic_ids()
    model = LanguageModel(memorization_config(**model_overrides), seed=seed)
    result = train(model, ids, ids, quick_schedule(max_steps=max_steps),
                   OptimizerConfig(learning_rate=3e-3), seed=seed)
    return model, result, ids


def english_like_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic word-salad prose: real spellings, Zipf-ish word
    frequencies, sentence casing and punctuation. Stands in for a natural
    text corpus in sandboxed runs; character structure is learnable while
    the order-0 byte entropy stays near natural English."""
    words = (
        "the of and to in is was he for it with as his on be at by had not "
        "are but from or have an they which one you were her all she there "
        "would their we him been has when who will more no if out so said "
        "what up its about into than them can only other new some could time "
        "these two may then do first any my now such like our over man me "
        "even most made after also did many before must through back years "
        "where much your way well down should because each just those people "
        "how too little state good very make world still own see men work "
        "long get here between both life being under never day same another "
        "know while last might us great old year off come since against go "
        "came right used take three states himself few house use during "
        "without again place around however home small found mrs thought "
        "went say part once general high upon school every keep seemed "
        "country really nothing doubt certain morning ship window quite "
        "voice example brought winter garden silver yellow branch journey "
        "question history problem moment evening picture"
    ).split()
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = (1.0 / ranks) / np.sum(1.0 / ranks)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        sentence_len = int(rng.integers(4, 14))
        picks = rng.choice(len(words), size=sentence_len, p=probs)
        sentence = " ".join(words[i] for i in picks)
        sentence = sentence[0].upper() + sentence[1:] + (
            "." if rng.random() > 0.15 else "?")
        out.append(sentence)
        size += len(sentence) + 1
    text = " ".join(out)
    lines = []
    pos = 0
    while pos < len(text):
        lines.append(text[pos:pos + 72])
        pos += 72
    return "\n".join(lines).encode("ascii")[:n_bytes]


def unigram_entropy_bits(ids: np.ndarray) -> float:
    """Order-0 entropy of the empirical token distribution, in bits."""
    counts = np.bincount(np.asarray(ids))
    probs = counts[counts > 0] / counts.sum()
    return float(-(probs * np.log2(probs)).sum())
