"""Line-oriented run configuration: `section.key = value` with per-level
defaults (word and character corpora train under different protocols)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .trainer import OptimizerConfig, TrainSchedule
from .tuner import Dimension, HyperparameterSpace


def _to_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_choice(*choices: str):
    def cast(text: str) -> str:
        if text not in choices:
            raise ValueError(f"expected one of {choices}, got {text!r}")
        return text
    return cast


# key -> (caster, word default, char default); None defaults mean "unset"
SCHEMA: dict[str, tuple] = {
    "data.path": (str, None, None),
    "data.valid_path": (str, None, None),
    "data.test_path": (str, None, None),
    "data.level": (_to_choice("word", "char"), "word", "char"),
    "model.budget": (int, None, None),
    "model.cell": (_to_choice("lstm", "rhn"), "lstm", "lstm"),
    "model.coupling": (_to_choice("untied", "tied", "capped"), "capped", "capped"),
    "model.depth": (int, 1, 1),
    "model.input_embedding_ratio": (float, 1.0, 1.0),
    "model.input_drop": (float, 0.0, 0.0),
    "model.intra_layer_drop": (float, 0.0, 0.0),
    "model.output_drop": (float, 0.0, 0.0),
    "model.state_drop": (float, 0.0, 0.0),
    "model.state_drop_variant": (_to_choice("variational", "recurrent", "none"),
                                 "variational", "variational"),
    "model.shared_embeddings": (_to_bool, True, False),
    "train.batch_size": (int, 64, 128),
    "train.unroll": (int, 35, 50),
    "train.learning_rate": (float, 0.002, 0.002),
    "train.beta2": (float, 0.999, 0.99),
    "train.epsilon": (float, 1e-9, 1e-5),
    "train.weight_decay": (float, 0.0, 0.0),
    "train.checkpoint_interval": (int, 100, 400),
    "train.decay_factor": (float, 0.1, 0.1),
    "train.patience": (int, 30, 30),
    "train.zero_state_prob": (float, 0.01, 0.01),
    "train.max_epochs": (int, 39, 14),
    "train.max_steps": (int, None, None),
    "train.valid_cap": (int, 20_000, 20_000),
    "train.seed": (int, 1, 1),
    "eval.mc_samples": (int, 16, 16),
}


@dataclass
class RunConfig:
    values: dict[str, object]
    explicit: frozenset[str]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def level(self) -> str:
        return self.values["data.level"]

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        return ModelConfig(
            budget=self.values["model.budget"],
            vocab_size=vocab_size,
            cell_kind=self.values["model.cell"],
            coupling=self.values["model.coupling"],
            depth=self.values["model.depth"],
            input_embedding_ratio=self.values["model.input_embedding_ratio"],
            input_drop=self.values["model.input_drop"],
            intra_layer_drop=self.values["model.intra_layer_drop"],
            output_drop=self.values["model.output_drop"],
            state_drop=self.values["model.state_drop"],
            state_drop_variant=self.values["model.state_drop_variant"],
            shared_embeddings=self.values["model.shared_embeddings"],
        )

    def schedule(self) -> TrainSchedule:
        v = self.values
        return TrainSchedule(
            batch_size=v["train.batch_size"], unroll=v["train.unroll"],
            checkpoint_interval=v["train.checkpoint_interval"],
            decay_factor=v["train.decay_factor"], patience=v["train.patience"],
            zero_state_prob=v["train.zero_state_prob"],
            max_epochs=v["train.max_epochs"], max_steps=v["train.max_steps"],
            valid_cap=v["train.valid_cap"])

    def optimizer_config(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(learning_rate=v["train.learning_rate"],
                               beta1=0.0, beta2=v["train.beta2"],
                               epsilon=v["train.epsilon"],
                               weight_decay=v["train.weight_decay"])

    def to_text(self) -> str:
        """Effective configuration; parsing it back reproduces this config."""
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if value is None:
                continue
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, overrides: dict[str, object]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        out = RunConfig(values=merged,
                        explicit=self.explicit | frozenset(overrides))
        _validate(out)
        return out


def _parse_pairs(text: str) -> tuple[dict[str, str], dict[str, int]]:
    pairs: dict[str, str] = {}
    line_of: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} is missing its section")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
        line_of[key] = lineno
    return pairs, line_of


def _validate(config: RunConfig) -> None:
    v = config.values
    if v["model.budget"] is None:
        raise ConfigError("model.budget is required")
    if v["data.level"] == "char" and (v["data.valid_path"] or v["data.test_path"]):
        raise ConfigError("character corpora are one file split 90/5/5; "
                          "remove data.valid_path/data.test_path")
    if v["model.cell"] == "rhn" and "model.intra_layer_drop" in config.explicit:
        raise ConfigError("model.intra_layer_drop does not apply to highway cells; "
                          "only the recurrent state passes between micro-layers")
    if (not v["model.shared_embeddings"]
            and "model.input_embedding_ratio" in config.explicit
            and v["model.input_embedding_ratio"] != 1.0):
        raise ConfigError("unshared embeddings force input_embedding_ratio = 1")
    try:
        config.model_config(vocab_size=None).validate()
        config.optimizer_config().validate()
    except Exception as exc:
        raise ConfigError(str(exc)) from None
    if v["train.batch_size"] < 1 or v["train.unroll"] < 1:
        raise ConfigError("train.batch_size and train.unroll must be positive")
    if v["train.checkpoint_interval"] < 1:
        raise ConfigError("train.checkpoint_interval must be positive")
    if not 0.0 <= v["train.zero_state_prob"] <= 1.0:
        raise ConfigError("train.zero_state_prob must lie in [0, 1]")


def parse_config_text(text: str) -> RunConfig:
    pairs, line_of = _parse_pairs(text)
    for key in pairs:
        if key not in SCHEMA:
            raise ConfigError(f"line {line_of[key]}: unknown key {key!r}")
    level = pairs.get("data.level", "word")
    if level not in ("word", "char"):
        raise ConfigError(f"line {line_of['data.level']}: unknown level {level!r}")
    values: dict[str, object] = {}
    for key, (caster, word_default, char_default) in SCHEMA.items():
        if key in pairs:
            try:
                values[key] = caster(pairs[key])
            except ValueError as exc:
                raise ConfigError(f"line {line_of[key]}: bad value for {key}: {exc}") from None
        else:
            values[key] = char_default if level == "char" else word_default
    config = RunConfig(values=values, explicit=frozenset(pairs))
    _validate(config)
    return config


def parse_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# hyperparameter space files
# ---------------------------------------------------------------------------

_SPACE_FIELDS = ("low", "high", "scale")


def parse_space_text(text: str) -> HyperparameterSpace:
    pairs, line_of = _parse_pairs(text)
    dims: dict[str, dict[str, str]] = {}
    for key, value in pairs.items():
        name, _, attr = key.rpartition(".")
        if attr not in _SPACE_FIELDS:
            raise ConfigError(f"line {line_of[key]}: space keys end in "
                              f"{_SPACE_FIELDS}, got {key!r}")
        dims.setdefault(name, {})[attr] = value
    dimensions = []
    for name, fields in dims.items():
        for needed in ("low", "high"):
            if needed not in fields:
                raise ConfigError(f"space dimension {name!r} is missing {needed!r}")
        try:
            dimensions.append(Dimension(name=name, low=float(fields["low"]),
                                        high=float(fields["high"]),
                                        scale=fields.get("scale", "linear")))
        except (ValueError, Exception) as exc:
            raise ConfigError(f"space dimension {name!r}: {exc}") from None
    if not dimensions:
        raise ConfigError("space file defines no dimensions")
    return HyperparameterSpace(tuple(dimensions))


def parse_space_config(path: str | Path) -> HyperparameterSpace:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read space config {path}: {exc}") from None
    return parse_space_text(text)
