"""Configuration parsing, per-level defaults and validation."""

import pytest

from budgetlm.config import parse_config_text, parse_space_text
from budgetlm.errors import ConfigError


class TestParseConfig:
    def test_minimal_word_config_is_fully_defaulted(self):
        config = parse_config_text("data.path = train.txt\nmodel.budget = 100000\n")
        assert config.level == "word"
        assert config["train.batch_size"] == 64
        assert config["train.unroll"] == 35
        assert config["train.checkpoint_interval"] == 100
        assert config["train.beta2"] == 0.999
        assert config["train.epsilon"] == 1e-9
        assert config["train.max_epochs"] == 39
        assert config["model.shared_embeddings"] is True
        assert config["model.coupling"] == "capped"

    def test_char_level_defaults(self):
        config = parse_config_text(
            "data.path = data.bin\ndata.level = char\nmodel.budget = 200000\n")
        assert config["train.batch_size"] == 128
        assert config["train.unroll"] == 50
        assert config["train.checkpoint_interval"] == 400
        assert config["train.beta2"] == 0.99
        assert config["train.epsilon"] == 1e-5
        assert config["train.max_epochs"] == 14
        assert config["model.shared_embeddings"] is False
        assert config["model.input_embedding_ratio"] == 1.0

    def test_malformed_line_names_line_number(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("foo\n")

    def test_unknown_key_names_line_number(self):
        with pytest.raises(ConfigError, match="line 2.*model.width"):
            parse_config_text("model.budget = 1000\nmodel.width = 3\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("model.budget = 1000\nmodel.depth = large\n")

    def test_intra_layer_drop_on_rhn_rejected(self):
        text = ("model.budget = 1000\nmodel.cell = rhn\n"
                "model.intra_layer_drop = 0.2\n")
        with pytest.raises(ConfigError, match="intra"):
            parse_config_text(text)

    def test_unshared_with_ratio_rejected(self):
        text = ("model.budget = 1000\nmodel.shared_embeddings = false\n"
                "model.input_embedding_ratio = 0.5\n")
        with pytest.raises(ConfigError, match="ratio|input_embedding_ratio"):
            parse_config_text(text)

    def test_char_level_with_valid_path_rejected(self):
        text = ("data.level = char\ndata.valid_path = v.bin\nmodel.budget = 1000\n")
        with pytest.raises(ConfigError, match="90/5/5"):
            parse_config_text(text)

    def test_missing_budget(self):
        with pytest.raises(ConfigError, match="budget"):
            parse_config_text("data.path = x\n")

    def test_comments_and_blank_lines(self):
        config = parse_config_text(
            "# a comment\n\nmodel.budget = 5000  # trailing comment\n")
        assert config["model.budget"] == 5000

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("model.budget = 1\nmodel.budget = 2\n")

    def test_effective_text_roundtrips(self):
        config = parse_config_text(
            "model.budget = 7000\nmodel.depth = 3\ntrain.learning_rate = 0.01\n")
        again = parse_config_text(config.to_text())
        assert again.values == config.values

    def test_replace_revalidates(self):
        config = parse_config_text("model.budget = 5000\n")
        with pytest.raises(ConfigError):
            config.replace({"model.state_drop": 1.5})


class TestParseSpace:
    def test_basic_space(self):
        space = parse_space_text(
            "learning_rate.low = 1e-4\nlearning_rate.high = 0.1\n"
            "learning_rate.scale = log\n"
            "state_drop.low = 0\nstate_drop.high = 0.8\n")
        assert space.names == ("learning_rate", "state_drop")
        assert space.dimensions[0].scale == "log"
        assert space.dimensions[1].scale == "linear"

    def test_missing_bound_rejected(self):
        with pytest.raises(ConfigError, match="missing"):
            parse_space_text("learning_rate.low = 1e-4\n")

    def test_bad_attribute_rejected(self):
        with pytest.raises(ConfigError):
            parse_space_text("learning_rate.minimum = 1e-4\n")

    def test_empty_space_rejected(self):
        with pytest.raises(ConfigError, match="no dimensions"):
            parse_space_text("# nothing\n")
