"""Optimizer arithmetic, decay schedule, checkpoint format and the loop's
determinism and resumability contracts."""

import math

import numpy as np
import pytest

from budgetlm.autodiff import Tensor
from budgetlm.errors import CheckpointError, NumericError
from budgetlm.model import LanguageModel, ModelConfig
from budgetlm.trainer import (AdamOptimizer, Checkpoint, LrDecayController,
                              OptimizerConfig, TrainSchedule, load_checkpoint,
                              maybe_decay_lr, model_from_checkpoint,
                              save_checkpoint, train)

from helpers import (cyclic_ids, memorization_config, quick_schedule,
                     train_memorizer)


def make_opt(theta, **kwargs):
    cfg = dict(learning_rate=0.1, beta2=0.999, epsilon=1e-9)
    cfg.update(kwargs)
    p = Tensor(np.array([theta]), requires_grad=True)
    opt = AdamOptimizer({"w": p}, OptimizerConfig(**cfg))
    return p, opt


class TestAdam:
    def test_first_step_hand_values(self):
        # bias correction cancels (1 - beta2) exactly: v = 0.001, v_hat = 1,
        # delta = -lr/(1 + eps) = -0.1 up to the 1e-9 epsilon
        p, opt = make_opt(0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.values[0] + 0.1) < 1e-9
        assert abs(opt.v["w"][0] - 0.001) < 1e-18

    def test_constant_gradient_steps_have_magnitude_lr(self):
        # the epsilon term is the only deviation from |delta| == lr, so a
        # tiny epsilon exposes the exact-step property of bias correction
        p, opt = make_opt(0.0, epsilon=1e-12)
        prev = 0.0
        for _ in range(5):
            p.grad = np.array([1.0])
            opt.step()
            delta = p.values[0] - prev
            prev = p.values[0]
            assert abs(delta + 0.1) < 0.1 * 1e-9

    def test_zero_gradient_decays_second_moment(self):
        p, opt = make_opt(1.0)
        p.grad = np.array([1.0])
        opt.step()
        v1 = opt.v["w"][0]
        theta1 = p.values[0]
        p.grad = np.array([0.0])
        opt.step()
        assert opt.v["w"][0] == pytest.approx(0.999 * v1, rel=1e-15)
        assert p.values[0] == theta1  # m = g = 0, no movement

    def test_weight_decay_skips_biases(self):
        params = {"w": Tensor(np.array([2.0]), requires_grad=True),
                  "b_f": Tensor(np.array([2.0]), requires_grad=True)}
        opt = AdamOptimizer(params, OptimizerConfig(learning_rate=0.1, weight_decay=0.5),
                            bias_names=frozenset({"b_f"}))
        params["w"].grad = np.array([0.0])
        params["b_f"].grad = np.array([0.0])
        opt.step()
        assert params["w"].values[0] != 2.0   # decay term moved it
        assert params["b_f"].values[0] == 2.0

    def test_non_finite_gradient_names_parameter(self):
        p, opt = make_opt(0.0)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="'w'"):
            opt.step()


class TestLrDecay:
    def test_improvement_resets_counter(self):
        history = [1.0] + [1.0] * 29 + [0.5]
        assert maybe_decay_lr(history, 1.0) == 1.0

    def test_decay_fires_on_thirtieth(self):
        history = [1.0] + [1.0] * 30
        assert maybe_decay_lr(history, 1.0) == pytest.approx(0.1)

    def test_twenty_nine_do_not_fire(self):
        history = [1.0] + [1.0] * 29
        assert maybe_decay_lr(history, 1.0) == 1.0

    def test_sixty_fire_twice(self):
        history = [1.0] + [1.0] * 60
        assert maybe_decay_lr(history, 1.0) == pytest.approx(0.01)

    def test_controller_counter_semantics(self):
        c = LrDecayController(patience=3)
        assert not c.update(1.0)
        assert not c.update(1.0)
        assert not c.update(1.0)
        assert c.update(1.0)       # third consecutive stale fires
        assert not c.update(1.0)   # counter restarted


class TestCheckpointFormat:
    def _checkpoint(self):
        rng = np.random.default_rng(0)
        return Checkpoint(
            params={"embedding": rng.standard_normal((5, 3)),
                    "layer0.b_f": rng.standard_normal(4)},
            state={"m.embedding": rng.standard_normal((5, 3)),
                   "t": np.array(7.0)},
            step=7, lr=0.002, best_valid_nll=1.25,
            rng_state={"seed": 3, "scheme": "per-step"},
            config={"model": {"budget": 1000}}, vocab=["a", "b"])

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self._checkpoint()
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        for name, arr in ckpt.params.items():
            assert np.array_equal(loaded.params[name], arr)
        for name, arr in ckpt.state.items():
            assert np.array_equal(loaded.state[name], arr)
        assert loaded.step == 7 and loaded.lr == 0.002
        assert loaded.best_valid_nll == 1.25
        assert loaded.vocab == ["a", "b"]
        assert loaded.config == {"model": {"budget": 1000}}

    def test_magic_begins_file(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(self._checkpoint(), path)
        assert path.read_bytes()[:8] == b"BLMCKPT1"

    def test_truncated_file_is_a_load_error(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(self._checkpoint(), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)


class TestTrainingLoop:
    def test_loss_decreases_on_cyclic_corpus(self):
        model, result, ids = train_memorizer(max_steps=150)
        assert result.log[-1].train_nll < math.log(1.5)

    def test_same_seed_bit_identical_logs(self):
        _, r1, _ = train_memorizer(max_steps=60, seed=4)
        _, r2, _ = train_memorizer(max_steps=60, seed=4)
        assert len(r1.log) == len(r2.log)
        for a, b in zip(r1.log, r2.log):
            assert (a.step, a.train_nll, a.valid_nll, a.lr) == \
                   (b.step, b.train_nll, b.valid_nll, b.lr)
        for name in r1.checkpoint.params:
            assert np.array_equal(r1.checkpoint.params[name], r2.checkpoint.params[name])

    def test_zero_state_prob_one_kills_carry(self):
        ids = cyclic_ids()
        model = LanguageModel(memorization_config(), seed=2)
        schedule = quick_schedule(max_steps=20, zero_state_prob=1.0)
        result = train(model, ids, ids, schedule, OptimizerConfig(3e-3), seed=2)
        assert result.injection_count == 20 * schedule.batch_size

    def test_zero_state_prob_zero_never_injects(self):
        ids = cyclic_ids()
        model = LanguageModel(memorization_config(), seed=2)
        result = train(model, ids, ids, quick_schedule(max_steps=20),
                       OptimizerConfig(3e-3), seed=2)
        assert result.injection_count == 0

    def test_resume_equals_uninterrupted(self, tmp_path):
        ids = cyclic_ids()
        schedule_100 = quick_schedule(max_steps=100, checkpoint_interval=10,
                                      zero_state_prob=0.05)
        model_a = LanguageModel(memorization_config(), seed=7)
        full = train(model_a, ids, ids, schedule_100, OptimizerConfig(3e-3), seed=7,
                     run_dir=tmp_path / "full")

        half_dir = tmp_path / "half"
        schedule_50 = quick_schedule(max_steps=50, checkpoint_interval=10,
                                     zero_state_prob=0.05)
        model_b = LanguageModel(memorization_config(), seed=7)
        train(model_b, ids, ids, schedule_50, OptimizerConfig(3e-3), seed=7,
              run_dir=half_dir)

        model_c = LanguageModel(memorization_config(), seed=0)  # params overwritten
        resumed = train(model_c, ids, ids, schedule_100, OptimizerConfig(3e-3), seed=0,
                        resume_from=half_dir / "last.ckpt")
        # the resumed second half must replay the uninterrupted run exactly
        full_tail = [r for r in full.log if r.step > 50]
        resumed_tail = [r for r in resumed.log if r.step > 50]
        assert len(full_tail) == len(resumed_tail) > 0
        for a, b in zip(full_tail, resumed_tail):
            assert (a.step, a.train_nll, a.valid_nll, a.lr) == \
                   (b.step, b.train_nll, b.valid_nll, b.lr)

    def test_run_dir_gets_log_and_checkpoints(self, tmp_path):
        ids = cyclic_ids()
        model = LanguageModel(memorization_config(), seed=1)
        train(model, ids, ids, quick_schedule(max_steps=20, checkpoint_interval=10),
              OptimizerConfig(3e-3), seed=1, run_dir=tmp_path)
        assert (tmp_path / "train_log.tsv").exists()
        assert (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        header = (tmp_path / "train_log.tsv").read_text().splitlines()[0]
        assert header == "step\ttrain_nll\tvalid_nll\tlr\twall_s"

    def test_model_from_checkpoint_rebuilds(self, tmp_path):
        model, result, ids = train_memorizer(max_steps=40)
        path = tmp_path / "best.ckpt"
        save_checkpoint(result.checkpoint, path)
        rebuilt = model_from_checkpoint(load_checkpoint(path))
        assert rebuilt.count_parameters() == model.count_parameters()
        for name, p in model.parameters().items():
            assert np.array_equal(rebuilt.parameters()[name].values, p.values)
