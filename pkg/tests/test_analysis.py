"""Rerun statistics, sensitivity filtering, grid cost and report tables."""

import math

import numpy as np
import pytest

from budgetlm.analysis import (RerunRecord, ReportRow, collect_rows, grid_cost,
                               render_report, rerun_statistics,
                               seed_rerun_stats, sensitivity_neighborhood,
                               stats_to_kv, write_series_tsv)
from budgetlm.errors import ContractError
from budgetlm.tuner import Dimension, HyperparameterSpace, Trial

SPACE = HyperparameterSpace((Dimension("a", 0.0, 1.0), Dimension("b", 0.0, 1.0)))


def records(values):
    return [RerunRecord(seed=i, valid_nll=v, test_nll=v - 0.5)
            for i, v in enumerate(values)]


class TestRerunStatistics:
    def test_hand_computed_fixture(self):
        stats = rerun_statistics(records([60.0, 60.4, 60.8]))
        assert abs(stats.mean_valid - 60.4) < 1e-12
        assert abs(stats.std_valid - 0.4) < 1e-12
        assert abs(stats.mean_gap - 0.5) < 1e-12
        assert abs(stats.std_gap) < 1e-12

    def test_identical_runs_have_zero_stddev(self):
        stats = rerun_statistics(records([2.0, 2.0, 2.0]))
        assert stats.std_valid == 0.0

    def test_z_score_definition(self):
        stats = rerun_statistics(records([60.0, 60.4, 60.8]),
                                 tuner_best_valid=60.4 - 0.4)
        assert abs(stats.z_score + 1.0) < 1e-12

    def test_diverged_runs_excluded_and_flagged(self):
        recs = records([1.0, 1.2]) + [RerunRecord(seed=9, valid_nll=math.nan,
                                                  test_nll=math.nan, diverged=True)]
        stats = rerun_statistics(recs)
        assert stats.n_used == 2 and stats.n_excluded == 1

    def test_driver_catches_exceptions(self):
        def train_fn(seed):
            if seed == 2:
                raise RuntimeError("diverged")
            return RerunRecord(seed=seed, valid_nll=1.0 + seed, test_nll=1.0 + seed)

        recs, stats = seed_rerun_stats(train_fn, [0, 1, 2])
        assert stats.n_excluded == 1
        assert recs[2].diverged

    def test_kv_rendering_roundtrips(self):
        stats = rerun_statistics(records([4.1, 4.2, 4.3]), tuner_best_valid=4.0)
        text = stats_to_kv(stats, level="word")
        assert "z_score" in text and "mean_valid_nll" in text


def make_trial(i, a, b, objective, status="complete"):
    values = {"a": a, "b": b}
    return Trial(id=i, unit=SPACE.encode(values), values=values,
                 status=status, objective=objective)


class TestSensitivity:
    def test_full_window_keeps_everything(self):
        trials = [make_trial(i, x, x, float(i)) for i, x in
                  enumerate(np.linspace(0, 1, 7))]
        result = sensitivity_neighborhood(SPACE, trials, window=1.0)
        assert len(result.kept) == 7

    def test_window_membership_fixture(self):
        trials = [
            make_trial(0, 0.5, 0.5, 1.0),   # the best
            make_trial(1, 0.58, 0.5, 2.0),  # inside +-0.1
            make_trial(2, 0.65, 0.5, 2.0),  # outside
        ]
        result = sensitivity_neighborhood(SPACE, trials, window=0.2)
        kept_ids = {t.id for t in result.kept}
        assert kept_ids == {0, 1}

    def test_filtering_is_idempotent(self):
        rng = np.random.default_rng(5)
        trials = [make_trial(i, *rng.random(2), float(rng.random()))
                  for i in range(40)]
        once = sensitivity_neighborhood(SPACE, trials, window=0.4)
        twice = sensitivity_neighborhood(SPACE, once.kept, window=0.4)
        assert [t.id for t in twice.kept] == [t.id for t in once.kept]

    def test_fraction_within_margin(self):
        trials = [make_trial(0, 0.5, 0.5, 1.0), make_trial(1, 0.52, 0.5, 1.05),
                  make_trial(2, 0.48, 0.5, 9.0)]
        result = sensitivity_neighborhood(SPACE, trials, window=0.2, margin=0.1)
        assert result.fraction_within_margin == pytest.approx(2 / 3)

    def test_series_emitted_per_dimension(self, tmp_path):
        trials = [make_trial(0, 0.5, 0.6, 1.0), make_trial(1, 0.51, 0.61, 1.1)]
        result = sensitivity_neighborhood(SPACE, trials, window=0.3)
        files = write_series_tsv(result, tmp_path)
        assert sorted(p.name for p in files) == [
            "sensitivity_a.tsv", "sensitivity_b.tsv"]
        body = files[0].read_text().splitlines()
        assert body[0] == "value\tvalid_nll"
        assert len(body) == 3

    def test_empty_ledger_rejected(self):
        with pytest.raises(ContractError):
            sensitivity_neighborhood(SPACE, [], window=0.5)


class TestGridCost:
    def test_paper_quoted_cost(self):
        assert grid_cost(6, 5) == 7776

    def test_single_value_grid(self):
        assert grid_cost(1, 11) == 1

    def test_transposed_arguments(self):
        assert grid_cost(5, 6) == 15625

    def test_huge_grid_is_exact(self):
        assert grid_cost(10, 30) == 10 ** 30


class TestReport:
    def test_rendering_uses_table_units(self):
        rows = [ReportRow("lstm", 10_000_000, 1, "word", 4.124, 4.088, "a"),
                ReportRow("lstm", 10_000_000, 2, "word", 4.143, 4.107, "b")]
        text, tsv = render_report(rows)
        assert "61.8" in text and "59.6" in text
        assert rows[0].best_in_group and not rows[1].best_in_group

    def test_char_rows_render_bpc(self):
        rows = [ReportRow("lstm", 27_000_000, 4, "char", 0.897, 0.908, "c")]
        text, _ = render_report(rows)
        assert "1.294" in text

    def test_empty_directory(self, tmp_path):
        assert collect_rows(tmp_path) == []
        text, tsv = render_report([])
        assert "no result records" in text

    def test_collect_skips_malformed_rows(self, tmp_path):
        good = tmp_path / "run_a"
        good.mkdir()
        (good / "result.kv").write_text(
            "model = lstm\nbudget = 1000\ndepth = 1\nlevel = word\n"
            "valid_nll = 4.0\ntest_nll = 3.9\n")
        bad = tmp_path / "run_b"
        bad.mkdir()
        (bad / "result.kv").write_text("model = lstm\n")
        rows = collect_rows(tmp_path)
        assert len(rows) == 1 and rows[0].source == "run_a"

    def test_report_is_deterministic(self, tmp_path):
        rows = [ReportRow("rhn", 100, 5, "word", 4.2, 4.1, "x"),
                ReportRow("lstm", 100, 1, "word", 4.1, 4.0, "y")]
        a = render_report([ReportRow(**vars(r)) for r in rows])
        b = render_report([ReportRow(**vars(r)) for r in rows])
        assert a == b
