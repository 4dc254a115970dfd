"""Command-line entry points and run-directory persistence.

Every subcommand writes into a fresh run directory (a copy of the
effective configuration plus logs, ledgers and checkpoints), so any
result can be reproduced or re-reported from the directory alone.
Run directories are append-only: rerunning into an existing non-empty
directory is refused. Relative --out paths resolve under the
BUDGETLM_RUN_ROOT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import functools
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (RerunRecord, collect_rows, render_report,
                       rerun_statistics, sensitivity_neighborhood,
                       stats_to_kv, write_series_tsv)
from .autodiff import Tensor, finite_difference_check
from .cells import LstmCell, RhnCell
from .config import RunConfig, parse_config, parse_space_config
from .corpus import Corpus, Vocabulary, build_vocab, load_char_corpus, load_word_corpus
from .errors import BudgetLmError, ConfigError
from .evaluator import evaluate
from .model import LanguageModel, ModelConfig, sample_masks
from .trainer import (OptimizerConfig, TrainSchedule, load_checkpoint,
                      model_from_checkpoint, train)
from .tuner import (HyperparameterSpace, TrialOutcome, TrialTask, read_ledger,
                    run_study, write_ledger)

RUN_ROOT_ENV = "BUDGETLM_RUN_ROOT"

# tuned hyperparameter -> configuration key
HYPERPARAMETER_KEYS = {
    "learning_rate": "train.learning_rate",
    "weight_decay": "train.weight_decay",
    "input_embedding_ratio": "model.input_embedding_ratio",
    "input_drop": "model.input_drop",
    "intra_layer_drop": "model.intra_layer_drop",
    "output_drop": "model.output_drop",
    "state_drop": "model.state_drop",
}


def resolve_out(path: str) -> Path:
    root = os.environ.get(RUN_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def fresh_run_dir(path: str) -> Path:
    out = resolve_out(path)
    if out.exists() and any(out.iterdir()):
        raise BudgetLmError(f"run directory {out} already exists and is not empty; "
                            "run directories are append-only")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_corpus(config: RunConfig) -> Corpus:
    path = config["data.path"]
    if not path:
        raise ConfigError("data.path is required")
    if config.level == "char":
        return load_char_corpus(path)
    return load_word_corpus(path, config["data.valid_path"], config["data.test_path"])


def config_snapshot(config: RunConfig, model_config: ModelConfig) -> dict:
    from .trainer import _model_config_dict
    return {
        "data": {"level": config.level},
        "model": _model_config_dict(model_config),
        "train": {key.split(".", 1)[1]: config[key] for key in (
            "train.batch_size", "train.unroll", "train.learning_rate",
            "train.beta2", "train.epsilon", "train.weight_decay",
            "train.checkpoint_interval", "train.max_epochs", "train.seed")},
    }


def write_kv(path: Path, pairs: dict) -> None:
    lines = [f"{key} = {value}" for key, value in pairs.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_into(config: RunConfig, run_dir: Path | None, seed: int):
    """Shared by train/tune/rerun: build everything, train, return
    (result, corpus, model)."""
    corpus = load_corpus(config)
    if corpus.valid is None:
        raise ConfigError("training needs validation data "
                          "(data.valid_path for word level)")
    model_config = config.model_config(vocab_size=corpus.vocab.size)
    model = LanguageModel(model_config, seed=seed)
    result = train(model, corpus.train.ids, corpus.valid.ids,
                   config.schedule(), config.optimizer_config(), seed=seed,
                   run_dir=run_dir,
                   config_snapshot=config_snapshot(config, model_config),
                   vocab=list(corpus.vocab.id_to_token))
    return result, corpus, model


def _result_kv(config: RunConfig, result, corpus, model, seed: int,
               eval_test: bool = True) -> dict:
    pairs = {
        "model": config["model.cell"],
        "budget": config["model.budget"],
        "depth": config["model.depth"],
        "level": config.level,
        "seed": seed,
        "realized_params": model.sizing.realized_param_count,
        "hidden_dim": model.sizing.hidden_dim,
        "embedding_dim": model.sizing.embedding_dim,
        "valid_nll": repr(result.best_valid_nll),
        "best_step": result.best_step,
        "final_step": result.final_step,
    }
    if eval_test and corpus.test is not None:
        test = evaluate(model, corpus.test.ids, batch_size=1, mode="meanfield",
                        split="test", unroll=config["train.unroll"])
        pairs["test_nll"] = repr(test.mean_nll)
    return pairs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = parse_config(args.config)
    if args.seed is not None:
        config = config.replace({"train.seed": args.seed})
    seed = config["train.seed"]
    run_dir = fresh_run_dir(args.out)
    (run_dir / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    result, corpus, model = _train_into(config, run_dir, seed)
    write_kv(run_dir / "result.kv", _result_kv(config, result, corpus, model, seed))
    print(f"trained {result.final_step} steps; "
          f"best valid nll {result.best_valid_nll:.4f} at step {result.best_step}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    level = ckpt.config.get("data", {}).get("level", "word")
    tokens = list(ckpt.vocab)
    vocab = Vocabulary(
        id_to_token=tuple(tokens),
        unk_id=tokens.index("<unk>") if "<unk>" in tokens else None,
        eos_id=tokens.index("<eos>") if "<eos>" in tokens else None)
    path = Path(args.data)
    if level == "char":
        from .corpus import byte_tokens
        stream = vocab.encode(byte_tokens(path.read_bytes()), args.split, level)
    else:
        from .corpus import word_tokens
        stream = vocab.encode(word_tokens(path.read_text(encoding="utf-8")),
                              args.split, level)
    result = evaluate(model, stream.ids, batch_size=args.batch_size,
                      mode=args.mode, mc_samples=args.mc_samples,
                      seed=args.seed, split=args.split)
    for key in ("split", "token_count", "mean_nll", "ppl", "bpc", "mode",
                "mc_samples", "batch_size"):
        print(f"{key} = {getattr(result, key)}")
    return 0


def _tune_runner(task: TrialTask, base_text: str = "", study_dir: str = "",
                 eval_test: bool = False) -> TrialOutcome:
    """Executed in a worker process; exceptions become failed trials."""
    from .config import parse_config_text
    t0 = time.perf_counter()
    try:
        config = parse_config_text(base_text)
        overrides = {HYPERPARAMETER_KEYS[name]: value
                     for name, value in task.values.items()}
        config = config.replace(overrides)
        run_dir = Path(study_dir) / "runs" / f"trial_{task.trial_id:04d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.cfg").write_text(config.to_text(), encoding="utf-8")
        result, corpus, model = _train_into(config, run_dir, task.seed)
        test_nll = float("nan")
        if eval_test and corpus.test is not None:
            test_nll = evaluate(model, corpus.test.ids, batch_size=1,
                                split="test").mean_nll
        pairs = _result_kv(config, result, corpus, model, task.seed, eval_test=False)
        if not math.isnan(test_nll):
            pairs["test_nll"] = repr(test_nll)
        write_kv(run_dir / "result.kv", pairs)
        return TrialOutcome(objective=result.best_valid_nll, test_nll=test_nll,
                            steps=result.final_step,
                            wall_s=time.perf_counter() - t0)
    except Exception as exc:
        return TrialOutcome(objective=None, wall_s=time.perf_counter() - t0,
                            error=f"{type(exc).__name__}: {exc}")


def cmd_tune(args) -> int:
    config = parse_config(args.config)
    space = parse_space_config(args.space)
    unknown = [n for n in space.names if n not in HYPERPARAMETER_KEYS]
    if unknown:
        raise ConfigError(f"space tunes unknown hyperparameters: {unknown}")
    if (config["model.cell"] == "rhn" and "intra_layer_drop" in space.names):
        raise ConfigError("intra_layer_drop cannot be tuned for highway cells")
    study_dir = fresh_run_dir(args.out)
    (study_dir / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    (study_dir / "space.cfg").write_text(Path(args.space).read_text(encoding="utf-8"),
                                         encoding="utf-8")
    runner = functools.partial(_tune_runner, base_text=config.to_text(),
                               study_dir=str(study_dir), eval_test=args.eval_test)
    map_fn = None
    pool = None
    if args.parallel > 1:
        pool = ProcessPoolExecutor(max_workers=args.parallel)
        map_fn = pool.map
    try:
        result = run_study(space, runner, max_trials=args.trials,
                           parallelism=args.parallel, seed=args.seed,
                           ledger_path=study_dir / "trials.tsv",
                           strategy=args.strategy, map_fn=map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    summary = {"trials": len(result.trials),
               "failed": sum(1 for t in result.trials if t.status == "failed")}
    if result.best is not None:
        summary.update({"best_trial": result.best.id,
                        "best_valid_nll": repr(result.best.objective)})
        for name, value in result.best.values.items():
            summary[f"best.{name}"] = repr(value)
    write_kv(study_dir / "study.kv", summary)
    for key, value in summary.items():
        print(f"{key} = {value}")
    print(f"study directory: {study_dir}")
    return 0


def cmd_rerun(args) -> int:
    config = parse_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out_dir = fresh_run_dir(args.out)
    (out_dir / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    records = []
    level = config.level
    for seed in seeds:
        try:
            run_dir = out_dir / f"seed_{seed}"
            result, corpus, model = _train_into(config, run_dir, seed)
            test_nll = math.nan
            if corpus.test is not None:
                test_nll = evaluate(model, corpus.test.ids, batch_size=1,
                                    split="test").mean_nll
            write_kv(run_dir / "result.kv",
                     _result_kv(config, result, corpus, model, seed))
            records.append(RerunRecord(seed=seed, valid_nll=result.best_valid_nll,
                                       test_nll=test_nll))
        except BudgetLmError as exc:
            print(f"seed {seed} diverged: {exc}", file=sys.stderr)
            records.append(RerunRecord(seed=seed, valid_nll=math.nan,
                                       test_nll=math.nan, diverged=True))
    stats = rerun_statistics(records, tuner_best_valid=args.tuner_best_valid)
    lines = ["seed\tvalid_nll\ttest_nll\tdiverged"]
    lines += [f"{r.seed}\t{r.valid_nll!r}\t{r.test_nll!r}\t{int(r.diverged)}"
              for r in records]
    (out_dir / "reruns.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    text = stats_to_kv(stats, level=level)
    (out_dir / "stats.kv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_sensitivity(args) -> int:
    study_dir = resolve_out(args.study)
    space = parse_space_config(study_dir / "space.cfg")
    trials = read_ledger(study_dir / "trials.tsv", space)
    result = sensitivity_neighborhood(space, trials, window=args.window,
                                      margin=args.margin)
    out_dir = fresh_run_dir(args.out)
    write_series_tsv(result, out_dir)
    pairs = {
        "best_trial": result.best.id,
        "best_valid_nll": repr(result.best.objective),
        "window": args.window,
        "kept": len(result.kept),
        "total": len(trials),
    }
    if result.fraction_within_margin is not None:
        pairs["margin"] = args.margin
        pairs["fraction_within_margin"] = repr(result.fraction_within_margin)
    write_kv(out_dir / "sensitivity.kv", pairs)
    for key, value in pairs.items():
        print(f"{key} = {value}")
    return 0


def cmd_report(args) -> int:
    root = resolve_out(args.root)
    rows = collect_rows(root)
    text, tsv = render_report(rows)
    print(text, end="")
    if args.out:
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        out.with_suffix(".tsv").write_text(tsv, encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference sweep over the cells and the assembled model."""
    rng = np.random.default_rng(0)
    failures = 0

    def check(name, f, params):
        nonlocal failures
        report = finite_difference_check(f, params, epsilon=1e-4, tolerance=1e-4)
        status = "pass" if report.passed else "FAIL"
        print(f"{status}  {name}: max rel error {report.max_rel_error:.2e}")
        failures += 0 if report.passed else 1

    from . import autodiff as ad

    for coupling in ("untied", "tied", "capped"):
        cell = LstmCell(3, 4, coupling)
        params = cell.init_params(rng)
        xs = rng.uniform(-1, 1, (3, 2, 3))

        def f(cell=cell, params=params, xs=xs):
            state = (Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
            fused = cell.begin_window(params)
            total = None
            for t in range(3):
                out, state = cell.step(fused, cell.input_contrib(fused, Tensor(xs[t])), state)
                s = ad.sum_over_axis(out)
                total = s if total is None else ad.add(total, s)
            return total

        check(f"lstm/{coupling} cell (e=3 h=4 T=3)", f, params)

    for depth in (1, 2, 5):
        cell = RhnCell(3, 4, micro_layers=depth)
        params = cell.init_params(rng)
        xs = rng.uniform(-1, 1, (3, 2, 3))

        def f(cell=cell, params=params, xs=xs):
            state = (Tensor(np.zeros((2, 4))),)
            fused = cell.begin_window(params)
            total = None
            for t in range(3):
                out, state = cell.step(fused, cell.input_contrib(fused, Tensor(xs[t])), state)
                s = ad.sum_over_axis(out)
                total = s if total is None else ad.add(total, s)
            return total

        check(f"rhn depth {depth} cell (e=3 h=4 T=3)", f, params)

    for variant in ("variational", "recurrent"):
        config = ModelConfig(budget=450, vocab_size=7, depth=2,
                             input_embedding_ratio=0.6, input_drop=0.3,
                             intra_layer_drop=0.25, output_drop=0.3,
                             state_drop=0.4, state_drop_variant=variant)
        model = LanguageModel(config, seed=1)
        inputs = rng.integers(0, 7, size=(2, 4))
        targets = rng.integers(0, 7, size=(2, 4))
        plan = sample_masks(config, model.sizing, 2, 4, seed=3)
        state = model.zero_state(2)

        def f(model=model, inputs=inputs, targets=targets, state=state, plan=plan):
            return model.forward_window(inputs, targets, state, plan, "train").loss

        check(f"full model, {variant} state dropout (V=7 h=5 D=2 T=4)",
              f, model.parameters())

    print("gradcheck:", "all passed" if failures == 0 else f"{failures} FAILED")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="budgetlm",
        description="Recurrent language models compared under fixed parameter budgets")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a data file with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--mode", choices=("meanfield", "mc"), default="meanfield")
    p.add_argument("--mc-samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("tune", help="hyperparameter study with GP bandits")
    p.add_argument("--config", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", choices=("gp-ei", "random"), default="gp-ei")
    p.add_argument("--eval-test", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("rerun", help="retrain one config across seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--tuner-best-valid", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rerun)

    p = sub.add_parser("sensitivity", help="neighbourhood filter around the best trial")
    p.add_argument("--study", required=True, help="tune output directory")
    p.add_argument("--window", type=float, required=True)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("report", help="render result tables from run directories")
    p.add_argument("--root", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference sweep of cells and model")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BudgetLmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
