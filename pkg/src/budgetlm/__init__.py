"""Budget-matched comparison of recurrent language models, from scratch."""

from .autodiff import Tensor, Tape, backward, finite_difference_check, no_grad
from .cells import combine_cell_state, count_cell_params, make_cell, register_cell
from .corpus import (Corpus, TokenStream, Vocabulary, build_vocab,
                     load_char_corpus, load_word_corpus, make_windows,
                     split_char_corpus)
from .evaluator import EvalResult, evaluate, nll_to_bpc, nll_to_ppl
from .model import (DropoutPlan, LanguageModel, ModelConfig, SizingSolution,
                    sample_masks, solve_sizing)
from .trainer import (AdamOptimizer, Checkpoint, OptimizerConfig, TrainSchedule,
                      load_checkpoint, maybe_decay_lr, model_from_checkpoint,
                      save_checkpoint, train)
from .tuner import (DEFAULT_SPACE, Dimension, GpSurrogate, HyperparameterSpace,
                    Trial, expected_improvement, fit_gp, gp_posterior,
                    run_study, suggest_batch)
from .analysis import (RerunRecord, grid_cost, render_report, rerun_statistics,
                       seed_rerun_stats, sensitivity_neighborhood)
from .config import parse_config, parse_space_config

__version__ = "0.1.0"
