"""Class-imbalanced semi-supervised learning lab with probe-based
classifier debiasing, built on small numpy MLPs."""
from .cdmad import (RefinementRule, cdmad_step_loss, la_prior, make_probe, measure_bias,
                    refine_logits, refine_pseudo_label, refine_test_predictions)
from .data import LongTailSpec, TaskSpec, batch_stream, longtail_counts, synthesize
from .harness import RunConfig, RunResult, run_experiment, sweep
from .metrics import bacc, ber, confusion, gm, group_accuracies
from .oracle import bayes_oracle
from .report import emit

__version__ = "0.1.0"
