"""Experiment harness: single cells, the ablation matrix, reports and the CLI."""
from .experiment import (METHODS, SUBJECT_COUNTS, VIEW_FILTERS, ExperimentSpec, RunSettings, StageError,
                         run_experiment)
