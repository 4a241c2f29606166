"""Knowledge-tracing adaptation under learner distribution shift.

A GRU knowledge-tracing backbone, a controller that scores which learners
drifted, a generator that writes a personal output layer for them from a short
context window, retraining baselines, and the evaluation harness around them.
All numerics run on a small reverse-mode autodiff core over numpy.
"""
from .backbone import DKT, TrainConfig, knowledge_states, train
from .controller import ControllerConfig, ValueScore, choose, score_windows
from .data import (ColumnMapping, DatasetSplits, Interaction, InteractionSequence, Window, first_windows,
                   parse_interactions, split_group, split_temporal)
from .evaluation import BenchmarkConfig, EvalReport, evaluate_method, run_rlpa
from .generator import Generator, GeneratorConfig, adapt
from .metrics import auc, rmse
from .synthetic import ShiftProfile, flip_cohort, synth_benchmark

__version__ = "0.1.0"

__all__ = [
    "DKT", "TrainConfig", "knowledge_states", "train",
    "ControllerConfig", "ValueScore", "choose", "score_windows",
    "ColumnMapping", "DatasetSplits", "Interaction", "InteractionSequence", "Window", "first_windows",
    "parse_interactions", "split_group", "split_temporal",
    "BenchmarkConfig", "EvalReport", "evaluate_method", "run_rlpa",
    "Generator", "GeneratorConfig", "adapt",
    "auc", "rmse",
    "ShiftProfile", "flip_cohort", "synth_benchmark",
]
