"""Biased mixtures of experts: sparse gating over experts whose inputs cost
different amounts of data, trained to meet a target expert-usage rate."""

from .errors import (BMoEError, ConfigurationError, RejectedInputError, SolverNumericalError,
                     TrainingDivergedError)
from .evaluation import (EvalReport, RateCurve, CurvePoint, SweepConfig, random_selection_baseline,
                         rho, single_expert_baseline, sweep)
from .gating import selection_frequency, soft_gate, sparse_gate, top_expert, utility
from .nn import DenseNet, Layer, TrainConfig, backward, forward, init_dense, sgd_step
from .solver import (LPSolution, average_cost, brute_force_solve, simplex_solve,
                     solve_for_cost, solve_for_perf)
from .synth import (Dataset, ExpertSpec, PreprocessSpec, gen_feature_task, gen_image_task,
                    preprocess, train_expert)
from .training import (BiasLossConfig, MixtureModel, bias_loss, enforce_bias,
                       largest_remainder_counts, mixture_forward, train_mixture,
                       utility_deviation)

__version__ = "0.1.0"

__all__ = [
    'BMoEError', 'ConfigurationError', 'RejectedInputError', 'SolverNumericalError',
    'TrainingDivergedError', 'EvalReport', 'RateCurve', 'CurvePoint', 'SweepConfig',
    'random_selection_baseline', 'rho', 'single_expert_baseline', 'sweep',
    'selection_frequency', 'soft_gate', 'sparse_gate', 'top_expert', 'utility', 'DenseNet',
    'Layer', 'TrainConfig', 'backward', 'forward', 'init_dense', 'sgd_step', 'LPSolution',
    'average_cost', 'brute_force_solve', 'simplex_solve', 'solve_for_cost',
    'solve_for_perf', 'Dataset', 'ExpertSpec', 'PreprocessSpec', 'gen_feature_task',
    'gen_image_task', 'preprocess', 'train_expert', 'BiasLossConfig', 'MixtureModel',
    'bias_loss', 'enforce_bias', 'largest_remainder_counts', 'mixture_forward',
    'train_mixture', 'utility_deviation',
]
