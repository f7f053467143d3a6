"""Robust behavior cloning from corrupted demonstrations via median-of-means."""
from .demos import CorruptionSpec, DemoDataset, collect_demos, corrupt, dataset_io, load_dataset, save_dataset
from .envsim import (PointMassEnv, TabularMDP, estimate_return, exact_return, expert_policy, make_env,
                     rollout, stationary_visitation, value_iteration)
from .errors import (ConfigError, ConvergenceError, FormatError, InvalidSpecError, RobustBCError,
                     TrainingDivergedError, UnsupportedOperationError)
from .mom import BatchPartition, batch_nll, max_batch_size, median_lower, mom_objective, partition
from .policy import (GaussianMlpPolicy, TabularSoftmaxPolicy, load_policy, log_prob, nll_and_grad,
                     sample_action, save_policy, tv_distance)
from .train import TrainConfig, TrainHistory, train_bc, train_mom_min, train_noisy_bc, train_rbc

__version__ = "0.1.0"
