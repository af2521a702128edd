"""Composite low-rank plus sparse MDPs: generation, estimation, optimistic agents."""
from .estimation import (EstimatorState, GramStats, LowRankSparseRegression, LrsConstraints,
                         RegressionData, SolverOptions, SparseDifferenceRegression,
                         design_min_eigenvalue, estimation_error, fit_low_rank_sparse,
                         fit_sparse_difference)
from .exceptions import (AssumptionViolation, IncoherenceBudgetError,
                         InfeasiblePerturbationError, SingularKernelError, StructuralViolation)
from .generate import GenConfig, TaskPair, check_assumptions, generate_mdp, generate_task_pair
from .mdp import (CompositeMdp, FeatureTables, RegularityConstants, TransitionSample,
                  compute_regularity, load_mdp, sample_episode, save_mdp, transition_prob)
from .oracle import RegretTrace, ValueTables, episode_regret, evaluate_policy, solve_optimal

__version__ = "0.1.0"
