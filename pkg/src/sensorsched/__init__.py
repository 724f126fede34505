"""Transmission scheduling for remote state estimation over a packet-dropping channel."""

from .channel_sim import ChannelSchedule, Trace, channel_draw, empirical_metrics, run, sliding_metrics
from .errors import (ChannelDead, ConfigError, DimensionMismatch, DivergentTail, InvalidBudget,
                     NonConvergence, NoSamples, SchedulingError, StateOutOfRange, TooLarge,
                     UnstableLadder)
from .learning import (LearnerState, StepSchedule, async_update, build_constraints, epsilon_greedy,
                       lambda_update, mle_estimate, parameter_policy_p2, structured_update,
                       sync_update)
from .mdp import (QTable, SolveResult, TruncatedMdp, brute_force_optimal, check_structure,
                  extract_threshold, greedy_policy, policy_value_analytic,
                  relative_value_iteration)
from .policy import RandomizedThresholdPolicy, comm_rate, constrained_optimal_policy, decide
from .process_model import (CovarianceLadder, LtiSystem, cost_ladder, reference_system,
                            stability_margin, steady_state_covariance)

__version__ = "0.1.0"
