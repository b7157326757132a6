"""Bias-free Bayesian inference for discretely and noisily observed
diffusions: particle filters, coupled level-difference filters, randomised
multilevel debiasing, and importance-sampling-corrected particle MCMC."""

from .fk import (FeynmanKacModel, PathStore, PhiEvaluationError, WeightedCloud,
                 smoother_estimate)
from .sde import (DiffusionSpec, DivergedPathError, EulerHmmModel, LevelGrid,
                  coupled_euler_transition, euler_transition)
from .pf import (RESAMPLING_SCHEMES, ResamplingError, resample, run_filter_batch,
                 run_pf)
from .delta_pf import (CoupledEulerHmmModel, CoupledFkModel, build_coupled_model,
                       delta_estimate, run_delta_pf)
from .rmlmc import (AllocationPlan, ContractViolation, LevelDistribution,
                    PlannerError, plan_allocation, ratio_estimator, sample_level,
                    zeta_estimate)
from .pmmh import (AdaptiveProposal, CorrectionRecord, HmmPmmhTarget, JumpState,
                   PmmhResult, adapt_proposal, is_estimate, is_estimate_subsampled,
                   jump_chain_section, run_corrections, run_pmmh)
from .models import (HmmProblem, OuExactModel, gbm_exact_loglik, gbm_problem,
                     kalman_step, ou_exact_loglik, ou_level_loglik, ou_problem,
                     pearson_problem, simulate_data)
from .harness import (ConfigError, MseSeries, RunConfig, config_from_dict,
                      cost_model_report, rate_diagnostics, run_experiment)

__version__ = "0.1.0"
