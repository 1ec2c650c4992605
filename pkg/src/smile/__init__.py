"""Microcanonical Langevin samplers with stochastic gradients, an energy-error
tuner, and a benchmark harness for second-moment bias."""
from .chains import ChainRun, run_chains
from .dynamics import (ChainState, DivergentStepError, NonFiniteGradientError, StepOutcome,
                       integrator_step, momentum_update, partial_refresh, position_update)
from .estimators import BayesianLinearRegressionSampler, MicrocanonicalSampler
from .metrics import BiasReport, bootstrap_std, mode_coverage, second_moment_bias
from .samplers import (PrecondState, SamplerConfig, mclmc_step, precond_update, precondition,
                       psmile_step, sghmc_step, sgld_step, smile_naive_step)
from .targets import (NoiseKind, NoiseSpec, RegressionData, TargetModel, inject_noise, make_funnel,
                      make_gmm25, make_icg, make_linreg_target, make_noise_spec, make_rosenbrock)
from .tuner import (EnergyStats, InsufficientStatisticsError, Tuner, TunerConfig, adapt_step, fit_gamma,
                    gamma_quantile_wh, guardrail, update_energy_ema)

__version__ = "0.1.0"
