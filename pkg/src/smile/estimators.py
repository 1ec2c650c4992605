"""scikit-learn style front ends.

``MicrocanonicalSampler.fit(target)`` draws posterior samples from a
:class:`~smile.targets.TargetModel`; ``BayesianLinearRegressionSampler``
samples regression coefficients from ``(X, y)`` with mini-batch gradients and
predicts with the posterior-mean coefficients.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_positive
from .chains import run_chains
from .samplers import SAMPLERS, SamplerConfig
from .targets import RegressionData, TargetModel, make_linreg_target, make_noise_spec
from .tuner import TunerConfig


def _check_common(est):
    if est.sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}, got {est.sampler!r}")
    check_positive("step_size", est.step_size)
    if est.n_chains < 1 or est.n_steps < 1 or est.thin < 1:
        raise ValueError("n_chains, n_steps and thin must be >= 1")
    if not 0.0 <= est.burn_in_frac < 1.0:
        raise ValueError("burn_in_frac must lie in [0, 1)")


def _tuner(flag):
    if flag is True:
        return TunerConfig()
    return flag or None


class MicrocanonicalSampler(BaseEstimator):
    """Multi-chain sampler for an analytical target.

    Fitted attributes: ``samples_`` of shape ``(n_chains, n_kept, d)``,
    ``second_moments_`` (pooled), ``step_size_`` (per chain, after tuning),
    ``reset_frequency_`` and ``n_diverged_``.
    """

    def __init__(self, sampler="psmile", step_size=0.01, n_chains=4, n_steps=10_000, burn_in_frac=0.1,
                 decoherence_L=None, noise="none", noise_scale=256.0, tuner=False, thin=1, random_state=0):
        self.sampler = sampler
        self.step_size = step_size
        self.n_chains = n_chains
        self.n_steps = n_steps
        self.burn_in_frac = burn_in_frac
        self.decoherence_L = decoherence_L
        self.noise = noise
        self.noise_scale = noise_scale
        self.tuner = tuner
        self.thin = thin
        self.random_state = random_state

    def fit(self, target: TargetModel, y=None):
        if not isinstance(target, TargetModel):
            raise TypeError("fit expects a TargetModel")
        _check_common(self)
        cfg = SamplerConfig(
            step_size=self.step_size,
            decoherence_L=math.inf if self.decoherence_L is None else self.decoherence_L,
            noise_spec=make_noise_spec(self.noise, target, self.noise_scale, rng=self.random_state),
            precondition=self.sampler == "psmile",
        )
        run = run_chains(target, self.sampler, cfg, self.n_steps, self.random_state, range(self.n_chains),
                         tuner=_tuner(self.tuner), burn_in_frac=self.burn_in_frac,
                         keep_dims=list(range(target.dim)), thin=self.thin)
        self.samples_ = run.samples
        self.second_moments_ = run.m2.mean(axis=0)
        self.step_size_ = run.step_size
        self.reset_frequency_ = run.reset_frequency
        self.n_diverged_ = int(run.diverged.sum())
        self.n_features_in_ = target.dim
        return self

    def sample(self) -> np.ndarray:
        """Pooled samples, ``(n_chains * n_kept, d)``."""
        check_is_fitted(self, "samples_")
        return self.samples_.reshape(-1, self.samples_.shape[-1])


class BayesianLinearRegressionSampler(RegressorMixin, BaseEstimator):
    """Gaussian-likelihood linear regression sampled with mini-batch gradients.

    ``batch_size=None`` uses full-batch gradients.  Fitted attributes:
    ``coef_samples_`` ``(n_chains, n_kept, p)``, ``coef_`` (posterior mean
    estimate) and ``coef_second_moments_``.
    """

    def __init__(self, sampler="psmile", step_size=3e-3, batch_size=32, n_chains=4, n_steps=20_000,
                 burn_in_frac=0.1, noise_var=1.0, prior_var=1.0, tuner=False, thin=10, random_state=0):
        self.sampler = sampler
        self.step_size = step_size
        self.batch_size = batch_size
        self.n_chains = n_chains
        self.n_steps = n_steps
        self.burn_in_frac = burn_in_frac
        self.noise_var = noise_var
        self.prior_var = prior_var
        self.tuner = tuner
        self.thin = thin
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        _check_common(self)
        data = RegressionData(X, y, check_positive("noise_var", self.noise_var),
                              check_positive("prior_var", self.prior_var))
        target = make_linreg_target(data)
        full = self.batch_size is None or self.batch_size >= data.n
        cfg = SamplerConfig(step_size=self.step_size, batch_size=None if full else self.batch_size,
                            dataset_size=None if full else data.n, precondition=self.sampler == "psmile")
        run = run_chains(target, self.sampler, cfg, self.n_steps, self.random_state, range(self.n_chains),
                         tuner=_tuner(self.tuner), burn_in_frac=self.burn_in_frac,
                         keep_dims=list(range(data.p)), thin=self.thin)
        self.coef_samples_ = run.samples
        self.coef_ = run.m1.mean(axis=0)
        self.coef_second_moments_ = run.m2.mean(axis=0)
        self.n_diverged_ = int(run.diverged.sum())
        self.n_features_in_ = data.p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_
