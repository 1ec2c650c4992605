"""Energy-error based step-size tuning with quantile guardrails.

|dE| is modelled online as a Gamma variable whose moments come from
bias-corrected exponential moving averages; Wilson-Hilferty quantiles of
that Gamma decide when a step is rejected and when the step size moves.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from ._validation import check_probability
from .dynamics import ChainState, StepOutcome


class InsufficientStatisticsError(ValueError):
    pass


@dataclass(frozen=True)
class TunerConfig:
    kappa: float = 0.98
    a: float = 0.1
    delta: float = 0.02
    beta: float = 0.01
    warmup: int = 50
    guardrail: bool = True
    adapt: bool = True
    mean_only_gamma: bool = False
    enabled: bool = True

    def __post_init__(self):
        check_probability("kappa", self.kappa)
        check_probability("a", self.a)
        check_probability("delta", self.delta)
        check_probability("beta", self.beta)
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")


@dataclass
class EnergyStats:
    """EMA moments of |dE| for one chain or a batch of chains.

    ``mu`` and ``var`` are raw EMAs; :meth:`corrected` divides out the
    startup bias ``1 - (1 - beta)^t``.
    """

    mu: np.ndarray = 0.0
    var: np.ndarray = 0.0
    beta: float = 0.01
    t: np.ndarray = 0
    shape: np.ndarray = np.nan
    scale: np.ndarray = np.nan

    @classmethod
    def zeros(cls, n_chains=None, beta=0.01):
        if n_chains is None:
            return cls(0.0, 0.0, beta, 0, np.nan, np.nan)
        z = np.zeros(n_chains)
        return cls(z.copy(), z.copy(), beta, np.zeros(n_chains, dtype=np.int64),
                   np.full(n_chains, np.nan), np.full(n_chains, np.nan))

    @property
    def sigma(self):
        return np.sqrt(self.var)

    def corrected(self):
        t = np.asarray(self.t)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(t > 0, 1.0 - (1.0 - self.beta) ** t, np.nan)
            return self.mu / corr, np.sqrt(self.var / corr)


def update_energy_ema(s: EnergyStats, abs_de, mask=None) -> EnergyStats:
    """Fold one |dE| observation into the EMAs (mean first, then variance)."""
    abs_de = np.asarray(abs_de, dtype=float)
    if np.any(abs_de < 0):
        raise ValueError("abs_de must be non-negative")
    b = s.beta
    mu = (1.0 - b) * s.mu + b * abs_de
    var = (1.0 - b) * s.var + b * (abs_de - mu) ** 2
    t = np.asarray(s.t) + 1
    if mask is not None:
        mu = np.where(mask, mu, s.mu)
        var = np.where(mask, var, s.var)
        t = np.where(mask, t, s.t)
    return EnergyStats(mu, var, b, t, s.shape, s.scale)


def fit_gamma(mu, sigma, mean_only: bool = False):
    """Moment-match a Gamma to mean ``mu`` and standard deviation ``sigma``.

    The default matches both moments (``shape = mu^2/sigma^2``,
    ``scale = sigma^2/mu``).  ``mean_only`` swaps in
    ``shape = sigma^2/mu``, ``scale = (mu/sigma)^2``, which keeps the mean only.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(mu > 0)) or np.any(~(sigma > 0)):
        raise InsufficientStatisticsError("insufficient statistics")
    if mean_only:
        return sigma ** 2 / mu, (mu / sigma) ** 2
    return (mu / sigma) ** 2, sigma ** 2 / mu


def _wh(z, shape, scale):
    c = 1.0 - 1.0 / (9.0 * shape) + z / (3.0 * np.sqrt(shape))
    return np.maximum(scale * shape * c ** 3, 0.0)


def gamma_quantile_wh(p, shape, scale):
    """Wilson-Hilferty approximation to the Gamma quantile function."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    return _wh(ndtri(p), np.asarray(shape, dtype=float), np.asarray(scale, dtype=float))


def _quantiles(stats: EnergyStats, cfg: "TunerConfig", min_t: int = 1):
    """Fit the Gamma from corrected EMAs; return ``(ready, guard, lo, hi)``."""
    mu, sigma = stats.corrected()
    ready = (mu > 0) & (sigma > 0) & (np.asarray(stats.t) >= min_t)
    shape, scale = fit_gamma(np.where(ready, mu, 1.0), np.where(ready, sigma, 1.0),
                             cfg.mean_only_gamma)
    stats.shape = np.where(ready, shape, np.nan)
    stats.scale = np.where(ready, scale, np.nan)
    z = ndtri(np.array([cfg.kappa, cfg.a / 3.0, 1.0 - 2.0 * cfg.a / 3.0]))
    guard, lo, hi = (_wh(zi, shape, scale) for zi in z)
    return ready, guard, lo, hi


def _rollback(state_prev: ChainState, outcome: StepOutcome, threshold, abs_de):
    new = outcome.new_state
    bad = ~np.isfinite(abs_de) | (abs_de > threshold)
    if outcome.diverged is not None:
        bad = bad | outcome.diverged
    if not np.any(bad):
        return new, bad
    keep = bad[..., None] if np.ndim(bad) else bad
    state = ChainState(
        np.where(keep, state_prev.position, new.position),
        np.where(keep, 0.0, new.momentum_dir),
        np.where(bad, state_prev.log_density, new.log_density),
        np.where(keep, state_prev.grad, new.grad),
        new.step_size,
    )
    return state, bad


def _adapt(eta, abs_de, tau_lo, tau_hi, delta):
    eta = np.asarray(eta, dtype=float)
    return np.where(abs_de < tau_lo, eta * (1.0 + delta),
                    np.where(abs_de > tau_hi, eta * (1.0 - delta), eta))


def guardrail(state_prev: ChainState, outcome: StepOutcome, stats: EnergyStats, cfg: "TunerConfig"):
    """Reject steps whose |dE| exceeds the ``kappa`` Gamma quantile, or that diverged.

    Rejected chains return to the previous position with a zero momentum
    direction.  Without fitted statistics only divergent steps are rejected.
    Returns ``(state, rejected)``.
    """
    ready, guard, _, _ = _quantiles(stats, cfg)
    threshold = np.where(ready, guard, np.inf)
    return _rollback(state_prev, outcome, threshold, np.abs(outcome.energy_delta))


def adapt_step(eta, abs_de, stats: EnergyStats, cfg: "TunerConfig"):
    """Multiplicative step-size rule; ``eta`` is unchanged while stats are unfitted."""
    ready, _, lo, hi = _quantiles(stats, cfg)
    return _adapt(eta, abs_de, np.where(ready, lo, -np.inf), np.where(ready, hi, np.inf), cfg.delta)


def expected_log_drift(a: float, delta: float) -> float:
    """E[log eta change] per step when |dE| follows the fitted Gamma."""
    return a / 3.0 * np.log1p(delta) + 2.0 * a / 3.0 * np.log1p(-delta)


@dataclass
class TunerStep:
    state: ChainState
    rejected: np.ndarray
    thresholds: tuple


@dataclass
class Tuner:
    """Batched online tuner: the per-step body of the adaptive scheme.

    Order within a step: fit the Gamma from the current EMAs, fold in the new
    |dE|, apply the guardrail and the step-size rule with the fitted
    quantiles.  During the first ``warmup`` steps |dE| is recorded only.
    The step right after a rollback restarts from a zero direction and is
    excluded from the statistics and from both decisions.
    """

    config: TunerConfig = field(default_factory=TunerConfig)
    stats: Optional[EnergyStats] = None
    n_rejected: Optional[np.ndarray] = None

    def reset(self, n_chains):
        self.stats = EnergyStats.zeros(n_chains, self.config.beta)
        self.n_rejected = np.zeros(n_chains, dtype=np.int64)

    def step(self, state_prev: ChainState, outcome: StepOutcome) -> TunerStep:
        cfg = self.config
        if self.stats is None:
            self.reset(np.shape(outcome.energy_delta))
        abs_de = np.abs(outcome.energy_delta)
        # A step leaving a zeroed direction has no defined kinetic change, so
        # its |dE| is not an integration error: it is neither recorded nor
        # judged.  Divergence still rolls it back.
        restart = ~np.any(state_prev.momentum_dir != 0.0, axis=-1)
        finite = np.isfinite(abs_de) & ~restart
        if outcome.diverged is not None:
            finite &= ~outcome.diverged
        ready, guard, lo, hi = _quantiles(self.stats, cfg, max(cfg.warmup, 1))
        ready = ready & ~restart
        self.stats = update_energy_ema(self.stats, np.where(finite, abs_de, 0.0), mask=finite)
        guard_thr = np.where(ready & cfg.guardrail, guard, np.inf)
        if cfg.guardrail:
            new, rejected = _rollback(state_prev, outcome, guard_thr, np.where(restart, 0.0, abs_de))
        else:
            new, rejected = outcome.new_state, np.zeros(np.shape(abs_de), dtype=bool)
        if cfg.adapt:
            eta = _adapt(new.step_size, abs_de, np.where(ready, lo, -np.inf),
                         np.where(ready, hi, np.inf), cfg.delta)
            new = ChainState(new.position, new.momentum_dir, new.log_density, new.grad, eta)
        self.n_rejected = self.n_rejected + rejected
        return TunerStep(new, rejected, (guard, lo, hi))


TRACE_COLUMNS = ["chain", "step", "eta", "abs_de", "mu", "sigma", "shape", "scale", "reset"]


class TraceWriter:
    """Streams per-step tuner diagnostics to CSV."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(TRACE_COLUMNS)

    def write(self, step: int, eta, abs_de, stats: EnergyStats, rejected, chains=None):
        mu, sigma = stats.corrected()
        rows = np.atleast_1d
        eta, abs_de, mu, sigma = rows(eta), rows(abs_de), rows(mu), rows(sigma)
        shape, scale, rej = rows(stats.shape), rows(stats.scale), rows(rejected)
        chains = range(len(eta)) if chains is None else chains
        for i, c in enumerate(chains):
            self._w.writerow([c, step, repr(float(eta[i])), repr(float(abs_de[i])), repr(float(mu[i])),
                              repr(float(sigma[i])), repr(float(shape[i])), repr(float(scale[i])),
                              int(rej[i])])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
