"""Batched multi-chain driver.

Runs ``R`` rows in lock-step, one row per (chain, step size) pair.  Row ``r``
draws randomness from chain index ``chain_ids[r]`` so rows that share a chain
index see the same random streams whatever else is in the batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ChainState, StepOutcome, normalize
from .rng import ChainRNG
from .samplers import (PrecondState, SamplerConfig, mclmc_step, psmile_step,
                       sghmc_step, sgld_step, smile_naive_step, SAMPLERS)
from .targets import TargetModel
from .tuner import Tuner, TunerConfig

DIVERGENCE_BOUND = 1e6


@dataclass
class ChainRun:
    m1: np.ndarray
    m2: np.ndarray
    n_kept: int
    step_size: np.ndarray
    n_rejected: np.ndarray
    n_counted: int
    diverged: np.ndarray
    diverged_at: np.ndarray
    final_state: ChainState
    samples: Optional[np.ndarray] = None
    wall_time: float = 0.0
    mean_abs_de: Optional[np.ndarray] = None

    @property
    def reset_frequency(self) -> np.ndarray:
        return self.n_rejected / max(self.n_counted, 1)


def _where_state(mask, a: ChainState, b: ChainState) -> ChainState:
    m = mask[:, None]
    return ChainState(np.where(m, a.position, b.position), np.where(m, a.momentum_dir, b.momentum_dir),
                      np.where(mask, a.log_density, b.log_density), np.where(m, a.grad, b.grad),
                      np.where(mask, a.step_size, b.step_size))


def initial_state(target: TargetModel, rng: ChainRNG, step_size) -> ChainState:
    n = rng.n_chains
    theta = np.tile(np.asarray(target.init_position, dtype=float), (n, 1))
    u = normalize(rng.stream("init").standard_normal((n, target.dim)))
    logp, grad = target.log_density_and_grad(theta)
    step = np.broadcast_to(np.asarray(step_size, dtype=float), (n,)).copy()
    return ChainState(theta, u, logp, grad, step)


def run_chains(
    target: TargetModel,
    sampler: str,
    cfg: SamplerConfig,
    n_steps: int,
    seed: int,
    chain_ids: Sequence[int],
    step_size=None,
    tuner: Optional[TunerConfig] = None,
    burn_in_frac: float = 0.1,
    keep_dims: Optional[Sequence[int]] = None,
    thin: int = 1,
    trace: Optional[Callable] = None,
    divergence_bound: float = DIVERGENCE_BOUND,
) -> ChainRun:
    """Run ``len(chain_ids)`` rows for ``n_steps`` and accumulate moments.

    Moments (and optional thinned samples of ``keep_dims``) are collected
    after the first ``burn_in_frac`` of steps.  A row that produces a
    non-finite state or leaves the ``divergence_bound`` box without a
    guardrail to catch it is frozen and flagged in ``diverged``.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    t0 = time.perf_counter()
    rng = ChainRNG(seed, chain_ids)
    R, d = len(chain_ids), target.dim
    state = initial_state(target, rng, cfg.step_size if step_size is None else step_size)
    precond = PrecondState.zeros((R, d), cfg.alpha) if sampler == "psmile" else None
    velocity = np.zeros((R, d)) if sampler == "sghmc" else None
    tune = Tuner(tuner) if tuner is not None and tuner.enabled and sampler in ("mclmc", "smile_naive", "psmile") else None
    if tune is not None:
        tune.reset(R)

    burn = int(burn_in_frac * n_steps)
    s1 = np.zeros((R, d))
    s2 = np.zeros((R, d))
    sde = np.zeros(R)
    n_rej = np.zeros(R, dtype=np.int64)
    failed = np.zeros(R, dtype=bool)
    failed_at = np.full(R, -1, dtype=np.int64)
    saved = [] if keep_dims is not None else None
    nan_de = np.full(R, np.nan)

    with np.errstate(all="ignore"):
        for t in range(n_steps):
            prev = state
            if sampler == "mclmc":
                out = mclmc_step(state, target, cfg, rng, on_divergence="mask")
            elif sampler == "smile_naive":
                out = smile_naive_step(state, target, cfg, rng, on_divergence="mask")
            elif sampler == "psmile":
                out, precond = psmile_step(state, target, cfg, precond, rng, on_divergence="mask")
            elif sampler == "sgld":
                new = sgld_step(state, target, cfg, rng)
                out = StepOutcome(new, nan_de, nan_de, ~np.all(np.isfinite(new.position), axis=-1))
            else:
                new, velocity = sghmc_step(state, velocity, target, cfg, rng)
                out = StepOutcome(new, nan_de, nan_de, ~np.all(np.isfinite(new.position), axis=-1))

            if tune is not None:
                ts = tune.step(prev, out)
                state, rejected = ts.state, ts.rejected
                if t >= burn:
                    n_rej += rejected
                caught = tune.config.guardrail
            else:
                state, rejected, caught = out.new_state, None, False

            bad = np.max(np.abs(state.position), axis=-1) > divergence_bound
            if not caught:
                bad |= out.diverged
            bad |= ~np.isfinite(state.position).all(axis=-1)
            new_bad = bad & ~failed
            if np.any(new_bad):
                failed_at[new_bad] = t
                failed |= new_bad
            if np.any(failed):
                state = _where_state(failed, prev, state)
                if velocity is not None:
                    velocity = np.where(failed[:, None], 0.0, velocity)

            if trace is not None:
                trace(t, state, np.abs(out.energy_delta), tune, rejected)

            if t >= burn:
                x = state.position
                s1 += x
                s2 += x * x
                sde += np.abs(out.energy_delta)
                if saved is not None and (t - burn) % thin == 0:
                    saved.append(x[:, keep_dims].copy())

    kept = n_steps - burn
    samples = np.stack(saved, axis=1) if saved else None
    return ChainRun(
        m1=s1 / kept, m2=s2 / kept, n_kept=kept, step_size=state.step_size.copy(),
        n_rejected=n_rej, n_counted=kept, diverged=failed, diverged_at=failed_at,
        final_state=state, samples=samples, wall_time=time.perf_counter() - t0,
        mean_abs_de=sde / kept,
    )
