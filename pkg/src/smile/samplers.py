"""Sampler kernels: full-batch MCLMC, SMILE-naive, pSMILE, SGLD and SGHMC.

Every kernel advances a state by one step.  States may be a single chain
(``(d,)`` arrays) or a batch of chains (``(n, d)``); step sizes broadcast
per chain.  Randomness comes from ``rng``, either a ``np.random.Generator``
or a :class:`smile.rng.ChainRNG` holding one independent stream per chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .dynamics import (ChainState, StepOutcome, integrator_step, normalize,
                       partial_refresh)
from .rng import ChainRNG, as_stream
from .targets import NoiseKind, NoiseSpec, TargetModel


@dataclass(frozen=True)
class SamplerConfig:
    step_size: float = 0.1
    batch_size: Optional[int] = None
    dataset_size: Optional[int] = None
    decoherence_L: float = math.inf
    noise_spec: NoiseSpec = field(default_factory=NoiseSpec)
    precondition: bool = False
    tuner_enabled: bool = False
    friction: float = 0.1
    alpha: float = 0.01
    redraw_per_substep: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.decoherence_L > 0:
            raise ValueError("decoherence_L must be positive")
        if self.batch_size is not None:
            n = self.dataset_size
            if n is None or not 1 <= self.batch_size <= n:
                raise ValueError("need 1 <= batch_size <= dataset_size")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")

    @property
    def full_batch(self) -> bool:
        return self.batch_size is None or self.batch_size == self.dataset_size


# --- stochastic gradients -----------------------------------------------------

class EpochBatches:
    """Mini-batch indices by per-chain random reshuffling.

    Each chain walks through its own permutation of the data in blocks of
    ``batch_size``, reshuffling once the permutation is exhausted.
    """

    def __init__(self, gens, n: int, batch_size: int):
        self.gens = gens
        self.n = n
        self.b = batch_size
        self._perm = [None] * len(gens)
        self._pos = [n] * len(gens)

    def next(self) -> np.ndarray:
        out = np.empty((len(self.gens), self.b), dtype=np.intp)
        for i, g in enumerate(self.gens):
            if self._pos[i] + self.b > self.n:
                self._perm[i] = g.permutation(self.n)
                self._pos[i] = 0
            out[i] = self._perm[i][self._pos[i]:self._pos[i] + self.b]
            self._pos[i] += self.b
        return out


def _draw_batch(rng, lead_shape, n, b):
    if isinstance(rng, ChainRNG):
        sched = getattr(rng, "_epoch_batches", None)
        if sched is None or sched.n != n or sched.b != b:
            stream = rng.stream("batch")
            sched = EpochBatches([stream.generator(i) for i in range(rng.n_chains)], n, b)
            rng._epoch_batches = sched
        return sched.next()
    if lead_shape:
        return np.stack([rng.choice(n, b, replace=False) for _ in range(int(np.prod(lead_shape)))]).reshape(
            lead_shape + (b,))
    return rng.choice(n, b, replace=False)


def stochastic_potential(target: TargetModel, cfg: SamplerConfig, rng, position_shape):
    """The potential seen during one step: ``theta -> (log p, grad)``.

    Mini-batch targets use one ``N/B``-rescaled batch per step; analytical
    targets add one draw of the configured gradient noise per step, i.e. the
    log-density gains ``eps . theta``.  With ``redraw_per_substep`` every
    call draws afresh.
    """
    lead = tuple(position_shape[:-1])
    mb = target.minibatch
    if mb is not None and not cfg.full_batch:
        def batch():
            return _draw_batch(rng, lead, mb.n, cfg.batch_size)

        if cfg.redraw_per_substep:
            return lambda theta: mb.log_density_and_grad(theta, batch())
        idx = batch()
        return lambda theta: mb.log_density_and_grad(theta, idx)

    spec = cfg.noise_spec
    base = target.log_density_and_grad
    if spec.kind is NoiseKind.NONE:
        return base
    stream = as_stream(rng, "gradient_noise")

    def with_noise(theta, z):
        logp, grad = base(theta)
        eps = spec.draw(theta, z)
        return logp + np.sum(eps * theta, axis=-1), grad + eps

    if cfg.redraw_per_substep:
        return lambda theta: with_noise(theta, stream.standard_normal(position_shape))
    z = stream.standard_normal(position_shape)
    return lambda theta: with_noise(theta, z)


# --- microcanonical kernels -------------------------------------------------------

def _refresh(u, L, dt, rng):
    if math.isinf(L):
        return u
    return partial_refresh(u, L, dt, as_stream(rng, "refresh"))


def mclmc_step(state: ChainState, target: TargetModel, cfg: SamplerConfig, rng,
               on_divergence: str = "raise") -> StepOutcome:
    """Full-batch MCLMC: half refresh, exact-gradient integrator step, half refresh."""
    half = 0.5 * np.asarray(state.step_size)
    u = _refresh(state.momentum_dir, cfg.decoherence_L, half, rng)
    out = integrator_step(replace(state, momentum_dir=u), target.log_density_and_grad,
                          on_divergence=on_divergence)
    out.new_state.momentum_dir = _refresh(out.new_state.momentum_dir, cfg.decoherence_L, half, rng)
    return out


def smile_naive_step(state: ChainState, target: TargetModel, cfg: SamplerConfig, rng,
                     on_divergence: str = "raise") -> StepOutcome:
    """Integrator step driven by the stochastic gradient; no explicit noise by default."""
    half = 0.5 * np.asarray(state.step_size)
    u = _refresh(state.momentum_dir, cfg.decoherence_L, half, rng)
    potential = stochastic_potential(target, cfg, rng, state.position.shape)
    out = integrator_step(replace(state, momentum_dir=u), potential, on_divergence=on_divergence)
    out.new_state.momentum_dir = _refresh(out.new_state.momentum_dir, cfg.decoherence_L, half, rng)
    return out


@dataclass
class PrecondState:
    """EMA estimates of the stochastic-gradient mean and elementwise std."""

    g_bar: np.ndarray
    sigma: np.ndarray
    alpha: float = 0.01
    step_count: int = 0

    @classmethod
    def zeros(cls, shape, alpha=0.01):
        return cls(np.zeros(shape), np.zeros(shape), alpha, 0)

    def corrected(self):
        if self.alpha == 0.0 or self.step_count == 0:
            return self.g_bar, self.sigma
        c = 1.0 - (1.0 - self.alpha) ** self.step_count
        return self.g_bar / c, self.sigma / math.sqrt(c)


def precond_update(p: PrecondState, grad) -> PrecondState:
    a = p.alpha
    g_bar = (1.0 - a) * p.g_bar + a * grad
    sigma = np.sqrt((1.0 - a) * p.sigma ** 2 + a * (grad - g_bar) ** 2)
    return PrecondState(g_bar, sigma, a, p.step_count + 1)


def coordinate_scale(sigma) -> np.ndarray:
    """``sqrt(d) * sigma / ||sigma||`` with a relative floor on small entries."""
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[-1]
    top = np.max(sigma, axis=-1, keepdims=True)
    floored = np.maximum(sigma, 1e-8 * top)
    norm = np.linalg.norm(floored, axis=-1, keepdims=True)
    identity = top < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        s = math.sqrt(d) * floored / norm
    return np.where(identity, 1.0, s)


def precondition(grad, p: PrecondState, d: Optional[int] = None):
    """Gradient in the rescaled coordinates ``theta' = s * theta``; returns ``(grad / s, s)``."""
    s = coordinate_scale(p.sigma)
    if d is not None and s.shape[-1] != d:
        raise ValueError("dimension mismatch")
    return grad / s, s


def psmile_step(state: ChainState, target: TargetModel, cfg: SamplerConfig, p: PrecondState, rng,
                on_divergence: str = "raise"):
    """SMILE step in diagonally preconditioned coordinates.

    The stochastic gradient at the start position feeds the EMA estimates;
    the resulting scale is held fixed for the whole integrator step.
    """
    half = 0.5 * np.asarray(state.step_size)
    u = _refresh(state.momentum_dir, cfg.decoherence_L, half, rng)
    potential = stochastic_potential(target, cfg, rng, state.position.shape)
    start = potential(state.position)
    p = precond_update(p, start[1])
    _, s = precondition(start[1], p, state.dim)
    out = integrator_step(replace(state, momentum_dir=u), potential, coordinate_scale=s, start=start,
                          on_divergence=on_divergence)
    out.new_state.momentum_dir = _refresh(out.new_state.momentum_dir, cfg.decoherence_L, half, rng)
    return out, p


# --- baselines -------------------------------------------------------------------

def _cache_next(target, cfg, rng, theta):
    logp, grad = stochastic_potential(target, cfg, rng, theta.shape)(theta)
    return logp, grad


def sgld_step(state: ChainState, target: TargetModel, cfg: SamplerConfig, rng) -> ChainState:
    """``theta += h/2 * g + sqrt(h) * z`` with the stochastic gradient cached in ``state.grad``."""
    h = np.asarray(state.step_size, dtype=float)
    hh = h[..., None] if h.ndim else h
    z = as_stream(rng, "langevin").standard_normal(state.position.shape)
    theta = state.position + 0.5 * hh * state.grad + np.sqrt(hh) * z
    logp, grad = _cache_next(target, cfg, rng, theta)
    return ChainState(theta, state.momentum_dir, logp, grad, np.array(h, copy=True))


def sghmc_step(state: ChainState, velocity, target: TargetModel, cfg: SamplerConfig, rng):
    """Vanilla SGHMC (identity mass): returns ``(state, velocity)``."""
    h = np.asarray(state.step_size, dtype=float)
    hh = h[..., None] if h.ndim else h
    C = cfg.friction
    z = as_stream(rng, "langevin").standard_normal(state.position.shape)
    v = (1.0 - C * hh) * velocity + hh * state.grad + np.sqrt(2.0 * C * hh) * z
    theta = state.position + hh * v
    logp, grad = _cache_next(target, cfg, rng, theta)
    return ChainState(theta, state.momentum_dir, logp, grad, np.array(h, copy=True)), v


SAMPLERS = ("mclmc", "smile_naive", "psmile", "sgld", "sghmc")
