"""Microcanonical state, the minimal-norm integrator and momentum refresh.

All functions act on the trailing axis, so a ``(d,)`` vector is one chain and
a ``(n_chains, d)`` array is a batch of independent chains advanced together.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np

# Omelyan/McLachlan minimal-norm coefficients for the P-Q-P-Q-P scheme.
B1 = 0.1931833275037836
A1 = 0.5
B2 = 1.0 - 2.0 * B1

# theta -> (log_density, grad); broadcast over leading axes
Potential = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


class NonFiniteGradientError(ValueError):
    pass


class DivergentStepError(RuntimeError):
    """Raised when a step lands on a non-finite log-density.

    ``outcome`` holds the raw (invalid) step and ``mask`` flags the chains
    that diverged, so a caller can roll them back.
    """

    def __init__(self, outcome, mask):
        super().__init__("divergent step")
        self.outcome = outcome
        self.mask = mask


@dataclass
class ChainState:
    position: np.ndarray
    momentum_dir: np.ndarray
    log_density: np.ndarray
    grad: np.ndarray
    step_size: np.ndarray

    @property
    def dim(self) -> int:
        return self.position.shape[-1]

    def copy(self) -> "ChainState":
        return ChainState(
            self.position.copy(),
            self.momentum_dir.copy(),
            np.array(self.log_density, copy=True),
            self.grad.copy(),
            np.array(self.step_size, copy=True),
        )


@dataclass
class StepOutcome:
    new_state: ChainState
    energy_delta: np.ndarray
    kinetic_log_factor: np.ndarray
    diverged: Optional[np.ndarray] = None


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm; zero rows stay zero."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    return v / safe


def init_state(position, potential: Potential, step_size, rng=None, momentum_dir=None) -> ChainState:
    """Build a state at ``position`` with a random (or given) unit direction."""
    position = np.asarray(position, dtype=float)
    if momentum_dir is None:
        if rng is None:
            rng = np.random.default_rng()
        momentum_dir = normalize(rng.standard_normal(position.shape))
    logp, grad = potential(position)
    step = np.broadcast_to(np.asarray(step_size, dtype=float), position.shape[:-1]).copy()
    return ChainState(position.copy(), np.asarray(momentum_dir, dtype=float), logp, grad, step)


def _momentum_update(u, grad, eps, d):
    # Stable rearrangement of the B_eps map: numerator and denominator are
    # multiplied by 2*exp(-delta) so cosh/sinh never overflow.
    g_norm = np.linalg.norm(grad, axis=-1)
    safe = np.where(g_norm > 0.0, g_norm, 1.0)
    # e points up the log-density; this is the orientation under which the
    # kinetic term cancels d(log p) along the exact flow.
    e = grad / safe[..., None]
    delta = np.asarray(eps) * g_norm / (d - 1)
    ue = np.sum(e * u, axis=-1)
    zeta = np.exp(-delta)
    raw = (e * ((1.0 - zeta) * (1.0 + zeta + ue * (1.0 - zeta)))[..., None]
           + 2.0 * zeta[..., None] * u)
    log_factor = delta - np.log(2.0) + np.log(1.0 + ue + (1.0 - ue) * zeta * zeta)
    return normalize(raw), log_factor


def momentum_update(u, grad, eps, d: int):
    """Rotate the unit direction ``u`` by the gradient over substep time ``eps``.

    Returns ``(u_new, log_factor)`` where ``log_factor`` is
    ``log(cosh(delta) + e.u sinh(delta))`` at the incoming ``u``, with
    ``e = grad / |grad|`` and ``delta = eps |grad| / (d - 1)``.  A zero
    gradient leaves ``u`` untouched; a zero ``u`` (after a guardrail reset) is
    sent to ``e``.
    """
    if d < 2:
        raise ValueError("dimension too small")
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    return _momentum_update(np.asarray(u, dtype=float), grad, eps, d)


def position_update(theta, u, eps):
    return theta + np.asarray(eps)[..., None] * u if np.ndim(eps) else theta + eps * u


def integrator_step(
    state: ChainState,
    potential: Potential,
    coordinate_scale: Optional[np.ndarray] = None,
    start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    on_divergence: str = "raise",
) -> StepOutcome:
    """One P-Q-P-Q-P minimal-norm step of size ``state.step_size``.

    ``potential`` is queried at each of the three momentum substeps.  With
    ``coordinate_scale`` ``s`` the dynamics run in ``theta' = s * theta``:
    positions move by ``eps * u / s`` and momentum sees ``grad / s``.
    ``start`` may carry an already computed evaluation at the start position.

    ``on_divergence`` is ``"raise"`` (raise :class:`DivergentStepError`) or
    ``"mask"`` (return the outcome with ``diverged`` set per chain).
    """
    d = state.dim
    dt = np.asarray(state.step_size, dtype=float)
    inv_s = None if coordinate_scale is None else 1.0 / coordinate_scale

    def scaled(g):
        return g if inv_s is None else g * inv_s

    with np.errstate(all="ignore"):
        theta = state.position
        logp0, g = start if start is not None else potential(theta)
        u, k1 = _momentum_update(state.momentum_dir, scaled(g), B1 * dt, d)
        step_dir = u if inv_s is None else u * inv_s
        theta = position_update(theta, step_dir, A1 * dt)
        _, g = potential(theta)
        u, k2 = _momentum_update(u, scaled(g), B2 * dt, d)
        step_dir = u if inv_s is None else u * inv_s
        theta = position_update(theta, step_dir, A1 * dt)
        logp1, g = potential(theta)
        u, k3 = _momentum_update(u, scaled(g), B1 * dt, d)
        kinetic = k1 + k2 + k3
        energy = (logp1 - logp0) - (d - 1) * kinetic

    new_state = ChainState(theta, u, logp1, g, np.array(state.step_size, copy=True))
    finite = np.isfinite(logp1) & np.all(np.isfinite(theta), axis=-1) & np.isfinite(energy)
    outcome = StepOutcome(new_state, energy, kinetic, ~finite)
    if on_divergence == "raise" and not np.all(finite):
        raise DivergentStepError(outcome, ~finite)
    return outcome


def refresh_scale(L, dt, d: int):
    """Noise amplitude of a partial refresh over time ``dt`` at decoherence length ``L``."""
    L = np.asarray(L, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.sqrt(np.expm1(2.0 * np.asarray(dt) / L) / d)
    return np.where(np.isinf(L), 0.0, nu)


def partial_refresh(u, L, dt, rng) -> np.ndarray:
    """Partially resample the direction: ``normalize(u + nu * z)``."""
    if np.any(np.asarray(L) <= 0) or np.any(np.asarray(dt) <= 0):
        raise ValueError("L and dt must be positive")
    u = np.asarray(u, dtype=float)
    nu = refresh_scale(L, dt, u.shape[-1])
    z = rng.standard_normal(u.shape)
    return normalize(u + np.asarray(nu)[..., None] * z if np.ndim(nu) else u + nu * z)


def with_step_size(state: ChainState, step_size) -> ChainState:
    step = np.broadcast_to(np.asarray(step_size, dtype=float), state.position.shape[:-1]).copy()
    return replace(state, step_size=step)
