"""Analytical posteriors, gradient-noise scenarios and a mini-batch regression target."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import special_ortho_group

from ._validation import check_random_state

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TargetModel:
    """A differentiable log-density with optional exact moments.

    ``log_density_and_grad`` maps ``(..., d)`` positions to ``((...), (..., d))``.
    ``exact_var_theta2`` is ``Var(theta_i^2)``, the normaliser of the bias metric.
    """

    name: str
    dim: int
    log_density_and_grad: Callable
    init_position: np.ndarray
    exact_second_moments: Optional[np.ndarray] = None
    exact_var_theta2: Optional[np.ndarray] = None
    marginal_std: Optional[np.ndarray] = None
    minibatch: Optional["MinibatchModel"] = None
    meta: dict = field(default_factory=dict)

    def log_density(self, theta):
        return self.log_density_and_grad(np.asarray(theta, dtype=float))[0]

    def gradient(self, theta):
        return self.log_density_and_grad(np.asarray(theta, dtype=float))[1]

    @property
    def default_aggregation(self) -> str:
        return "max" if self.name == "funnel" else "mean"


def random_rotation(d: int, rng) -> np.ndarray:
    return special_ortho_group.rvs(d, random_state=rng)


def log_spaced_eigenvalues(d: int, lo: float = 0.01, hi: float = 100.0) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), d)


def _gaussian_m2_var(mean, var):
    m2 = var + mean ** 2
    return m2, 2.0 * var ** 2 + 4.0 * mean ** 2 * var


def make_icg(d: int = 10, cond_lo: float = 0.01, cond_hi: float = 100.0, rng=None) -> TargetModel:
    """Ill-conditioned Gaussian ``N(0, R^T diag(lam) R)`` with log-spaced ``lam``."""
    if d < 2 or not 0 < cond_lo < cond_hi:
        raise ValueError("need d >= 2 and 0 < cond_lo < cond_hi")
    rng = check_random_state(rng)
    eigvals = log_spaced_eigenvalues(d, cond_lo, cond_hi)
    rot = random_rotation(d, rng)
    return gaussian_target(rot.T @ np.diag(eigvals) @ rot, name="icg",
                           meta={"eigvals": eigvals, "rotation": rot})


def gaussian_target(cov, mean=None, name="gaussian", meta=None) -> TargetModel:
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    _, logdet = np.linalg.slogdet(cov)
    const = -0.5 * (d * LOG_2PI + logdet)

    def log_density_and_grad(theta):
        diff = theta - mean
        pd = diff @ prec
        return const - 0.5 * np.sum(pd * diff, axis=-1), -pd

    var = np.diag(cov).copy()
    m2, v2 = _gaussian_m2_var(mean, var)
    return TargetModel(name, d, log_density_and_grad, mean.copy(), m2, v2, np.sqrt(var),
                       meta=dict(meta or {}, cov=cov))


def _normal_raw_moments(mu: float, var: float, n: int) -> np.ndarray:
    # E[X^k], k = 0..n, for X ~ N(mu, var) via the recursion m_k = mu m_{k-1} + (k-1) var m_{k-2}
    m = np.zeros(n + 1)
    m[0] = 1.0
    m[1] = mu
    for k in range(2, n + 1):
        m[k] = mu * m[k - 1] + (k - 1) * var * m[k - 2]
    return m


def rosenbrock_moments(Q: float = 0.1):
    """Exact ``(mean, E[x^2], Var[x^2])`` for the (odd, even) coordinate pair.

    The odd coordinate is ``N(1, 1/2)`` and the even one is ``N(x^2, Q/2)``
    given it, so every moment is a finite Gaussian moment sum.
    """
    x = _normal_raw_moments(1.0, 0.5, 8)
    w = _normal_raw_moments(0.0, Q / 2.0, 4)
    mean_odd, m2_odd, m4_odd = x[1], x[2], x[4]
    mean_even = x[2]
    # E[(x^2 + w)^k] with w independent, zero-mean
    m2_even = x[4] + w[2]
    m4_even = x[8] + 6.0 * x[4] * w[2] + w[4]
    return (
        np.array([mean_odd, mean_even]),
        np.array([m2_odd, m2_even]),
        np.array([m4_odd - m2_odd ** 2, m4_even - m2_even ** 2]),
    )


def make_rosenbrock(d: int = 10, Q: float = 0.1) -> TargetModel:
    """Product of ``d/2`` banana densities ``-(x^2 - y)^2 / Q - (x - 1)^2``."""
    if d % 2 or d < 2:
        raise ValueError("Rosenbrock dimension must be even")
    if Q <= 0:
        raise ValueError("Q must be positive")

    def log_density_and_grad(theta):
        x = theta[..., 0::2]
        y = theta[..., 1::2]
        r = x * x - y
        logp = -np.sum(r * r / Q + (x - 1.0) ** 2, axis=-1)
        grad = np.empty_like(theta)
        grad[..., 0::2] = -4.0 * x * r / Q - 2.0 * (x - 1.0)
        grad[..., 1::2] = 2.0 * r / Q
        return logp, grad

    mean, m2, v2 = rosenbrock_moments(Q)
    reps = d // 2
    mean_full = np.tile(mean, reps)
    m2_full = np.tile(m2, reps)
    return TargetModel("rosenbrock", d, log_density_and_grad, mean_full, m2_full, np.tile(v2, reps),
                       np.sqrt(m2_full - mean_full ** 2), meta={"Q": Q})


def make_funnel(d: int = 10) -> TargetModel:
    """Neal's funnel: ``theta_1 ~ N(0, 3^2)``, ``theta_i ~ N(0, exp(theta_1))``."""
    if d < 2:
        raise ValueError("funnel needs d >= 2")
    const = -0.5 * math.log(2.0 * math.pi * 9.0) - 0.5 * (d - 1) * LOG_2PI

    def log_density_and_grad(theta):
        t1 = theta[..., 0]
        rest = theta[..., 1:]
        inv_var = np.exp(-t1)
        sq = np.sum(rest * rest, axis=-1)
        logp = const - t1 * t1 / 18.0 - 0.5 * sq * inv_var - 0.5 * (d - 1) * t1
        grad = np.empty_like(theta)
        grad[..., 0] = -t1 / 9.0 + 0.5 * sq * inv_var - 0.5 * (d - 1)
        grad[..., 1:] = -rest * inv_var[..., None]
        return logp, grad

    m2 = np.full(d, math.exp(4.5))
    m2[0] = 9.0
    # E[theta_i^4] = 3 E[exp(2 theta_1)] = 3 e^18
    v2 = np.full(d, 3.0 * math.exp(18.0) - math.exp(9.0))
    v2[0] = 162.0
    return TargetModel("funnel", d, log_density_and_grad, np.zeros(d), m2, v2, np.sqrt(m2))


GMM_GRID = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
GMM_VAR = 0.3


def gmm_centers() -> np.ndarray:
    return np.array([(a, b) for a in GMM_GRID for b in GMM_GRID])


def make_gmm25(d: int = 10) -> TargetModel:
    """25-component grid mixture in the first two coordinates, standard normal elsewhere."""
    if d < 2:
        raise ValueError("GMM needs d >= 2")
    centers = gmm_centers()
    const = -math.log(25.0) - LOG_2PI - math.log(GMM_VAR) - 0.5 * (d - 2) * LOG_2PI

    def log_density_and_grad(theta):
        xy = theta[..., :2]
        diff = centers - xy[..., None, :]  # (..., 25, 2)
        logc = -0.5 * np.sum(diff * diff, axis=-1) / GMM_VAR
        lse = logsumexp(logc, axis=-1)
        w = np.exp(logc - lse[..., None])
        tail = theta[..., 2:]
        logp = const + lse - 0.5 * np.sum(tail * tail, axis=-1)
        grad = np.empty_like(theta)
        grad[..., :2] = np.sum(w[..., None] * diff, axis=-2) / GMM_VAR
        grad[..., 2:] = -tail
        return logp, grad

    m2 = np.ones(d)
    m2[:2] = np.mean(GMM_GRID ** 2) + GMM_VAR
    # per-axis marginal is an equal mixture of N(mu, 0.3) over the grid
    m4 = np.mean(GMM_GRID ** 4 + 6.0 * GMM_GRID ** 2 * GMM_VAR + 3.0 * GMM_VAR ** 2)
    v2 = np.full(d, 2.0)
    v2[:2] = m4 - m2[0] ** 2
    return TargetModel("gmm25", d, log_density_and_grad, np.zeros(d), m2, v2, np.sqrt(m2),
                       meta={"centers": centers})


def sample_gmm25(n: int, rng, d: int = 2) -> np.ndarray:
    """Exact i.i.d. draws from the grid mixture (first ``d`` coordinates)."""
    rng = check_random_state(rng)
    centers = gmm_centers()
    idx = rng.integers(0, 25, size=n)
    out = rng.standard_normal((n, d))
    out[:, :2] = centers[idx] + math.sqrt(GMM_VAR) * out[:, :2]
    return out


# --- gradient noise ---------------------------------------------------------

class NoiseKind(str, Enum):
    NONE = "none"
    ISOTROPIC = "isotropic"
    DIAGONAL = "diagonal"
    CORRELATED = "correlated"
    SPATIALLY_VARIED = "spatially_varied"


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian gradient noise ``eps ~ N(0, V(theta))``.

    ``V = base_scale * R^T diag(eigvals) R`` (``eigvals`` ignored for the
    isotropic kind, ``R`` used for correlated kinds); the spatially varied
    kind multiplies ``V`` by ``exp(-theta_2 / spatial_std)``.
    """

    kind: NoiseKind = NoiseKind.NONE
    base_scale: float = 256.0
    eigvals: Optional[np.ndarray] = None
    rotation: Optional[np.ndarray] = None
    spatial_std: float = 1.0
    chol: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        kind = NoiseKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is NoiseKind.NONE:
            return
        if self.base_scale <= 0:
            raise ValueError("base_scale must be positive")
        if kind is NoiseKind.ISOTROPIC:
            return
        if self.eigvals is None:
            raise ValueError(f"{kind.value} noise needs eigvals")
        eig = np.asarray(self.eigvals, dtype=float)
        if np.any(eig <= 0):
            raise ValueError("noise eigvals must be strictly positive")
        object.__setattr__(self, "eigvals", eig)
        if kind is NoiseKind.DIAGONAL:
            return
        if self.rotation is None:
            raise ValueError(f"{kind.value} noise needs a rotation")
        rot = np.asarray(self.rotation, dtype=float)
        if np.max(np.abs(rot.T @ rot - np.eye(len(eig)))) >= 1e-10:
            raise ValueError("noise rotation is not orthogonal")
        if self.spatial_std <= 0:
            raise ValueError("spatial_std must be positive")
        object.__setattr__(self, "rotation", rot)
        cov = self.base_scale * rot.T @ np.diag(eig) @ rot
        object.__setattr__(self, "chol", np.linalg.cholesky(0.5 * (cov + cov.T)))

    def covariance(self, theta=None, d=None) -> np.ndarray:
        if self.kind is NoiseKind.NONE:
            return np.zeros((d, d))
        if self.kind is NoiseKind.ISOTROPIC:
            return self.base_scale * np.eye(d if d is not None else len(theta))
        if self.kind is NoiseKind.DIAGONAL:
            return self.base_scale * np.diag(self.eigvals)
        cov = self.chol @ self.chol.T
        if self.kind is NoiseKind.SPATIALLY_VARIED and theta is not None:
            cov = cov * math.exp(-theta[1] / self.spatial_std)
        return cov

    def draw(self, theta, z) -> np.ndarray:
        """Map standard normals ``z`` to a noise sample at ``theta``."""
        kind = self.kind
        if kind is NoiseKind.NONE:
            return np.zeros_like(z)
        if kind is NoiseKind.ISOTROPIC:
            return math.sqrt(self.base_scale) * z
        if kind is NoiseKind.DIAGONAL:
            return np.sqrt(self.base_scale * self.eigvals) * z
        eps = z @ self.chol.T
        if kind is NoiseKind.SPATIALLY_VARIED:
            eps = eps * np.exp(-theta[..., 1] / (2.0 * self.spatial_std))[..., None]
        return eps


def make_noise_spec(kind, target: TargetModel, base_scale: float = 256.0, rng=None, eigvals=None) -> NoiseSpec:
    """Build one of the benchmark noise scenarios for ``target``.

    The diagonal spectrum defaults to the ICG's log-spaced eigenvalues and
    the correlated rotation is a fresh random rotation.
    """
    kind = NoiseKind(kind)
    if kind in (NoiseKind.NONE, NoiseKind.ISOTROPIC):
        return NoiseSpec(kind, base_scale)
    d = target.dim
    eig = log_spaced_eigenvalues(d) if eigvals is None else np.asarray(eigvals, dtype=float)
    if kind is NoiseKind.DIAGONAL:
        return NoiseSpec(kind, base_scale, eig)
    rot = random_rotation(d, check_random_state(rng))
    spatial = 1.0
    if target.marginal_std is not None:
        spatial = float(target.marginal_std[1])
    return NoiseSpec(kind, base_scale, eig, rot, spatial)


def inject_noise(grad, theta, spec: NoiseSpec, rng) -> np.ndarray:
    grad = np.asarray(grad, dtype=float)
    if spec.kind is NoiseKind.NONE:
        return grad.copy()
    z = rng.standard_normal(grad.shape)
    return grad + spec.draw(np.asarray(theta, dtype=float), z)


# --- Bayesian linear regression ---------------------------------------------

@dataclass(frozen=True)
class RegressionData:
    design: np.ndarray
    responses: np.ndarray
    noise_var: float = 1.0
    prior_var: float = 1.0

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        y = np.asarray(self.responses, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("design must be N x p with N responses")
        if self.noise_var <= 0 or self.prior_var <= 0:
            raise ValueError("noise_var and prior_var must be positive")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "responses", y)
        try:
            np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise ValueError("posterior precision is not positive definite") from exc

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def precision(self) -> np.ndarray:
        X = self.design
        return X.T @ X / self.noise_var + np.eye(X.shape[1]) / self.prior_var

    def posterior(self):
        """Closed-form Gaussian posterior ``(mean, covariance)``."""
        cov = np.linalg.inv(self.precision)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ (self.design.T @ self.responses) / self.noise_var
        return mean, cov


def synthesize_regression(n: int = 1024, p: int = 5, cond: float = 1.0, noise_var: float = 1.0,
                          prior_var: float = 1.0, rng=None) -> RegressionData:
    """Seeded synthetic regression data.

    Columns are scaled so that ``X^T X`` has condition number about ``cond``.
    """
    rng = check_random_state(rng)
    scales = np.sqrt(np.logspace(0.0, np.log10(cond), p)) if cond > 1 else np.ones(p)
    X = rng.standard_normal((n, p)) * scales
    beta = rng.standard_normal(p)
    y = X @ beta + math.sqrt(noise_var) * rng.standard_normal(n)
    return RegressionData(X, y, noise_var, prior_var)


def load_regression_csv(path, noise_var: float = 1.0, prior_var: float = 1.0) -> RegressionData:
    """Read a CSV with a header row; the last column is the response."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: expected a header row and at least one data row")
    data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    return RegressionData(data[:, :-1], data[:, -1], noise_var, prior_var)


@dataclass(frozen=True)
class MinibatchModel:
    """Per-example likelihood terms of a regression posterior."""

    data: RegressionData

    @property
    def n(self) -> int:
        return self.data.n

    def log_density_and_grad(self, theta, batch_indices=None):
        """Log-posterior with the likelihood estimated from ``batch_indices``.

        The batch sum is rescaled by ``N / B``.  ``batch_indices`` may be
        ``(B,)`` or ``(..., B)`` matching the leading axes of ``theta``.
        """
        data = self.data
        X, y = data.design, data.responses
        theta = np.asarray(theta, dtype=float)
        if batch_indices is None:
            Xb, yb, scale = X, y, 1.0
        else:
            idx = np.asarray(batch_indices)
            if idx.shape[-1] == 0:
                raise ValueError("empty batch")
            Xb, yb, scale = X[idx], y[idx], data.n / idx.shape[-1]
        if Xb.ndim == 2:
            resid = yb - theta @ Xb.T
            xr = resid @ Xb
        else:
            resid = yb - np.einsum("...bp,...p->...b", Xb, theta)
            xr = np.einsum("...b,...bp->...p", resid, Xb)
        loglik = -0.5 * np.sum(resid * resid, axis=-1) / data.noise_var
        logp = scale * loglik - 0.5 * np.sum(theta * theta, axis=-1) / data.prior_var
        grad = scale * xr / data.noise_var - theta / data.prior_var
        return logp, grad

    def minibatch_grad(self, theta, batch_indices):
        return self.log_density_and_grad(theta, batch_indices)[1]


def make_linreg_target(data: RegressionData) -> TargetModel:
    mb = MinibatchModel(data)
    mean, cov = data.posterior()
    var = np.diag(cov).copy()
    m2, v2 = _gaussian_m2_var(mean, var)

    def log_density_and_grad(theta):
        return mb.log_density_and_grad(theta)

    return TargetModel("linreg", data.p, log_density_and_grad, mean.copy(), m2, v2, np.sqrt(var),
                       minibatch=mb, meta={"posterior_mean": mean, "posterior_cov": cov})


TARGET_FACTORIES = {
    "icg": make_icg,
    "rosenbrock": make_rosenbrock,
    "funnel": make_funnel,
    "gmm25": make_gmm25,
}
