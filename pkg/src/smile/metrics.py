"""Second-moment bias, chain bootstrap and mixture mode coverage."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._validation import check_random_state

AGGREGATIONS = ("mean", "max")
CSV_COLUMNS = ["target", "noise", "sampler", "step_size", "aggregate_b2", "bootstrap_std",
               "chains", "samples"]


@dataclass
class BiasReport:
    per_dim: np.ndarray
    aggregate: float
    bootstrap_std: float
    n_chains: int
    n_samples_per_chain: int
    aggregation: str = "mean"
    per_chain: Optional[np.ndarray] = None

    def csv_row(self, target: str, noise: str, sampler: str, step_size: float) -> list:
        return [target, noise, sampler, repr(float(step_size)), repr(float(self.aggregate)),
                repr(float(self.bootstrap_std)), self.n_chains, self.n_samples_per_chain]


def _aggregate(b2, aggregation):
    if aggregation == "mean":
        return np.mean(b2, axis=-1)
    if aggregation == "max":
        return np.max(b2, axis=-1)
    raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")


def _check_exact(exact_m2, exact_var_theta2):
    exact_m2 = np.asarray(exact_m2, dtype=float)
    var = np.asarray(exact_var_theta2, dtype=float)
    if np.any(~(var > 0)):
        raise ValueError("exact_var_theta2 must be positive")
    return exact_m2, var


def bias_from_m2(m2, exact_m2, exact_var_theta2):
    """Per-dimension ``(m2 - E[theta^2])^2 / Var(theta^2)``; broadcasts over leading axes."""
    exact_m2, var = _check_exact(exact_m2, exact_var_theta2)
    return (np.asarray(m2, dtype=float) - exact_m2) ** 2 / var


def bootstrap_std(per_chain_m2, exact_m2, exact_var_theta2, n_boot: int = 1000,
                  aggregation: str = "mean", rng=None) -> float:
    """Std of the aggregate bias over chain resamples drawn with replacement.

    Chains carry equal weight, so the pooled second moment of a resample is
    the mean of its chains' second moments.
    """
    m2 = np.asarray(per_chain_m2, dtype=float)
    if m2.ndim != 2 or m2.shape[0] < 2:
        raise ValueError("need a (K, d) matrix with K >= 2")
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    if n_boot == 1:
        return 0.0
    rng = check_random_state(rng)
    k = m2.shape[0]
    idx = rng.integers(0, k, size=(n_boot, k))
    pooled = m2[idx].mean(axis=1)
    agg = _aggregate(bias_from_m2(pooled, exact_m2, exact_var_theta2), aggregation)
    return float(np.std(agg))


def bias_report_from_moments(per_chain_m2, n_samples_per_chain: int, exact_m2, exact_var_theta2,
                             aggregation: str = "mean", n_boot: int = 1000, rng=None,
                             per_chain_bias: bool = False) -> BiasReport:
    """Bias report from per-chain second moments of equal-length chains.

    With ``per_chain_bias`` the reported bias is the average of per-chain
    biases instead of the bias of the pooled moment.
    """
    m2 = np.atleast_2d(np.asarray(per_chain_m2, dtype=float))
    if m2.shape[0] == 0 or n_samples_per_chain < 1:
        raise ValueError("empty samples")
    per_chain = bias_from_m2(m2, exact_m2, exact_var_theta2)
    per_dim = per_chain.mean(axis=0) if per_chain_bias else bias_from_m2(m2.mean(axis=0), exact_m2,
                                                                         exact_var_theta2)
    boot = 0.0
    if m2.shape[0] >= 2:
        boot = bootstrap_std(m2, exact_m2, exact_var_theta2, n_boot, aggregation, rng)
    return BiasReport(per_dim, float(_aggregate(per_dim, aggregation)), boot, m2.shape[0],
                      int(n_samples_per_chain), aggregation, per_chain)


def second_moment_bias(samples, exact_m2, exact_var_theta2, aggregation: str = "mean",
                       n_boot: int = 1000, rng=None, per_chain_bias: bool = False) -> BiasReport:
    """Bias of the pooled empirical second moment.

    ``samples`` is ``(K, n, d)`` (chains of equal length), a list of
    ``(n_k, d)`` arrays, or a single ``(n, d)`` array.
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        samples = [samples]
    chains = [np.asarray(c, dtype=float) for c in samples]
    if not chains or any(c.shape[0] == 0 for c in chains):
        raise ValueError("empty samples")
    if len({c.shape[0] for c in chains}) == 1:
        m2 = np.stack([np.mean(c * c, axis=0) for c in chains])
        return bias_report_from_moments(m2, chains[0].shape[0], exact_m2, exact_var_theta2,
                                        aggregation, n_boot, rng, per_chain_bias)
    # unequal lengths: pool by sample, not by chain
    pooled = np.concatenate(chains)
    per_dim = bias_from_m2(np.mean(pooled * pooled, axis=0), exact_m2, exact_var_theta2)
    return BiasReport(per_dim, float(_aggregate(per_dim, aggregation)), 0.0, len(chains),
                      min(c.shape[0] for c in chains), aggregation)


def relative_moment_error(m2, exact_m2) -> np.ndarray:
    """``|m2 / E[theta^2] - 1|`` per dimension."""
    exact_m2 = np.asarray(exact_m2, dtype=float)
    if np.any(exact_m2 == 0):
        raise ValueError("exact second moments must be non-zero")
    return np.abs(np.asarray(m2, dtype=float) / exact_m2 - 1.0)


def mode_coverage(samples, centers, radius: float = 3.0 * math.sqrt(0.3), min_hits: int = 10) -> int:
    """Number of ``centers`` with at least ``min_hits`` samples within ``radius``.

    ``samples`` is ``(..., k)`` with ``k >= 2``; distances use the first two
    coordinates.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(samples, dtype=float)
    if pts.ndim < 1 or pts.shape[-1] < 2:
        raise ValueError("samples need at least two coordinates")
    pts = pts[..., :2].reshape(-1, 2)
    centers = np.asarray(centers, dtype=float)
    hits = np.zeros(len(centers), dtype=np.int64)
    r2 = radius * radius
    # chunked to bound memory for long chains
    for start in range(0, len(pts), 65536):
        chunk = pts[start:start + 65536]
        dist2 = np.sum((chunk[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        hits += np.sum(dist2 <= r2, axis=0)
    return int(np.sum(hits >= min_hits))
