"""Step-size sweeps, grid selection and result tables.

Every grid point runs ``chains`` chains.  Chain ``k`` draws from streams keyed
by ``(seed, k, purpose)`` (see :mod:`smile.rng`), so grid points share chain
streams and a row's numbers do not depend on which other rows were batched
with it.  Grid points are batched into one vectorised run per worker.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..chains import ChainRun, run_chains
from ..metrics import (bias_report_from_moments, mode_coverage, relative_moment_error)
from ..rng import chain_generator
from ..samplers import SamplerConfig
from ..targets import (TargetModel, gmm_centers, load_regression_csv, make_funnel, make_gmm25,
                       make_icg, make_linreg_target, make_noise_spec, make_rosenbrock,
                       synthesize_regression)
from ..tuner import TraceWriter, TunerConfig
from .config import SIDECAR_FORMAT, ExperimentConfig

WORKERS_ENV = "SMILE_BENCH_WORKERS"
TUNED_SAMPLERS = ("mclmc", "smile_naive", "psmile")

CSV_HEADER = [
    "target", "noise", "sampler", "step_size", "aggregate_b2", "bootstrap_std", "chains", "samples",
    "stage", "status", "selected", "metric", "metric_value", "coverage", "max_rel_m2_error",
    "reset_frequency", "final_step_size", "mean_abs_de", "n_diverged", "per_dim_b2",
]


@dataclass
class GridRow:
    step_size: float
    stage: str
    status: str = "ok"
    error: str = ""
    aggregate_b2: float = math.nan
    bootstrap_std: float = math.nan
    per_dim_b2: Optional[np.ndarray] = None
    coverage: Optional[int] = None
    max_rel_m2_error: float = math.nan
    reset_frequency: float = math.nan
    final_step_size: float = math.nan
    mean_abs_de: float = math.nan
    n_diverged: int = 0
    n_samples_per_chain: int = 0
    metric_value: float = math.nan
    wall_time: float = 0.0
    selected: bool = False


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: List[GridRow]
    selected: Optional[int]
    wall_time: float = 0.0

    @property
    def best(self) -> Optional[GridRow]:
        return None if self.selected is None else self.rows[self.selected]


# --- building blocks from a config ---------------------------------------------

def build_target(cfg: ExperimentConfig) -> TargetModel:
    t = cfg.target
    name = t["name"]
    if name == "icg":
        return make_icg(t["dim"], t["cond_lo"], t["cond_hi"], rng=t["seed"])
    if name == "rosenbrock":
        return make_rosenbrock(t["dim"], t["Q"])
    if name == "funnel":
        return make_funnel(t["dim"])
    if name == "gmm25":
        return make_gmm25(t["dim"])
    if t["csv"] is not None:
        data = load_regression_csv(t["csv"], t["noise_var"], t["prior_var"])
    else:
        data = synthesize_regression(t["n"], t["p"], t["cond"], t["noise_var"], t["prior_var"], rng=t["seed"])
    return make_linreg_target(data)


def build_sampler_config(cfg: ExperimentConfig, target: TargetModel) -> SamplerConfig:
    noise = make_noise_spec(cfg.noise["kind"], target, cfg.noise["base_scale"], rng=cfg.noise["seed"])
    n = target.minibatch.n if target.minibatch is not None else None
    return SamplerConfig(
        step_size=cfg.grid_values()[0],
        batch_size=cfg.batch_size,
        dataset_size=n if cfg.batch_size is not None else None,
        decoherence_L=math.inf if cfg.decoherence_L is None else cfg.decoherence_L,
        noise_spec=noise,
        precondition=cfg.sampler == "psmile",
        tuner_enabled=cfg.tuner["enabled"],
        friction=cfg.friction,
        alpha=cfg.alpha,
        redraw_per_substep=cfg.redraw_per_substep,
    )


def refine_grid(best_step: float, n: int = 15) -> List[float]:
    """``n`` log-spaced step sizes from one decade below to one decade above."""
    i_opt = round(math.log10(best_step))
    return list(np.logspace(i_opt - 1, i_opt + 1, n))


# --- evaluation --------------------------------------------------------------------

def _evaluate(cfg: ExperimentConfig, target: TargetModel, run: ChainRun, sl: slice, h: float,
              stage: str, grid_index: int) -> GridRow:
    row = GridRow(step_size=h, stage=stage, n_samples_per_chain=run.n_kept)
    div = run.diverged[sl]
    row.n_diverged = int(div.sum())
    row.final_step_size = float(np.median(run.step_size[sl]))
    tuned = cfg.sampler in TUNED_SAMPLERS
    row.mean_abs_de = float(np.mean(run.mean_abs_de[sl])) if tuned else math.nan
    if cfg.tuner["enabled"] and tuned:
        row.reset_frequency = float(np.mean(run.reset_frequency[sl]))
    if row.n_diverged:
        row.status = "failed"
        row.error = f"{row.n_diverged} chain(s) diverged"
        return row
    m2 = run.m2[sl]
    if target.exact_var_theta2 is not None:
        agg = cfg.aggregation or target.default_aggregation
        rng = chain_generator(cfg.seed, grid_index, "bootstrap")
        rep = bias_report_from_moments(m2, run.n_kept, target.exact_second_moments, target.exact_var_theta2,
                                       agg, cfg.n_boot, rng, cfg.per_chain_bias)
        row.aggregate_b2, row.bootstrap_std, row.per_dim_b2 = rep.aggregate, rep.bootstrap_std, rep.per_dim
        row.max_rel_m2_error = float(np.max(relative_moment_error(m2.mean(axis=0), target.exact_second_moments)))
    if run.samples is not None:
        row.coverage = mode_coverage(run.samples[sl], gmm_centers(), cfg.coverage["radius"],
                                     cfg.coverage["min_hits"])
    metric = cfg.resolved_metric
    row.metric_value = {"bias": row.aggregate_b2, "moment_error": row.max_rel_m2_error,
                        "coverage": float(row.coverage) if row.coverage is not None else math.nan}[metric]
    if not math.isfinite(row.metric_value):
        row.status = "failed"
        row.error = "non-finite metric"
    return row


def _run_points(cfg: ExperimentConfig, grid: Sequence[float], offsets: Sequence[int], stage: str):
    target = build_target(cfg)
    scfg = build_sampler_config(cfg, target)
    keep = [0, 1] if cfg.resolved_metric == "coverage" else None
    K = cfg.chains
    ids = [k for _ in grid for k in range(K)]
    steps = np.repeat(np.asarray(grid, dtype=float), K)
    res = run_chains(target, cfg.sampler, scfg, cfg.steps, cfg.seed, ids, step_size=steps,
                     tuner=cfg.tuner_config(), burn_in_frac=cfg.burn_in_frac, keep_dims=keep, thin=cfg.thin)
    rows = []
    for j, h in enumerate(grid):
        row = _evaluate(cfg, target, res, slice(j * K, (j + 1) * K), h, stage, offsets[j])
        row.wall_time = res.wall_time / len(grid)
        rows.append(row)
    return rows


def _run_group(cfg: ExperimentConfig, grid: Sequence[float], offsets: Sequence[int], stage: str):
    """Run grid points as one batch; on error retry them one at a time.

    A point that still raises becomes a failure row; the sweep continues.
    """
    try:
        return _run_points(cfg, grid, offsets, stage)
    except Exception as exc:
        if len(grid) == 1:
            return [GridRow(step_size=grid[0], stage=stage, status="failed", error=f"{type(exc).__name__}: {exc}")]
    rows = []
    for h, off in zip(grid, offsets):
        rows.extend(_run_group(cfg, [h], [off], stage))
    return rows


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def sweep(cfg: ExperimentConfig, grid: Sequence[float], stage: str = "coarse", workers: Optional[int] = None,
          offset: int = 0) -> List[GridRow]:
    workers = min(resolve_workers(workers), len(grid))
    offsets = list(range(offset, offset + len(grid)))
    if workers == 1:
        return _run_group(cfg, list(grid), offsets, stage)
    groups = [list(range(w, len(grid), workers)) for w in range(workers)]
    rows: List[Optional[GridRow]] = [None] * len(grid)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_run_group, cfg, [grid[i] for i in g], [offsets[i] for i in g], stage)
                for g in groups]
        for g, fut in zip(groups, futs):
            for i, row in zip(g, fut.result()):
                rows[i] = row
    return rows


def select(rows: Sequence[GridRow], metric: str) -> Optional[int]:
    """Index of the best ok row: minimal bias/error, maximal coverage; ties go to the first."""
    best, best_val = None, None
    for i, r in enumerate(rows):
        if r.status != "ok":
            continue
        v = -r.metric_value if metric == "coverage" else r.metric_value
        if best_val is None or v < best_val:
            best, best_val = i, v
    return best


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, refine: Optional[bool] = None) -> RunResult:
    """Sweep the step grid (plus the optional 15-point refinement) and select the best point."""
    t0 = time.perf_counter()
    metric = cfg.resolved_metric
    rows = sweep(cfg, cfg.grid_values(), "coarse", workers)
    chosen = select(rows, metric)
    if (cfg.refine if refine is None else refine) and chosen is not None:
        fine = sweep(cfg, refine_grid(rows[chosen].step_size), "refine", workers, offset=len(rows))
        j = select(fine, metric)
        rows = rows + fine
        chosen = None if j is None else len(rows) - len(fine) + j
    if chosen is not None:
        rows[chosen].selected = True
    return RunResult(cfg, rows, chosen, time.perf_counter() - t0)


# --- output --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def csv_rows(result: RunResult) -> List[list]:
    cfg = result.config
    out = []
    for r in result.rows:
        per_dim = "" if r.per_dim_b2 is None else ";".join(repr(float(x)) for x in r.per_dim_b2)
        out.append([
            cfg.target_name, cfg.noise["kind"], cfg.sampler, _fmt(r.step_size), _fmt(r.aggregate_b2),
            _fmt(r.bootstrap_std), cfg.chains, r.n_samples_per_chain, r.stage, r.status, _fmt(r.selected),
            cfg.resolved_metric, _fmt(r.metric_value), _fmt(r.coverage), _fmt(r.max_rel_m2_error),
            _fmt(r.reset_frequency), _fmt(r.final_step_size), _fmt(r.mean_abs_de), r.n_diverged, per_dim,
        ])
    return out


def write_results(results: Sequence[RunResult], path) -> None:
    """Write the CSV table and a ``<path>.json`` sidecar holding each config echo.

    The CSV holds only seed-determined values, so reruns are byte-identical;
    wall times and error messages go to the sidecar.
    """
    path = str(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for res in results:
                w.writerows(csv_rows(res))
        side = {
            "format": SIDECAR_FORMAT,
            "config": results[0].config.to_dict() if len(results) == 1 else None,
            "runs": [{
                "config": res.config.to_dict(),
                "selected": res.selected,
                "wall_time": res.wall_time,
                "rows": [{"step_size": r.step_size, "stage": r.stage, "status": r.status, "error": r.error,
                          "wall_time": r.wall_time} for r in res.rows],
            } for res in results],
        }
        with open(path + ".json", "w") as fh:
            json.dump(side, fh, indent=2)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc


def write_trace(cfg: ExperimentConfig, path, step_size: Optional[float] = None) -> None:
    """Run the config once with the tuner on and stream the per-step trace to CSV."""
    target = build_target(cfg)
    scfg = build_sampler_config(cfg, target)
    if cfg.sampler not in TUNED_SAMPLERS:
        raise ValueError(f"the tuner does not drive {cfg.sampler!r}")
    tcfg = dict(cfg.tuner, enabled=True)
    h = cfg.grid_values()[0] if step_size is None else step_size
    chains = list(range(cfg.chains))
    with TraceWriter(path) as tw:
        def trace(t, state, abs_de, tune, rejected):
            tw.write(t, state.step_size, abs_de, tune.stats, rejected, chains)

        run_chains(target, cfg.sampler, scfg, cfg.steps, cfg.seed, chains, step_size=h,
                   tuner=TunerConfig(**tcfg), burn_in_frac=cfg.burn_in_frac, trace=trace)
