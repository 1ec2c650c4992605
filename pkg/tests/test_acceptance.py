"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (also collected in the terminal summary).
Budgets: 10 chains x 2e5 steps for the bias sweeps, so the whole module
takes several minutes on one core.  Set SMILE_BENCH_WORKERS to parallelise
grid points.
"""
import math

import numpy as np
import pytest
from scipy.special import gammainc

from smile.bench import config_from_dict, run_experiment, write_results
from smile.bench.runner import build_target
from smile.chains import run_chains
from smile.dynamics import init_state, integrator_step, normalize
from smile.samplers import SamplerConfig
from smile.targets import make_icg, make_noise_spec
from smile.tuner import TunerConfig, gamma_quantile_wh

pytestmark = pytest.mark.acceptance

CHAINS = 10
STEPS = 200_000
COARSE = {"coarse": [-6, 0]}


def sweep(**kw):
    raw = {"chains": CHAINS, "steps": STEPS, "step_grid": COARSE, "seed": 0}
    raw.update(kw)
    return run_experiment(config_from_dict(raw))


def best_b2(result):
    return result.best.aggregate_b2, result.best.step_size


@pytest.fixture(scope="module")
def icg_diagonal():
    naive = sweep(target="icg", sampler="smile_naive", noise="diagonal")
    pre = sweep(target="icg", sampler="psmile", noise="diagonal")
    return naive, pre


@pytest.fixture(scope="module")
def funnel_correlated():
    naive = sweep(target="funnel", sampler="smile_naive", noise="correlated")
    pre = sweep(target="funnel", sampler="psmile", noise="correlated")
    return naive, pre


def test_isotropic_stationarity(acceptance_report):
    b2, h = best_b2(sweep(target="icg", sampler="smile_naive", noise="isotropic"))
    ok = b2 < 0.02
    acceptance_report(1, ok, f"SMILE-naive ICG isotropic b2={b2:.4g} at step {h:g} (need < 0.02)")
    assert ok


def test_anisotropic_bias(icg_diagonal, acceptance_report):
    naive, pre = icg_diagonal
    b_naive, h_naive = best_b2(naive)
    b_pre, h_pre = best_b2(pre)
    ok = b_naive > 0.05 and b_pre <= b_naive / 2
    acceptance_report(2, ok, f"ICG diagonal: SMILE-naive b2={b_naive:.4g} (step {h_naive:g}, need > 0.05), "
                             f"pSMILE b2={b_pre:.4g} (step {h_pre:g}, need <= {b_naive / 2:.4g})")
    assert ok


def test_funnel_correlated_ordering(funnel_correlated, acceptance_report):
    naive, pre = funnel_correlated
    b_naive, h_naive = best_b2(naive)
    b_pre, h_pre = best_b2(pre)
    ok = b_pre < b_naive
    acceptance_report(3, ok, f"funnel correlated max-dim b2: pSMILE={b_pre:.4g} (step {h_pre:g}, "
                             f"+/- {pre.best.bootstrap_std:.2g}) vs SMILE-naive={b_naive:.4g} "
                             f"(step {h_naive:g}, +/- {naive.best.bootstrap_std:.2g}); need pSMILE < naive")
    assert ok


def test_full_batch_baseline(acceptance_report):
    target = build_target(config_from_dict({"target": "icg", "sampler": "mclmc"}))
    L = math.sqrt(float(np.sum(target.exact_second_moments)))
    b2, h = best_b2(sweep(target="icg", sampler="mclmc", decoherence_L=L))
    ok = b2 < 0.005
    acceptance_report(4, ok, f"MCLMC ICG exact gradients, L={L:.3g}: b2={b2:.3g} at step {h:g} (need < 0.005)")
    assert ok


def test_integrator_order_and_reversibility(acceptance_report):
    t = make_icg(10, rng=0)
    rng = np.random.default_rng(0)
    n = 100
    # start on the stationary distribution so every step size averages over the same region
    x0 = (rng.standard_normal((n, 10)) * np.sqrt(t.meta["eigvals"])) @ t.meta["rotation"]
    u0 = normalize(rng.standard_normal((n, 10)))
    steps = [0.05, 0.025, 0.0125]
    mean_de = []
    for h in steps:
        s = init_state(x0, t.log_density_and_grad, h, momentum_dir=u0)
        acc = np.zeros(n)
        for _ in range(1000):
            out = integrator_step(s, t.log_density_and_grad)
            acc += np.abs(out.energy_delta)
            s = out.new_state
        mean_de.append(acc.mean() / 1000)
    slope = np.polyfit(np.log(steps), np.log(mean_de), 1)[0]

    s0 = init_state(x0, t.log_density_and_grad, 0.05, momentum_dir=u0)
    s = s0
    for _ in range(50):
        s = integrator_step(s, t.log_density_and_grad).new_state
    s.momentum_dir = -s.momentum_dir
    for _ in range(50):
        s = integrator_step(s, t.log_density_and_grad).new_state
    rel = np.max(np.linalg.norm(s.position - x0, axis=1) / np.linalg.norm(x0, axis=1))
    ok = 2.7 <= slope <= 3.3 and rel < 1e-8
    acceptance_report(5, ok, f"log-log slope of mean |dE| = {slope:.3f} (need [2.7, 3.3]); "
                             f"reversibility rel. error = {rel:.2e} (need < 1e-8)")
    assert ok


def _gamma_ppf_bisect(p, k):
    lo, hi = 0.0, 1.0
    while gammainc(k, hi) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if gammainc(k, mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def test_wilson_hilferty_accuracy(acceptance_report):
    worst = 0.0
    for k in (1, 2, 5, 10):
        for p in (0.90, 0.95, 0.98, 0.99):
            exact = _gamma_ppf_bisect(p, k)
            worst = max(worst, abs(float(gamma_quantile_wh(p, k, 1.0)) / exact - 1.0))
    median = float(gamma_quantile_wh(0.5, 1.0, 1.0))
    ok = worst < 0.02 and abs(median - (8 / 9) ** 3) < 1e-12
    acceptance_report(6, ok, f"worst relative error {worst:.4f} (need < 0.02); "
                             f"q(0.5; 1, 1) = {median:.6f} vs (8/9)^3 = {(8 / 9) ** 3:.6f}")
    assert ok


def test_guardrail_calibration(funnel_correlated, acceptance_report):
    _, pre = funnel_correlated
    h = pre.best.step_size
    target = build_target(config_from_dict({"target": "funnel", "sampler": "psmile"}))
    cfg = SamplerConfig(step_size=h, noise_spec=make_noise_spec("correlated", target, rng=1))
    tuned = run_chains(target, "psmile", cfg, 60_000, 0, range(CHAINS), tuner=TunerConfig())
    freq = float(tuned.reset_frequency.mean())
    ok_freq = 0.01 <= freq <= 0.05

    loose = run_chains(target, "psmile", cfg, 100_000, 0, range(CHAINS), step_size=3 * h,
                       tuner=TunerConfig(guardrail=False))
    guarded = run_chains(target, "psmile", cfg, 100_000, 0, range(CHAINS), step_size=3 * h,
                         tuner=TunerConfig())
    n_div = int(loose.diverged.sum())
    reach = float(np.max(np.abs(loose.final_state.position)))
    bounded = not guarded.diverged.any()
    ok = ok_freq and n_div >= 1 and bounded
    acceptance_report(7, ok, f"tuned pSMILE reset frequency {freq:.4f} over 6e4 steps (need [0.01, 0.05]); "
                             f"no-guardrail run at 3x{h:g}: {n_div} divergent chain(s) (need >= 1, "
                             f"final max|theta|={reach:.3g}); guarded run bounded={bounded}")
    assert ok


LINREG_GRID = list(np.logspace(-4, -1, 10))


def _linreg(sampler, cond):
    return run_experiment(config_from_dict({
        "target": {"name": "linreg", "n": 1024, "p": 5, "cond": cond, "seed": 0},
        "sampler": sampler, "batch_size": 32, "chains": CHAINS, "steps": 100_000,
        "step_grid": LINREG_GRID, "metric": "moment_error", "seed": 0,
    }))


def test_minibatch_oracle(acceptance_report):
    well = _linreg("psmile", 1.0)
    naive = _linreg("smile_naive", 100.0)
    pre = _linreg("psmile", 100.0)
    err_well = well.best.max_rel_m2_error
    e_naive, e_pre = naive.best.max_rel_m2_error, pre.best.max_rel_m2_error
    ok = err_well < 0.05 and e_naive > e_pre
    acceptance_report(8, ok, f"pSMILE worst second-moment error {err_well:.2e} at step {well.best.step_size:.3g} "
                             f"(need < 0.05); cond 100: SMILE-naive {e_naive:.3e} vs pSMILE {e_pre:.3e} "
                             f"(need naive > pSMILE)")
    assert ok


def test_gmm_coverage(acceptance_report):
    res = run_experiment(config_from_dict({
        "target": "gmm25", "sampler": "psmile", "noise": "isotropic", "chains": CHAINS,
        "steps": 100_000, "step_grid": [0.6], "metric": "coverage", "seed": 0,
    }))
    cov = res.best.coverage
    ok = cov >= 20
    acceptance_report(9, ok, f"pSMILE-naive GMM coverage {cov}/25 at step 0.6 (need >= 20)")
    assert ok


def test_determinism(tmp_path, acceptance_report):
    configs = [
        {"target": "icg", "sampler": "psmile", "noise": "diagonal", "chains": 4, "steps": 3000,
         "step_grid": [1e-3, 1e-2, 1e-1], "tuner": {"enabled": True}},
        {"target": {"name": "linreg", "cond": 100.0}, "sampler": "smile_naive", "batch_size": 32,
         "chains": 3, "steps": 2000, "step_grid": [1e-3, 1e-2]},
        {"target": "funnel", "sampler": "sghmc", "noise": "spatially_varied", "chains": 3, "steps": 2000,
         "step_grid": [1e-3, 1e-2]},
    ]
    same = True
    for i, raw in enumerate(configs):
        cfg = config_from_dict(raw)
        blobs = []
        for rep in range(2):
            path = tmp_path / f"run{i}_{rep}.csv"
            write_results([run_experiment(cfg)], path)
            blobs.append(path.read_bytes())
        same &= blobs[0] == blobs[1]
    acceptance_report(10, same, f"{len(configs)} configs run twice: byte-identical CSV = {same}")
    assert same
