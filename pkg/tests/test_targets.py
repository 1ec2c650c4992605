import itertools
import math

import numpy as np
import pytest
from scipy import integrate

from smile.targets import (
    GMM_VAR, MinibatchModel, NoiseKind, NoiseSpec, RegressionData, gaussian_target, gmm_centers, inject_noise,
    load_regression_csv, make_funnel, make_gmm25, make_icg, make_linreg_target, make_noise_spec,
    make_rosenbrock, random_rotation, rosenbrock_moments, sample_gmm25, synthesize_regression,
)


def _fd_grad(f, x, rel=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _targets():
    data = synthesize_regression(n=64, p=5, cond=100.0, rng=0)
    return {
        "icg": (make_icg(10, rng=0), 2.0),
        "rosenbrock": (make_rosenbrock(10), 1.0),
        "funnel": (make_funnel(10), 1.5),
        "gmm25": (make_gmm25(10), 3.0),
        "linreg": (make_linreg_target(data), 1.0),
    }


@pytest.mark.parametrize("name", ["icg", "rosenbrock", "funnel", "gmm25", "linreg"])
def test_gradient_matches_finite_differences(name):
    target, spread = _targets()[name]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = target.init_position + spread * rng.standard_normal(target.dim)
        g = target.gradient(x)
        fd = _fd_grad(target.log_density, x)
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0))
    assert worst < 1e-5


def test_batched_evaluation_matches_rows():
    for target, _ in _targets().values():
        x = np.random.default_rng(0).standard_normal((3, 4, target.dim))
        logp, grad = target.log_density_and_grad(x)
        assert logp.shape == (3, 4) and grad.shape == x.shape
        lp, g = target.log_density_and_grad(x[1, 2])
        assert np.isclose(logp[1, 2], lp) and np.allclose(grad[1, 2], g)


def test_identity_gaussian_gradient():
    t = gaussian_target(np.eye(4))
    x = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(t.gradient(x), -x)
    assert t.log_density(np.zeros(4)) == pytest.approx(-2 * math.log(2 * math.pi))


def test_icg_moments_and_trace():
    t = make_icg(10, rng=3)
    cov = t.meta["cov"]
    assert np.allclose(cov, cov.T)
    assert np.allclose(np.linalg.eigvalsh(cov), np.logspace(-2, 2, 10))
    assert np.sum(t.exact_second_moments) == pytest.approx(np.sum(np.logspace(-2, 2, 10)))
    assert np.allclose(t.exact_var_theta2, 2 * np.diag(cov) ** 2)
    rot = t.meta["rotation"]
    assert np.allclose(rot.T @ rot, np.eye(10))


def test_icg_validation():
    with pytest.raises(ValueError):
        make_icg(1)
    with pytest.raises(ValueError):
        make_icg(10, cond_lo=1.0, cond_hi=0.5)


def test_rosenbrock_mode_and_validation():
    t = make_rosenbrock(4)
    assert t.log_density(np.ones(4)) == 0.0
    assert np.allclose(t.gradient(np.ones(4)), 0.0)
    with pytest.raises(ValueError):
        make_rosenbrock(5)
    with pytest.raises(ValueError):
        make_rosenbrock(4, Q=0.0)


def test_rosenbrock_moments_against_quadrature():
    Q = 0.1
    t = make_rosenbrock(2, Q)

    def moment(fn):
        # y | x is concentrated around x^2, so integrate y over a window around it
        def inner(y, x):
            return fn(x, y) * math.exp(t.log_density(np.array([x, y])))
        val, _ = integrate.dblquad(inner, -4.0, 6.0, lambda x: x * x - 3.0, lambda x: x * x + 3.0,
                                   epsabs=1e-11, epsrel=1e-10)
        return val

    z = moment(lambda x, y: 1.0)
    m2 = np.array([moment(lambda x, y: x * x), moment(lambda x, y: y * y)]) / z
    m4 = np.array([moment(lambda x, y: x ** 4), moment(lambda x, y: y ** 4)]) / z
    mean, exact_m2, exact_var = rosenbrock_moments(Q)
    assert np.allclose(m2, exact_m2, rtol=1e-6)
    assert np.allclose(m4 - m2 ** 2, exact_var, rtol=1e-6)
    assert exact_m2[0] == pytest.approx(1.5)
    assert exact_m2[1] == pytest.approx(4.8)
    assert np.allclose(t.exact_second_moments, exact_m2)


def test_funnel_gradient_at_origin_and_moments():
    t = make_funnel(10)
    g = t.gradient(np.zeros(10))
    assert g[0] == pytest.approx(-4.5) and np.allclose(g[1:], 0.0)
    assert t.exact_second_moments[0] == 9.0
    assert t.exact_second_moments[1] == pytest.approx(math.exp(4.5))
    assert t.exact_var_theta2[0] == 162.0
    assert t.default_aggregation == "max"

    rng = np.random.default_rng(0)
    t1 = 3.0 * rng.standard_normal(400_000)
    assert np.mean(t1 ** 2) == pytest.approx(9.0, rel=0.02)
    assert np.var(t1 ** 2) == pytest.approx(162.0, rel=0.05)
    # E[theta_i^2] = E[exp(theta_1)] has a heavy tail; check it through the lognormal mean
    assert np.mean(np.exp(t1)) == pytest.approx(math.exp(4.5), rel=0.1)


def test_funnel_normalisation_in_two_dims():
    t = make_funnel(2)
    val, _ = integrate.dblquad(lambda y, x: math.exp(t.log_density(np.array([x, y]))), -25, 25,
                               lambda x: -60 * math.exp(x / 2), lambda x: 60 * math.exp(x / 2))
    assert val == pytest.approx(1.0, rel=1e-6)


def _gmm_grid_moments():
    t = make_gmm25(2)
    xs = np.linspace(-8.0, 8.0, 1601)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    p = np.exp(t.log_density(np.stack([X, Y], axis=-1)))
    z = np.trapezoid(np.trapezoid(p, xs), xs)
    m2 = np.trapezoid(np.trapezoid(p * X ** 2, xs), xs) / z
    m4 = np.trapezoid(np.trapezoid(p * X ** 4, xs), xs) / z
    return z, m2, m4


def test_gmm_moments_against_quadrature():
    z, m2, m4 = _gmm_grid_moments()
    t = make_gmm25(10)
    assert z == pytest.approx(1.0, rel=1e-6)
    assert m2 == pytest.approx(8.3, rel=1e-6)
    assert t.exact_second_moments[0] == pytest.approx(m2, rel=1e-6)
    assert t.exact_var_theta2[0] == pytest.approx(m4 - m2 ** 2, rel=1e-6)
    assert np.allclose(t.exact_second_moments[2:], 1.0)


def test_gmm_gradient_and_modes():
    t = make_gmm25(4)
    assert np.allclose(t.gradient(np.zeros(4)), 0.0, atol=1e-12)
    centers = gmm_centers()
    assert centers.shape == (25, 2)
    at_mode = t.log_density(np.array([2.0, -4.0, 0.0, 0.0]))
    between = t.log_density(np.array([1.0, -4.0, 0.0, 0.0]))
    assert at_mode > between
    draws = sample_gmm25(200_000, 0)
    assert np.mean(draws[:, 0] ** 2) == pytest.approx(8.0 + GMM_VAR, rel=0.02)


def test_noise_none_is_identity():
    spec = make_noise_spec("none", make_icg(4, rng=0))
    g = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(inject_noise(g, np.zeros(4), spec, np.random.default_rng(0)), g)


def _noise_samples(spec, theta, n=100_000, d=10):
    rng = np.random.default_rng(11)
    return inject_noise(np.zeros((n, d)), np.broadcast_to(theta, (n, d)), spec, rng)


def test_isotropic_noise_statistics():
    spec = make_noise_spec("isotropic", make_icg(10, rng=0))
    eps = _noise_samples(spec, np.zeros(10))
    assert np.max(np.abs(eps.mean(axis=0))) < 0.5
    assert np.allclose(eps.var(axis=0), 256.0, rtol=0.03)


def test_diagonal_noise_statistics():
    spec = make_noise_spec("diagonal", make_icg(10, rng=0))
    eps = _noise_samples(spec, np.zeros(10))
    assert np.allclose(eps.var(axis=0), 256.0 * np.logspace(-2, 2, 10), rtol=0.03)


def test_correlated_noise_statistics():
    spec = make_noise_spec("correlated", make_icg(10, rng=0), rng=4)
    eps = _noise_samples(spec, np.zeros(10))
    emp = np.cov(eps.T)
    v = spec.covariance(d=10)
    scale = np.sqrt(np.outer(np.diag(v), np.diag(v)))
    assert np.max(np.abs(emp - v) / scale) < 0.05
    rot = spec.rotation
    assert np.allclose(v, 256.0 * rot.T @ np.diag(np.logspace(-2, 2, 10)) @ rot)


def test_spatially_varied_noise():
    t = make_funnel(10)
    spec = make_noise_spec("spatially_varied", t, rng=4)
    base = NoiseSpec("correlated", 256.0, spec.eigvals, spec.rotation)
    assert np.allclose(spec.covariance(np.zeros(10)), base.covariance(d=10))
    theta = np.zeros(10)
    theta[1] = 2.0 * spec.spatial_std
    assert np.allclose(spec.covariance(theta), base.covariance(d=10) * math.exp(-2.0))
    eps = _noise_samples(spec, theta)
    assert np.allclose(eps.var(axis=0), np.diag(spec.covariance(theta)), rtol=0.05)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("diagonal", 256.0, np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        NoiseSpec("correlated", 256.0, np.ones(2), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        NoiseSpec("isotropic", -1.0)
    with pytest.raises(ValueError):
        NoiseSpec("bogus")
    assert NoiseSpec("isotropic").kind is NoiseKind.ISOTROPIC


def test_random_rotation_is_orthogonal():
    r = random_rotation(7, np.random.default_rng(0))
    assert np.allclose(r.T @ r, np.eye(7))
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_full_batch_is_exact():
    data = synthesize_regression(n=40, p=3, rng=1)
    mb = MinibatchModel(data)
    theta = np.array([0.3, -1.0, 2.0])
    full = mb.log_density_and_grad(theta)
    batch = mb.log_density_and_grad(theta, np.arange(40))
    assert np.allclose(full[0], batch[0]) and np.allclose(full[1], batch[1])


def test_minibatch_gradient_is_unbiased_by_enumeration():
    data = synthesize_regression(n=8, p=3, rng=2)
    mb = MinibatchModel(data)
    theta = np.array([0.5, 0.1, -0.7])
    pairs = np.array(list(itertools.combinations(range(8), 2)))
    avg = mb.minibatch_grad(np.broadcast_to(theta, (len(pairs), 3)), pairs).mean(axis=0)
    assert np.allclose(avg, mb.minibatch_grad(theta, None), atol=1e-12)


def test_minibatch_rejects_empty_batch():
    mb = MinibatchModel(synthesize_regression(n=8, p=2, rng=0))
    with pytest.raises(ValueError):
        mb.log_density_and_grad(np.zeros(2), np.array([], dtype=int))


def test_posterior_matches_augmented_least_squares():
    data = synthesize_regression(n=200, p=4, cond=100.0, noise_var=0.5, prior_var=2.0, rng=3)
    # ridge posterior mean is the least-squares solution of the prior-augmented system
    A = np.vstack([data.design / math.sqrt(data.noise_var), np.eye(4) / math.sqrt(data.prior_var)])
    b = np.concatenate([data.responses / math.sqrt(data.noise_var), np.zeros(4)])
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    mean, cov = data.posterior()
    assert np.allclose(mean, sol, atol=1e-10)
    assert np.allclose(cov, np.linalg.pinv(A.T @ A), atol=1e-12)
    t = make_linreg_target(data)
    assert np.allclose(t.gradient(mean), 0.0, atol=1e-8)
    assert np.allclose(t.exact_second_moments, mean ** 2 + np.diag(cov))


def test_synthetic_conditioning():
    data = synthesize_regression(n=4096, p=5, cond=100.0, rng=0)
    assert 50 < np.linalg.cond(data.design.T @ data.design) < 200
    data = synthesize_regression(n=4096, p=5, cond=1.0, rng=0)
    assert np.linalg.cond(data.design.T @ data.design) < 1.3


def test_regression_validation():
    with pytest.raises(ValueError):
        RegressionData(np.ones((3, 2)), np.ones(4))
    with pytest.raises(ValueError):
        RegressionData(np.ones((3, 2)), np.ones(3), noise_var=0.0)


def test_regression_csv_round_trip(tmp_path):
    data = synthesize_regression(n=20, p=3, rng=5)
    path = tmp_path / "data.csv"
    rows = np.column_stack([data.design, data.responses])
    with open(path, "w") as fh:
        fh.write("x1,x2,x3,y\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
    loaded = load_regression_csv(path)
    assert np.array_equal(loaded.design, data.design)
    assert np.array_equal(loaded.responses, data.responses)
    (tmp_path / "empty.csv").write_text("x,y\n")
    with pytest.raises(ValueError):
        load_regression_csv(tmp_path / "empty.csv")
