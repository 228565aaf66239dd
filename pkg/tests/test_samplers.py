"""Sampler calibration: HMC on known Gaussians, leapfrog reversibility,
conjugate oracle vs grid quadrature, importance-sampling identities."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from ganflow.samplers import (
    ConjugateGaussianCase,
    HmcConfig,
    ImportanceResult,
    SamplerError,
    conjugate_log_evidence,
    conjugate_posterior,
    hmc_sample,
    importance_oracle,
    leapfrog,
    make_conjugate_logp,
)


# ---------------------------------------------------------------------------
# HMC
# ---------------------------------------------------------------------------

def std_normal_logp(z):
    return -0.5 * float(z @ z), -z


def test_hmc_standard_normal_calibration():
    cfg = HmcConfig(n_samples=20_000, seed=0)
    out = hmc_sample(std_normal_logp, 10, cfg)
    assert 0.6 <= out["accept_rate"] <= 0.9
    s = out["samples"]
    assert np.abs(s.mean(axis=0)).max() < 0.05
    d = s.var(axis=0, ddof=1)
    assert np.all((0.9 <= d) & (d <= 1.1))


def test_hmc_correlated_gaussian():
    rho = 0.8
    cov = np.array([[1.0, rho], [rho, 1.0]])
    prec = np.linalg.inv(cov)
    mu = np.array([1.0, -2.0])

    def logp(z):
        d = z - mu
        return -0.5 * float(d @ prec @ d), -prec @ d

    cfg = HmcConfig(n_samples=20_000, seed=1)
    out = hmc_sample(logp, 2, cfg)
    s = out["samples"]
    assert abs(np.corrcoef(s.T)[0, 1] - rho) < 0.05
    assert np.abs(s.mean(axis=0) - mu).max() < 0.05


def test_hmc_chain_passes_ks_against_normal():
    cfg = HmcConfig(n_samples=20_000, seed=2)
    out = hmc_sample(std_normal_logp, 1, cfg)
    thinned = out["samples"][::5, 0]
    assert stats.kstest(thinned, stats.norm.cdf).pvalue > 0.01


def test_hmc_deterministic_under_seed():
    cfg = HmcConfig(n_samples=500, seed=3)
    a = hmc_sample(std_normal_logp, 3, cfg)
    b = hmc_sample(std_normal_logp, 3, cfg)
    assert np.array_equal(a["samples"], b["samples"])
    assert a["step_size"] == b["step_size"]


def test_hmc_zero_leapfrog_rejected():
    with pytest.raises(SamplerError):
        HmcConfig(n_samples=10, n_leapfrog=0)


def test_leapfrog_time_reversible():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(4, 4))
    prec = A @ A.T + np.eye(4)

    def grad(z):
        return -prec @ z

    z0 = rng.normal(size=4)
    p0 = rng.normal(size=4)
    z1, p1 = leapfrog(z0, p0, grad, 0.05, 10)
    z2, p2 = leapfrog(z1, -p1, grad, 0.05, 10)
    assert np.abs(z2 - z0).max() < 1e-10
    assert np.abs(-p2 - p0).max() < 1e-10


# ---------------------------------------------------------------------------
# conjugate oracle
# ---------------------------------------------------------------------------

def random_case(seed, n_z=2, n_x=5, n_y=4, sigma2=0.5):
    rng = np.random.default_rng(seed)
    return ConjugateGaussianCase(
        A_g=rng.normal(size=(n_x, n_z)),
        b_g=rng.normal(size=n_x),
        F_lin=rng.normal(size=(n_y, n_x)),
        sigma2=sigma2,
        y_hat=rng.normal(size=n_y),
    )


def test_conjugate_no_information_returns_prior():
    case = random_case(5)
    case.F_lin = np.zeros_like(case.F_lin)
    mu, sigma = conjugate_posterior(case)
    assert np.abs(mu).max() == 0.0
    assert np.abs(sigma - np.eye(2)).max() < 1e-14


def test_conjugate_vanishing_information_limit():
    case = random_case(6, sigma2=1e12)
    mu, sigma = conjugate_posterior(case)
    assert np.abs(mu).max() < 1e-6
    assert np.abs(sigma - np.eye(2)).max() < 1e-6


def grid_moments(case, half_width=9.0, n_grid=241):
    """Trapezoid quadrature of the unnormalized posterior on a 2-D grid."""
    M = case.forward_map
    shift = case.y_hat - case.F_lin @ case.b_g
    axis = np.linspace(-half_width, half_width, n_grid)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    resid = shift[None, :] - pts @ M.T
    logs = -0.5 * np.sum(resid**2, axis=1) / case.sigma2 - 0.5 * np.sum(pts**2, axis=1)
    dens = np.exp(logs - logs.max()).reshape(n_grid, n_grid)
    h = axis[1] - axis[0]
    mass = np.trapezoid(np.trapezoid(dens, dx=h), dx=h)
    mx = np.trapezoid(np.trapezoid(dens * gx, dx=h), dx=h) / mass
    my = np.trapezoid(np.trapezoid(dens * gy, dx=h), dx=h) / mass
    vxx = np.trapezoid(np.trapezoid(dens * (gx - mx) ** 2, dx=h), dx=h) / mass
    vyy = np.trapezoid(np.trapezoid(dens * (gy - my) ** 2, dx=h), dx=h) / mass
    vxy = np.trapezoid(np.trapezoid(dens * (gx - mx) * (gy - my), dx=h), dx=h) / mass
    return np.array([mx, my]), np.array([[vxx, vxy], [vxy, vyy]])


def test_conjugate_matches_grid_quadrature_many_cases():
    for seed in range(50):
        case = random_case(100 + seed)
        mu, sigma = conjugate_posterior(case)
        gmu, gsigma = grid_moments(case)
        assert np.abs(mu - gmu).max() < 5e-3
        assert np.abs(sigma - gsigma).max() < 5e-3


def test_conjugate_4d_density_consistency():
    """In 4-D, check the analytic density against the quadratic form."""
    case = random_case(7, n_z=4, n_x=8, n_y=6)
    mu, sigma = conjugate_posterior(case)
    logp = make_conjugate_logp(case)
    prec = np.linalg.inv(sigma)
    rng = np.random.default_rng(8)
    z0 = rng.normal(size=4)
    z1 = rng.normal(size=4)
    # log-density differences must match the Gaussian quadratic form exactly
    want = -0.5 * ((z1 - mu) @ prec @ (z1 - mu) - (z0 - mu) @ prec @ (z0 - mu))
    got = logp(z1)[0] - logp(z0)[0]
    assert abs(got - want) < 1e-9


def test_conjugate_rejects_bad_sigma():
    with pytest.raises(SamplerError):
        ConjugateGaussianCase(np.eye(2), np.zeros(2), np.eye(2), 0.0, np.zeros(2))


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------

def test_importance_constant_likelihood_returns_prior_moments():
    def sampler(rng, k):
        return rng.normal(1.5, 2.0, size=(k, 3))

    res = importance_oracle(sampler, lambda f: np.zeros(f.shape[0]), n=200_000, seed=9)
    assert np.abs(res.mean - 1.5).max() < 0.02
    assert np.abs(res.std - 2.0).max() < 0.02
    assert res.ess == pytest.approx(200_000)


def test_importance_weights_shift_invariant():
    def sampler(rng, k):
        return rng.normal(size=(k, 2))

    def ll(fields):
        return -0.5 * np.sum((fields - 0.7) ** 2, axis=1)

    a = importance_oracle(sampler, ll, n=50_000, seed=10)
    b = importance_oracle(sampler, lambda f: ll(f) + 1234.5, n=50_000, seed=10)
    assert np.abs(a.mean - b.mean).max() < 1e-12
    assert np.abs(a.std - b.std).max() < 1e-12
    assert a.ess == pytest.approx(b.ess)


def test_importance_matches_conjugate_oracle():
    """Treat z itself as the parameter: IS must recover the analytic posterior."""
    case = random_case(11, n_z=2, n_x=4, n_y=3, sigma2=1.0)
    mu, sigma = conjugate_posterior(case)
    M = case.forward_map
    shift = case.y_hat - case.F_lin @ case.b_g

    def sampler(rng, k):
        return rng.standard_normal((k, 2))

    def ll(zs):
        resid = shift[None, :] - zs @ M.T
        return -0.5 * np.sum(resid**2, axis=1) / case.sigma2

    res = importance_oracle(sampler, ll, n=400_000, seed=12)
    se = np.sqrt(np.diag(sigma) / res.ess)
    assert np.all(np.abs(res.mean - mu) < 3.0 * se + 1e-3)
    assert np.abs(res.std - np.sqrt(np.diag(sigma))).max() < 0.05


def test_importance_flags_low_ess():
    def sampler(rng, k):
        return rng.normal(size=(k, 1))

    def ll(fields):
        return -5000.0 * (fields[:, 0] - 3.0) ** 2  # essentially one surviving particle

    res = importance_oracle(sampler, ll, n=2000, seed=13)
    assert not res.reliable
    assert res.ess < 50


def test_importance_reproducible_across_worker_counts(monkeypatch):
    def sampler(rng, k):
        return rng.normal(size=(k, 2))

    def ll(fields):
        return -0.5 * np.sum(fields**2, axis=1)

    a = importance_oracle(sampler, ll, n=10_000, seed=14)
    monkeypatch.setenv("GANFLOW_THREADS", "8")
    b = importance_oracle(sampler, ll, n=10_000, seed=14)
    assert np.array_equal(a.mean, b.mean)


def test_log_evidence_matches_quadrature():
    case = random_case(15, n_z=2, n_x=4, n_y=3)
    logz = conjugate_log_evidence(case)
    # quadrature of likelihood * prior over the 2-D latent grid
    logp = make_conjugate_logp(case)
    axis = np.linspace(-7, 7, 241)
    h = axis[1] - axis[0]
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logs = np.array([logp(p)[0] for p in pts]).reshape(241, 241)
    # add the constants dropped by make_conjugate_logp
    n_y = case.y_hat.size
    logs += -0.5 * n_y * np.log(2 * np.pi * case.sigma2) - np.log(2 * np.pi)
    quad = np.log(np.trapezoid(np.trapezoid(np.exp(logs - logs.max()), dx=h), dx=h)) + logs.max()
    assert abs(quad - logz) < 1e-6
