"""Reference posteriors: latent-space HMC, self-normalized importance
sampling from the prior, and a closed-form linear-Gaussian oracle."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .forward_models import ForwardProblem, log_likelihood_nodes
from .gan import GeneratorModel
from .nets import frozen_getter
from .util import derive_rng

log = logging.getLogger(__name__)


class SamplerError(Exception):
    pass


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class HmcConfig:
    n_samples: int  # retained draws, after burn-in is discarded
    n_leapfrog: int = 10
    target_accept: float = 0.75
    burn_in_fraction: float = 0.5
    initial_step: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_leapfrog < 1:
            raise SamplerError("n_leapfrog must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise SamplerError("target_accept must lie in (0, 1)")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise SamplerError("burn_in_fraction must lie in [0, 1)")


def leapfrog(z, p, grad_fn, step, n_steps):
    """Standard kick-drift-kick integrator for dH = -grad log target."""
    z = np.array(z, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    p = p + 0.5 * step * grad_fn(z)
    for k in range(n_steps):
        z = z + step * p
        g = grad_fn(z)
        p = p + (step if k < n_steps - 1 else 0.5 * step) * g
    return z, p


def hmc_sample(logp_and_grad, n_z: int, cfg: HmcConfig) -> dict:
    """Adaptive-step HMC with full momentum refresh and unit mass matrix.

    The step size follows a Robbins-Monro recursion toward the target
    acceptance during burn-in and is frozen afterwards.
    """
    rng = derive_rng(cfg.seed, "hmc")
    n_total = int(np.ceil(cfg.n_samples / (1.0 - cfg.burn_in_fraction)))
    n_burn = n_total - cfg.n_samples

    def split(z):
        lp, g = logp_and_grad(z)
        return float(lp), np.asarray(g, dtype=np.float64)

    z = rng.standard_normal(n_z)
    logp, _ = split(z)
    step = cfg.initial_step
    samples = np.empty((cfg.n_samples, n_z))
    n_accept_kept = 0
    alphas_kept = []

    def grad_only(v):
        return split(v)[1]

    for it in range(n_total):
        p0 = rng.standard_normal(n_z)
        z_new, p_new = leapfrog(z, p0, grad_only, step, cfg.n_leapfrog)
        logp_new, _ = split(z_new)
        if np.isfinite(logp_new):
            dh = (logp_new - 0.5 * p_new @ p_new) - (logp - 0.5 * p0 @ p0)
            alpha = min(1.0, float(np.exp(min(dh, 0.0)))) if dh < 0 else 1.0
        else:
            alpha = 0.0
        accept = rng.uniform() < alpha
        if accept:
            z, logp = z_new, logp_new
        if it < n_burn:
            # multiplicative Robbins-Monro update on log step
            step = float(np.exp(np.log(step) + 0.1 / np.sqrt(it + 1) * (alpha - cfg.target_accept)))
        else:
            samples[it - n_burn] = z
            alphas_kept.append(alpha)
            n_accept_kept += int(accept)

    accept_rate = n_accept_kept / max(cfg.n_samples, 1)
    stats = {
        "samples": samples,
        "accept_rate": accept_rate,
        "mean_alpha": float(np.mean(alphas_kept)) if alphas_kept else 0.0,
        "step_size": step,
        "n_burn": n_burn,
    }
    if accept_rate == 0.0:
        stats["warning"] = "all proposals rejected after burn-in (step size collapse)"
        log.warning(stats["warning"])
    return stats


def save_samples_csv(path, samples: np.ndarray) -> None:
    """One latent sample per row."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in np.atleast_2d(samples):
            writer.writerow([repr(v) for v in row])


# ---------------------------------------------------------------------------
# latent log-posteriors
# ---------------------------------------------------------------------------

def make_latent_logp(gen: GeneratorModel, problem: ForwardProblem, y_hat: np.ndarray):
    """Differentiable log p(y_hat | G(z)) + log p_Z(z), up to a constant.

    Every call evaluates the forward model once (counted on the problem).
    """
    g = ad.Graph()
    zn = g.input("z", (1, gen.n_z))
    x = gen.build(g, zn, frozen_getter(g, gen.params))
    x_nat = gen.rescaler.unrescale_node(g, x)
    loglik = ad.sum_(log_likelihood_nodes(problem, g, y_hat, x_nat))
    logprior = ad.mul(ad.sum_(ad.square(zn)), g.const(np.float64(-0.5)))
    logp = ad.add(loglik, logprior)
    grad = ad.grad_nodes(logp, [zn])[0]

    def fn(z):
        g.bind("z", np.asarray(z, dtype=np.float64).reshape(1, gen.n_z))
        try:
            g.recompute()
        except ad.NonFiniteError:
            return -np.inf, np.zeros(gen.n_z)
        return float(logp.value), grad.value.ravel().copy()

    return fn


# ---------------------------------------------------------------------------
# conjugate linear-Gaussian oracle
# ---------------------------------------------------------------------------

@dataclass
class ConjugateGaussianCase:
    """Affine generator + linear forward + Gaussian noise: the latent
    posterior is exactly Gaussian."""

    A_g: np.ndarray
    b_g: np.ndarray
    F_lin: np.ndarray
    sigma2: float
    y_hat: np.ndarray

    def __post_init__(self):
        self.A_g = np.asarray(self.A_g, dtype=np.float64)
        self.b_g = np.asarray(self.b_g, dtype=np.float64)
        self.F_lin = np.asarray(self.F_lin, dtype=np.float64)
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64)
        if self.sigma2 <= 0:
            raise SamplerError("sigma2 must be positive")
        if not (np.all(np.isfinite(self.A_g)) and np.all(np.isfinite(self.F_lin))):
            raise SamplerError("non-finite operator")

    @property
    def forward_map(self):
        return self.F_lin @ self.A_g


def conjugate_posterior(case: ConjugateGaussianCase):
    """(mu_post, Sigma_post) of the latent posterior."""
    M = case.forward_map
    n_z = M.shape[1]
    lam = np.eye(n_z) + M.T @ M / case.sigma2
    try:
        sigma = np.linalg.inv(lam)
    except np.linalg.LinAlgError as e:  # cannot happen for sigma2 > 0; guarded anyway
        raise SamplerError("singular posterior precision") from e
    mu = sigma @ (M.T @ (case.y_hat - case.F_lin @ case.b_g)) / case.sigma2
    return mu, sigma


def conjugate_log_evidence(case: ConjugateGaussianCase) -> float:
    """log p(y_hat) for the same linear-Gaussian model."""
    M = case.forward_map
    n_y = case.y_hat.size
    cov = M @ M.T + case.sigma2 * np.eye(n_y)
    resid = case.y_hat - case.F_lin @ case.b_g
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (resid @ np.linalg.solve(cov, resid)) - 0.5 * logdet - 0.5 * n_y * np.log(2 * np.pi))


def make_conjugate_logp(case: ConjugateGaussianCase):
    """Exact log-posterior (up to a constant) and gradient; no solves counted."""
    M = case.forward_map
    shift = case.y_hat - case.F_lin @ case.b_g

    def fn(z):
        z = np.asarray(z, dtype=np.float64)
        resid = shift - M @ z
        logp = -0.5 * resid @ resid / case.sigma2 - 0.5 * z @ z
        grad = M.T @ resid / case.sigma2 - z
        return float(logp), grad

    return fn


# ---------------------------------------------------------------------------
# self-normalized importance sampling
# ---------------------------------------------------------------------------

@dataclass
class ImportanceResult:
    mean: np.ndarray
    std: np.ndarray
    ess: float
    n: int
    reliable: bool


def importance_oracle(sample_fields, log_likelihood_fn, n: int, seed: int,
                      chunk: int = 4096) -> ImportanceResult:
    """Posterior mean/std fields from prior draws weighted by likelihood.

    sample_fields(rng, k) -> (k, n_x) prior draws; log_likelihood_fn(fields)
    -> (k,) log-likelihoods.  Two passes over regenerated chunks keep memory
    flat; weights are normalized by log-sum-exp, so any constant shift of the
    log-likelihood cancels.
    """
    if n < 1:
        raise SamplerError("need at least one particle")
    chunks = []
    start = 0
    idx = 0
    while start < n:
        k = min(chunk, n - start)
        chunks.append((idx, k))
        start += k
        idx += 1

    logw = np.empty(n)
    pos = 0
    for idx, k in chunks:
        fields = sample_fields(derive_rng(seed, "is-chunk", idx), k)
        logw[pos : pos + k] = log_likelihood_fn(fields)
        pos += k

    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    ess = float(1.0 / np.sum(w**2))
    reliable = ess >= 50.0
    if not reliable:
        log.warning("importance oracle ESS %.1f < 50: estimates unreliable", ess)

    mean = None
    second = None
    pos = 0
    for idx, k in chunks:
        fields = sample_fields(derive_rng(seed, "is-chunk", idx), k)
        wk = w[pos : pos + k]
        contrib = wk @ fields
        contrib2 = wk @ np.square(fields)
        mean = contrib if mean is None else mean + contrib
        second = contrib2 if second is None else second + contrib2
        pos += k
    var = np.maximum(second - mean**2, 0.0)
    return ImportanceResult(mean=mean, std=np.sqrt(var), ess=ess, n=n, reliable=reliable)
