"""Flow training against the latent posterior (reverse-KL objective).

The flow pushes the standard-normal latent prior onto the latent posterior;
its loss per batch is the mean of

    -log p(y_hat | G*(H(z))) - log p_Z(H(z)) - log|det dH/dz|

with the generator frozen.  Fresh standard-normal batches are drawn every
step, so the forward-solve budget is exactly epochs x batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flows import FlowModel
from .forward_models import ForwardProblem, log_likelihood_nodes
from .gan import GeneratorModel, TrainingDiverged
from .nets import frozen_getter, trainable_getter
from .optim import Adam
from .params import ParamVector
from .util import derive_rng


class VIError(Exception):
    pass


@dataclass
class VIConfig:
    epochs: int
    batch: int = 32
    lr: float = 2e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    patience: int = 0  # epochs on a 50-epoch moving average; 0 disables
    stride: int = 1  # history row every `stride` epochs
    prior_only: bool = False  # drop the likelihood term (the sigma2->inf limit)
    lr_decay: bool = False  # linear decay of the step size to 0.05 lr

    def __post_init__(self):
        if self.batch < 2:
            raise VIError("batch must be >= 2")
        if self.lr <= 0:
            raise VIError("lr must be positive")


@dataclass
class LatentPosteriorModel:
    flow: FlowModel
    generator: GeneratorModel  # frozen during VI
    problem: ForwardProblem
    y_hat: np.ndarray

    def __post_init__(self):
        if self.flow.n_z != self.generator.n_z:
            raise VIError("flow and generator disagree on the latent dimension")


def _loss_terms(g: ad.Graph, model: LatentPosteriorModel, z: ad.Node, get_psi, prior_only: bool):
    """Per-batch mean loss and its three mean terms (all scalar nodes)."""
    n_z = model.flow.n_z
    h, logdet = model.flow.build(g, z, get_psi)
    logpz = ad.add(
        ad.mul(ad.sum_(ad.square(h), axis=1), g.const(np.float64(-0.5))),
        g.const(np.float64(-0.5 * n_z * np.log(2.0 * np.pi))),
    )
    prior_term = -ad.mean(logpz)
    logdet_term = -ad.mean(logdet)
    if prior_only:
        loglik_term = g.const(np.float64(0.0))
    else:
        x = model.generator.build(g, h, frozen_getter(g, model.generator.params))
        x_nat = model.generator.rescaler.unrescale_node(g, x)
        loglik = log_likelihood_nodes(model.problem, g, model.y_hat, x_nat)
        loglik_term = -ad.mean(loglik)
    loss = ad.add(ad.add(loglik_term, prior_term), logdet_term)
    return loss, loglik_term, prior_term, logdet_term


def nf_loss(batch_z: np.ndarray, model: LatentPosteriorModel, prior_only: bool = False):
    """Loss value on one latent batch (counts forward solves)."""
    batch_z = np.asarray(batch_z, dtype=np.float64)
    if batch_z.ndim != 2 or batch_z.shape[0] < 2:
        raise VIError("nf_loss needs a (B >= 2, n_z) batch")
    g = ad.Graph()
    zn = g.const(batch_z)
    loss, *_ = _loss_terms(g, model, zn, frozen_getter(g, model.flow.params), prior_only)
    g.recompute()
    return float(loss.value)


class _VIStep:
    def __init__(self, model: LatentPosteriorModel, cfg: VIConfig):
        g = ad.Graph()
        self.g = g
        self.z = g.input("batch.z", (cfg.batch, model.flow.n_z))
        get_psi = trainable_getter(g, model.flow.params)
        self.loss, self.loglik, self.prior, self.logdet = _loss_terms(
            g, model, self.z, get_psi, cfg.prior_only
        )
        self.psi_names = [n for n in model.flow.params.segments if n in g.inputs]
        self.grads = ad.grad_nodes(self.loss, [g.inputs[n] for n in self.psi_names])

    def run(self, model, z, out_grad: ParamVector):
        g = self.g
        g.bind("batch.z", z)
        g.bind_params(model.flow.params)
        g.recompute()
        for name, node in zip(self.psi_names, self.grads):
            out_grad.set(name, node.value)
        return (
            float(self.loss.value),
            float(self.loglik.value),
            float(self.prior.value),
            float(self.logdet.value),
        )


def train_flow(model: LatentPosteriorModel, cfg: VIConfig):
    """Adam on the flow parameters only; returns (flow, history).

    History rows: (step, epoch, loss, loglik_term, prior_term, logdet_term,
    forward_solves).  The generator is never touched.
    """
    rng = derive_rng(cfg.seed, "vi-train")
    model.flow.initialize_actnorm(rng.standard_normal((max(cfg.batch, 32), model.flow.n_z)))
    step_graph = _VIStep(model, cfg)
    adam = Adam(len(model.flow.params), cfg.lr, cfg.betas)
    grad = model.flow.params.zeros_like()
    solve_base = model.problem.solve_count

    history = []
    best_ma = np.inf
    stale = 0
    last_terms = None
    try:
        for epoch in range(cfg.epochs):
            z = rng.standard_normal((cfg.batch, model.flow.n_z))
            loss, ll, pr, ld = step_graph.run(model, z, grad)
            last_terms = (loss, ll, pr, ld)
            if cfg.lr_decay:
                adam.lr = cfg.lr * max(0.05, 1.0 - epoch / cfg.epochs)
            adam.step(model.flow.params.data, grad.data)
            if epoch % cfg.stride == 0 or epoch == cfg.epochs - 1:
                history.append(
                    (epoch, epoch, loss, ll, pr, ld, model.problem.solve_count - solve_base)
                )
            if cfg.patience:
                window = [h[2] for h in history[-50:]]
                ma = float(np.mean(window))
                if ma < best_ma - 1e-12:
                    best_ma = ma
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    except ad.NonFiniteError as e:
        detail = f"last terms (loss, loglik, prior, logdet) = {last_terms}"
        raise TrainingDiverged(f"non-finite VI step: {e}; {detail}", history) from e
    model.flow._fwd_cache.clear()
    return model.flow, history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["step", "epoch", "loss", "loglik_term", "prior_term", "logdet_term", "forward_solves"]
        )
        writer.writerows(history)


def elbo_diagnostics(model: LatentPosteriorModel, n: int, seed: int = 0,
                     log_evidence: float | None = None, prior_only: bool = False) -> dict:
    """Loss mean +/- se, per-term breakdown, pushforward moments, and a
    sample KL estimate (exact up to +log evidence when that is unknown)."""
    if n < 1:
        raise VIError("diagnostics need n >= 1")
    rng = derive_rng(seed, "diagnostics")
    z = rng.standard_normal((n, model.flow.n_z))
    n_z = model.flow.n_z

    g = ad.Graph()
    zn = g.const(z)
    get_psi = frozen_getter(g, model.flow.params)
    h, logdet = model.flow.build(g, zn, get_psi)
    logpz_h = ad.add(
        ad.mul(ad.sum_(ad.square(h), axis=1), g.const(np.float64(-0.5))),
        g.const(np.float64(-0.5 * n_z * np.log(2.0 * np.pi))),
    )
    if prior_only:
        g.recompute()
        loglik_v = np.zeros(n)
    else:
        x = model.generator.build(g, h, frozen_getter(g, model.generator.params))
        x_nat = model.generator.rescaler.unrescale_node(g, x)
        loglik = log_likelihood_nodes(model.problem, g, model.y_hat, x_nat)
        g.recompute()
        loglik_v = loglik.value
    h_v, logdet_v, logpz_v = h.value, logdet.value, logpz_h.value
    logq = (-0.5 * np.sum(z**2, axis=1) - 0.5 * n_z * np.log(2 * np.pi)) - logdet_v
    loss_i = -loglik_v - logpz_v - logdet_v
    kl_i = logq - loglik_v - logpz_v + (log_evidence if log_evidence is not None else 0.0)

    def mean_se(v):
        return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(n))

    loss_mean, loss_se = mean_se(loss_i)
    kl_mean, kl_se = mean_se(kl_i)
    return {
        "n": n,
        "loss_mean": loss_mean,
        "loss_se": loss_se,
        "loglik_term": float(np.mean(-loglik_v)),
        "prior_term": float(np.mean(-logpz_v)),
        "logdet_term": float(np.mean(-logdet_v)),
        "kl_mean": kl_mean,
        "kl_se": kl_se,
        "kl_is_relative": log_evidence is None,
        "pushforward_mean": h_v.mean(axis=0),
        "pushforward_cov": np.cov(h_v.T) if n > 1 else np.zeros((n_z, n_z)),
    }
