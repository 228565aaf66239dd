"""WGAN-GP prior training and the trained latent-to-ambient generator.

The critic is pushed toward 1-Lipschitz by penalizing the gradient norm of
its output along real/fake interpolates; that penalty is differentiated with
respect to the critic parameters through adjoint nodes (double backprop).
An analytic affine generator doubles as a ground-truth oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import autodiff as ad
from . import config as cfgmod
from .nets import DenseNet, frozen_getter, trainable_getter
from .optim import Adam
from .params import ParamVector
from .prior_data import Rescaler
from .util import derive_rng


class GanError(Exception):
    pass


class TrainingDiverged(GanError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class GeneratorModel:
    kind: str  # "dense-net" | "affine-oracle"
    n_z: int
    n_x: int
    params: ParamVector
    rescaler: Rescaler
    widths: tuple = ()

    @classmethod
    def dense(cls, n_z, n_x, widths, seed, rescaler) -> "GeneratorModel":
        net = DenseNet("gen", (n_z, *widths, n_x), hidden_act="leaky_relu", out_act="tanh")
        params = ParamVector.from_dict(net.init_params(derive_rng(seed, "gen-init")))
        return cls("dense-net", n_z, n_x, params, rescaler, tuple(widths))

    @classmethod
    def affine_oracle(cls, A, b, rescaler=None) -> "GeneratorModel":
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        params = ParamVector.from_dict({"gen.A": A, "gen.b": b})
        return cls("affine-oracle", A.shape[1], A.shape[0], params, rescaler or Rescaler(-1.0, 1.0))

    def _net(self):
        return DenseNet("gen", (self.n_z, *self.widths, self.n_x), hidden_act="leaky_relu", out_act="tanh")

    def build(self, g: ad.Graph, z: ad.Node, get) -> ad.Node:
        """Map latent batch (B, n_z) -> ambient batch (B, n_x) in [-1, 1]."""
        if self.kind == "dense-net":
            return self._net().build(g, z, get)
        A = get("gen.A")
        b = get("gen.b")
        return ad.add(ad.matmul(z, ad.permute(A, (1, 0))), ad.reshape(b, (1, self.n_x)))

    def sample(self, n: int, seed: int, chunk: int = 4096) -> np.ndarray:
        """x = G(z), z ~ N(0, I); returns generator-space outputs."""
        if n == 0:
            return np.zeros((0, self.n_x))
        rng = derive_rng(seed, "prior-sample")
        out = []
        done = 0
        graphs = {}
        while done < n:
            b = min(chunk, n - done)
            z = rng.standard_normal((b, self.n_z))
            if b not in graphs:
                g = ad.Graph()
                zn = g.input("z", (b, self.n_z))
                xn = self.build(g, zn, frozen_getter(g, self.params))
                graphs[b] = (g, xn)
            g, xn = graphs[b]
            g.bind("z", z)
            g.recompute()
            out.append(xn.value.copy())
            done += b
        return np.concatenate(out, axis=0)

    # -------------------------------------------------------------- files
    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.params.save(prefix.with_suffix(".gfp"))
        cfgmod.dump(
            {
                "generator": {
                    "kind": self.kind,
                    "n_z": self.n_z,
                    "n_x": self.n_x,
                    "widths": list(self.widths),
                    "rescale_lo": self.rescaler.lo,
                    "rescale_hi": self.rescaler.hi,
                }
            },
            prefix.with_suffix(".toml"),
        )

    @classmethod
    def load(cls, prefix) -> "GeneratorModel":
        prefix = Path(prefix)
        params = ParamVector.load(prefix.with_suffix(".gfp"))
        with open(prefix.with_suffix(".toml"), "rb") as f:
            doc = tomli.load(f)["generator"]
        return cls(
            doc["kind"],
            doc["n_z"],
            doc["n_x"],
            params,
            Rescaler(doc["rescale_lo"], doc["rescale_hi"]),
            tuple(doc["widths"]),
        )


@dataclass
class CriticModel:
    n_x: int
    widths: tuple
    params: ParamVector

    @classmethod
    def dense(cls, n_x, widths, seed) -> "CriticModel":
        net = DenseNet("critic", (n_x, *widths, 1), hidden_act="leaky_relu", out_act="linear")
        params = ParamVector.from_dict(net.init_params(derive_rng(seed, "critic-init")))
        return cls(n_x, tuple(widths), params)

    @classmethod
    def linear(cls, w, bias=0.0) -> "CriticModel":
        """D(x) = w.x + bias; handy for exact penalty checks."""
        w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
        params = ParamVector.from_dict({"critic.W0": w, "critic.b0": np.array([bias])})
        return cls(w.shape[0], (), params)

    def build(self, g: ad.Graph, x: ad.Node, get) -> ad.Node:
        """Scalar score per sample, shape (B,)."""
        net = DenseNet("critic", (self.n_x, *self.widths, 1), hidden_act="leaky_relu", out_act="linear")
        return ad.reshape(net.build(g, x, get), (x.shape[0],))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class GanTrainConfig:
    n_z: int
    gen_widths: tuple = (64, 256)
    critic_widths: tuple = (256, 64)
    epochs: int = 300
    batch: int = 64
    lr: float = 2e-4
    lr_gen: float | None = None  # None -> same as lr; a slower generator damps cycling
    betas: tuple = (0.5, 0.99)
    lambda_gp: float = 10.0
    n_critic: int = 5
    patience: int = 0  # epochs on a 10-epoch moving average; 0 disables
    ema_decay: float = 0.0  # >0: return the EMA of generator iterates

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise GanError("lambda_gp must be >= 0")
        if self.n_critic < 1:
            raise GanError("n_critic must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise GanError("ema_decay must be in [0, 1)")


def _penalty_node(g, critic, get_phi, x_real, x_fake, eps):
    """Mean (||grad_x D(x_tilde)|| - 1)^2 along per-pair interpolates."""
    one = g.const(np.float64(1.0))
    xt = ad.add(ad.mul(eps, x_real), ad.mul(ad.sub(one, eps), x_fake))
    d = critic.build(g, xt, get_phi)
    gx = ad.grad_nodes(ad.sum_(d), [xt])[0]
    norms = ad.norm2(gx, axis=1)
    return ad.mean(ad.square(ad.sub(norms, one)))


def _loss_nodes(g, gen, critic, get_theta, get_phi, x_real, z, eps, lam):
    x_fake = gen.build(g, z, get_theta)
    d_real = ad.mean(critic.build(g, x_real, get_phi))
    d_fake = ad.mean(critic.build(g, x_fake, get_phi))
    wdist = ad.sub(d_real, d_fake)
    penalty = _penalty_node(g, critic, get_phi, x_real, x_fake, eps)
    critic_loss = ad.add(-wdist, ad.mul(g.const(np.float64(lam)), penalty))
    gen_loss = -d_fake
    return critic_loss, gen_loss, penalty, wdist


def wgan_losses(batch_real, batch_z, gen: GeneratorModel, critic: CriticModel,
                lam: float = 10.0, rng: np.random.Generator | None = None,
                eps: np.ndarray | None = None):
    """(critic_loss, gen_loss) values on one batch; eps ~ U(0,1) per pair."""
    batch_real = np.asarray(batch_real, dtype=np.float64)
    batch_z = np.asarray(batch_z, dtype=np.float64)
    if batch_real.shape[0] == 0 or batch_z.shape[0] == 0:
        raise GanError("empty batch")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.uniform(size=(batch_real.shape[0], 1))
    g = ad.Graph()
    xr = g.const(batch_real)
    zn = g.const(batch_z)
    en = g.const(np.asarray(eps, dtype=np.float64))
    closs, gloss, _, _ = _loss_nodes(
        g, gen, critic, frozen_getter(g, gen.params), frozen_getter(g, critic.params),
        xr, zn, en, lam,
    )
    g.recompute()
    return float(closs.value), float(gloss.value)


def gradient_penalty(critic: CriticModel, x_real, x_fake, rng: np.random.Generator) -> float:
    """Penalty value at per-pair uniform interpolates."""
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise GanError("real/fake batches must have equal shapes")
    eps = rng.uniform(size=(x_real.shape[0], 1))
    g = ad.Graph()
    pen = _penalty_node(
        g, critic, frozen_getter(g, critic.params),
        g.const(x_real), g.const(x_fake), g.const(eps),
    )
    g.recompute()
    return float(pen.value)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _CriticStep:
    def __init__(self, gen, critic, cfg):
        g = ad.Graph()
        self.g = g
        self.x_real = g.input("batch.real", (cfg.batch, gen.n_x))
        self.z = g.input("batch.z", (cfg.batch, gen.n_z))
        self.eps = g.input("batch.eps", (cfg.batch, 1))
        get_phi = trainable_getter(g, critic.params)
        get_theta = trainable_getter(g, gen.params)
        self.loss, _, self.penalty, self.wdist = _loss_nodes(
            g, gen, critic, get_theta, get_phi, self.x_real, self.z, self.eps, cfg.lambda_gp
        )
        self.phi_names = list(critic.params.segments)
        self.grads = ad.grad_nodes(self.loss, [g.inputs[n] for n in self.phi_names])

    def run(self, gen, critic, x_real, z, eps, out_grad: ParamVector):
        g = self.g
        g.bind("batch.real", x_real)
        g.bind("batch.z", z)
        g.bind("batch.eps", eps)
        g.bind_params(gen.params)
        g.bind_params(critic.params)
        g.recompute()
        for name, node in zip(self.phi_names, self.grads):
            out_grad.set(name, node.value)
        return float(self.loss.value), float(self.penalty.value), float(self.wdist.value)


class _GenStep:
    def __init__(self, gen, critic, cfg):
        g = ad.Graph()
        self.g = g
        self.z = g.input("batch.z", (cfg.batch, gen.n_z))
        get_theta = trainable_getter(g, gen.params)
        get_phi = trainable_getter(g, critic.params)
        x_fake = gen.build(g, self.z, get_theta)
        self.loss = -ad.mean(critic.build(g, x_fake, get_phi))
        self.theta_names = list(gen.params.segments)
        self.grads = ad.grad_nodes(self.loss, [g.inputs[n] for n in self.theta_names])

    def run(self, gen, critic, z, out_grad: ParamVector):
        g = self.g
        g.bind("batch.z", z)
        g.bind_params(gen.params)
        g.bind_params(critic.params)
        g.recompute()
        for name, node in zip(self.theta_names, self.grads):
            out_grad.set(name, node.value)
        return float(self.loss.value)


def train_wgan(dataset: np.ndarray, cfg: GanTrainConfig, seed: int,
               rescaler: Rescaler, critic_seed_offset: int = 1):
    """Alternating WGAN-GP training on a rescaled dataset.

    Returns (generator, critic, history).  history rows:
    (epoch, critic_loss, gen_loss, penalty, wasserstein_estimate).
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2:
        raise GanError("dataset must be (n, n_x)")
    if np.abs(dataset).max() > 1.0 + 1e-9:
        raise GanError("dataset must be rescaled to [-1, 1] before training")
    n, n_x = dataset.shape
    if n < cfg.batch:
        raise GanError("dataset smaller than one batch")

    gen = GeneratorModel.dense(cfg.n_z, n_x, cfg.gen_widths, seed, rescaler)
    critic = CriticModel.dense(n_x, cfg.critic_widths, seed + critic_seed_offset)

    critic_step = _CriticStep(gen, critic, cfg)
    gen_step = _GenStep(gen, critic, cfg)
    adam_phi = Adam(len(critic.params), cfg.lr, cfg.betas)
    adam_theta = Adam(len(gen.params), cfg.lr_gen if cfg.lr_gen is not None else cfg.lr, cfg.betas)
    gphi = critic.params.zeros_like()
    gtheta = gen.params.zeros_like()
    ema = gen.params.data.copy()

    rng = derive_rng(seed, "gan-train")
    history = []
    best_ma = np.inf
    stale = 0
    batches_per_epoch = n // cfg.batch
    step_index = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            closs_acc, gloss_acc, pen_acc, w_acc, gcount = [], [], [], [], 0
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch : (b + 1) * cfg.batch]
                z = rng.standard_normal((cfg.batch, cfg.n_z))
                eps = rng.uniform(size=(cfg.batch, 1))
                closs, pen, wdist = critic_step.run(gen, critic, dataset[idx], z, eps, gphi)
                adam_phi.step(critic.params.data, gphi.data)
                closs_acc.append(closs)
                pen_acc.append(pen)
                w_acc.append(wdist)
                step_index += 1
                if step_index % cfg.n_critic == 0:
                    zg = rng.standard_normal((cfg.batch, cfg.n_z))
                    gloss = gen_step.run(gen, critic, zg, gtheta)
                    adam_theta.step(gen.params.data, gtheta.data)
                    if cfg.ema_decay > 0:
                        ema = cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * gen.params.data
                    gloss_acc.append(gloss)
                    gcount += 1
            row = (
                epoch,
                float(np.mean(closs_acc)),
                float(np.mean(gloss_acc)) if gcount else 0.0,
                float(np.mean(pen_acc)),
                float(np.mean(w_acc)),
            )
            history.append(row)
            if cfg.patience:
                window = [r[1] for r in history[-10:]]
                ma = float(np.mean(window))
                if ma < best_ma - 1e-12:
                    best_ma = ma
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    except ad.NonFiniteError as e:
        raise TrainingDiverged(f"non-finite training step: {e}", history) from e
    if cfg.ema_decay > 0:
        gen.params.data[:] = ema
    return gen, critic, history


def sample_prior(gen: GeneratorModel, n: int, seed: int) -> np.ndarray:
    """Generator pushforward of n standard-normal latents."""
    return gen.sample(n, seed)
