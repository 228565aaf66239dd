"""WGAN-GP checks: exact affine penalties, FD penalty gradients, loss
identities, a 2-D moment-matching training run, and determinism."""

from __future__ import annotations

import numpy as np
import pytest

from ganflow import autodiff as ad
from ganflow.gan import (
    CriticModel,
    GanError,
    GanTrainConfig,
    GeneratorModel,
    _CriticStep,
    gradient_penalty,
    sample_prior,
    train_wgan,
    wgan_losses,
)
from ganflow.params import ParamVector
from ganflow.prior_data import Rescaler


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


@pytest.fixture
def affine_gen():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 3)) * 0.5
    b = rng.normal(size=6) * 0.2
    return GeneratorModel.affine_oracle(A, b)


# ---------------------------------------------------------------------------
# gradient penalty
# ---------------------------------------------------------------------------

def test_penalty_linear_critic_norm_two():
    w = np.array([1.2, -0.9, 0.8, 1.1])
    w = 2.0 * w / np.linalg.norm(w)
    critic = CriticModel.linear(w)
    rng = np.random.default_rng(1)
    pen = gradient_penalty(critic, rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), rng)
    assert pen == pytest.approx(1.0, abs=1e-12)


def test_penalty_linear_critic_unit_norm():
    w = np.array([0.3, -0.4, 1.2, 0.1])
    w = w / np.linalg.norm(w)
    critic = CriticModel.linear(w)
    rng = np.random.default_rng(2)
    pen = gradient_penalty(critic, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng)
    assert pen == pytest.approx(0.0, abs=1e-14)


def test_penalty_independent_of_batch_and_eps_for_affine_critic():
    w = 1.7 * np.ones(3) / np.sqrt(3)
    critic = CriticModel.linear(w, bias=0.4)
    vals = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        vals.append(
            gradient_penalty(critic, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng)
        )
    assert np.ptp(vals) < 1e-12
    assert vals[0] == pytest.approx((1.7 - 1.0) ** 2, abs=1e-12)


def test_penalty_parameter_gradient_matches_fd(affine_gen):
    """Double backprop: d(penalty)/d(phi) vs finite differences of penalty."""
    critic = CriticModel.dense(6, (8,), seed=3)
    rng = np.random.default_rng(4)
    x_real = rng.normal(size=(3, 6))
    x_fake = rng.normal(size=(3, 6))
    eps = rng.uniform(size=(3, 1))

    from ganflow.gan import _penalty_node
    from ganflow.nets import trainable_getter

    g = ad.Graph()
    pen = _penalty_node(
        g, critic, trainable_getter(g, critic.params),
        g.const(x_real), g.const(x_fake), g.const(eps),
    )
    grads = ad.gradient(g, critic.params, wrt=list(critic.params.segments), output=pen)

    def value(flat):
        p = ParamVector(flat, critic.params.segments)
        gg = ad.Graph()
        from ganflow.nets import frozen_getter

        node = _penalty_node(
            gg, critic, frozen_getter(gg, p), gg.const(x_real), gg.const(x_fake), gg.const(eps)
        )
        gg.recompute()
        return float(node.value)

    h = 1e-5
    fd = np.zeros(len(critic.params))
    base = critic.params.data.copy()
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        fd[i] = (value(base + e) - value(base - e)) / (2 * h)
    assert rel_err(grads.data, fd) < 1e-5


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_losses_zero_critic(affine_gen):
    critic = CriticModel.dense(6, (8,), seed=5)
    critic.params.data[:] = 0.0
    rng = np.random.default_rng(6)
    lam = 10.0
    closs, gloss = wgan_losses(
        rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), affine_gen, critic, lam=lam, rng=rng
    )
    # zero critic: both score means vanish and grad norm is 0 -> penalty 1
    assert closs == pytest.approx(lam, abs=1e-12)
    assert gloss == pytest.approx(0.0, abs=1e-12)


def test_losses_constant_critic_cancels(affine_gen):
    critic = CriticModel.linear(np.zeros(6), bias=3.7)
    rng = np.random.default_rng(7)
    closs, gloss = wgan_losses(
        rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), affine_gen, critic, lam=0.0, rng=rng
    )
    assert closs == pytest.approx(0.0, abs=1e-12)
    assert gloss == pytest.approx(-3.7, abs=1e-12)


def test_losses_unit_norm_linear_critic_no_penalty(affine_gen):
    w = np.random.default_rng(8).normal(size=6)
    w /= np.linalg.norm(w)
    critic = CriticModel.linear(w)
    rng = np.random.default_rng(9)
    xr = rng.normal(size=(4, 6))
    z = rng.normal(size=(4, 3))
    eps = rng.uniform(size=(4, 1))
    lam = 10.0
    closs0, _ = wgan_losses(xr, z, affine_gen, critic, lam=0.0, eps=eps)
    closs1, _ = wgan_losses(xr, z, affine_gen, critic, lam=lam, eps=eps)
    assert closs1 == pytest.approx(closs0, abs=1e-12)  # penalty exactly zero


def test_losses_reject_empty_batch(affine_gen):
    critic = CriticModel.dense(6, (8,), seed=10)
    with pytest.raises(GanError):
        wgan_losses(np.zeros((0, 6)), np.zeros((0, 3)), affine_gen, critic)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_critic_step_decreases_loss_on_frozen_batch():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(64, 4)) * 0.5
    gen = GeneratorModel.dense(2, 4, (8,), seed=12, rescaler=Rescaler(-1, 1))
    x_real = data[:32]
    z = rng.standard_normal((32, 2))
    eps = rng.uniform(size=(32, 1))
    for lr in (1e-3, 1e-4):
        critic = CriticModel.dense(4, (16,), seed=13)
        cfg = GanTrainConfig(n_z=2, batch=32, lr=lr, lambda_gp=10.0)
        step = _CriticStep(gen, critic, cfg)
        gphi = critic.params.zeros_like()
        before, _, _ = step.run(gen, critic, x_real, z, eps, gphi)
        # plain gradient step: the line-search property is about the gradient,
        # not the optimizer state
        critic.params.data -= lr * gphi.data
        after, _, _ = step.run(gen, critic, x_real, z, eps, gphi)
        assert after < before


def test_train_wgan_2d_toy_moments():
    """Data N((1,-1), 0.4^2 I) in natural units; the generator's sample mean
    must land within 0.1 of the target after rescaled training."""
    rs = Rescaler(-2.0, 2.0)
    rng = np.random.default_rng(14)
    raw = rng.normal([1.0, -1.0], 0.4, size=(2000, 2))
    data = np.clip(rs.rescale(raw), -1, 1)
    cfg = GanTrainConfig(
        n_z=2, gen_widths=(32, 32), critic_widths=(32, 32),
        epochs=150, batch=64, lr=2e-4, betas=(0.5, 0.9), n_critic=5,
        lambda_gp=0.1,  # reference toy-scale penalty; 10 destabilizes a 2-D critic
        ema_decay=0.99,  # average out the minimax limit cycle
    )
    gen, _, history = train_wgan(data, cfg, seed=15, rescaler=rs)
    samples = rs.unrescale(sample_prior(gen, 10_000, seed=16))
    assert np.abs(samples.mean(axis=0) - np.array([1.0, -1.0])).max() < 0.1
    assert len(history) == cfg.epochs


def test_train_wgan_deterministic():
    rng = np.random.default_rng(17)
    data = np.clip(rng.normal(0.2, 0.1, size=(128, 2)), -1, 1)
    cfg = GanTrainConfig(n_z=2, gen_widths=(8,), critic_widths=(8,), epochs=5, batch=32, n_critic=2)
    gen1, _, h1 = train_wgan(data, cfg, seed=18, rescaler=Rescaler(-1, 1))
    gen2, _, h2 = train_wgan(data, cfg, seed=18, rescaler=Rescaler(-1, 1))
    assert np.array_equal(gen1.params.data, gen2.params.data)
    assert h1 == h2


def test_train_wgan_rejects_unscaled_data():
    cfg = GanTrainConfig(n_z=2, epochs=1, batch=4)
    with pytest.raises(GanError):
        train_wgan(np.full((8, 2), 3.0), cfg, seed=0, rescaler=Rescaler(-1, 1))


# ---------------------------------------------------------------------------
# prior sampling
# ---------------------------------------------------------------------------

def test_sample_prior_affine_clt_mean(affine_gen):
    n = 100_000
    samples = sample_prior(affine_gen, n, seed=19)
    A = affine_gen.params.get("gen.A")
    b = affine_gen.params.get("gen.b")
    bound = 3.0 * np.linalg.norm(A, 2) / np.sqrt(n)
    assert np.linalg.norm(samples.mean(axis=0) - b) < 3.0 * bound


def test_sample_prior_affine_covariance(affine_gen):
    samples = sample_prior(affine_gen, 100_000, seed=20)
    A = affine_gen.params.get("gen.A")
    want = A @ A.T
    got = np.cov(samples.T)
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 0.05


def test_sample_prior_empty(affine_gen):
    out = sample_prior(affine_gen, 0, seed=21)
    assert out.shape == (0, 6)


def test_dense_generator_output_strictly_inside_unit_box():
    gen = GeneratorModel.dense(3, 10, (16,), seed=22, rescaler=Rescaler(-1, 1))
    samples = gen.sample(100_000, seed=23)
    assert np.abs(samples).max() < 1.0


def test_generator_save_load_roundtrip(tmp_path, affine_gen):
    affine_gen.save(tmp_path / "gen")
    back = GeneratorModel.load(tmp_path / "gen")
    z = np.random.default_rng(24).normal(size=(5, 3))
    g1 = ad.Graph()
    zn = g1.input("z", (5, 3))
    from ganflow.nets import frozen_getter

    x1 = affine_gen.build(g1, zn, frozen_getter(g1, affine_gen.params))
    g1.bind("z", z)
    g1.recompute()
    g2 = ad.Graph()
    zn2 = g2.input("z", (5, 3))
    x2 = back.build(g2, zn2, frozen_getter(g2, back.params))
    g2.bind("z", z)
    g2.recompute()
    assert np.array_equal(x1.value, x2.value)
