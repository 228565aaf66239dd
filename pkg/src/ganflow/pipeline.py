"""End-to-end orchestration: dataset, two training phases, posterior
sampling, metrics, and the artifact directory layout.

Every run writes a resolved config next to its outputs, so any artifact
directory can be regenerated bit-identically from itself.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import report, tensorio
from .flows import FlowModel
from .forward_models import (
    ForwardProblem,
    HeatProblem,
    LinearProblem,
    PhaseProblem,
    RadonProblem,
    build_mask,
)
from .gan import GanTrainConfig, GeneratorModel, train_wgan
from .posterior import metric_report, sample_posterior
from .prior_data import (
    PhantomConfig,
    RectPriorConfig,
    default_rescaler,
    gen_dataset,
    gen_phantom,
    gen_rect_field,
)
from .samplers import ConjugateGaussianCase
from .util import derive_rng
from .vi import LatentPosteriorModel, VIConfig, train_flow, write_history_csv


class PipelineError(Exception):
    pass


@dataclass
class ProblemSetup:
    problem: ForwardProblem
    truth: np.ndarray  # natural units, flat
    y_hat: np.ndarray
    generator: GeneratorModel | None = None  # set for the conjugate oracle
    case: ConjugateGaussianCase | None = None


def synthesize_truth(cfg) -> np.ndarray:
    """A fresh field from the prior law, outside the training dataset."""
    kind = cfg["prior"]["kind"]
    n_p = cfg["problem"]["n_p"]
    rng = derive_rng(cfg["seed"], "truth")
    if kind == "rect":
        return gen_rect_field(rng, RectPriorConfig(n_p=n_p)).ravel()
    if kind == "phantom":
        return gen_phantom(rng, PhantomConfig(n_p=n_p, shift_max=cfg["prior"]["shift_max"])).ravel()
    raise PipelineError(f"no truth synthesizer for prior kind {kind!r}")


def build_setup(cfg) -> ProblemSetup:
    """Problem + ground truth + noisy measurement, all seeded by the config."""
    pc = cfg["problem"]
    kind = pc["kind"]
    seed = cfg["seed"]
    noise_rng = derive_rng(seed, "measurement-noise")

    if kind == "conjugate":
        rng = derive_rng(seed, "conjugate-setup")
        n_z = cfg["gan"]["n_z"]
        n_x, n_y = pc["n_x"], pc["n_y"]
        A = rng.normal(size=(n_x, n_z)) / np.sqrt(n_z)
        b = rng.normal(size=n_x) * 0.5
        F = rng.normal(size=(n_y, n_x)) / np.sqrt(n_x)
        gen = GeneratorModel.affine_oracle(A, b)
        problem = LinearProblem(F, pc["sigma2"])
        z_true = rng.normal(size=n_z) * 2.0
        truth = A @ z_true + b
        y_hat = problem.measure(truth, noise_rng).ravel()
        case = ConjugateGaussianCase(A, b, F, pc["sigma2"], y_hat)
        return ProblemSetup(problem, truth, y_hat, generator=gen, case=case)

    truth = synthesize_truth(cfg)
    if kind == "heat":
        problem = HeatProblem(n_p=pc["n_p"], sigma2=pc["sigma2"])
    elif kind == "radon":
        n_det = pc["n_det"] or pc["n_p"]
        problem = RadonProblem(n_p=pc["n_p"], n_angles=pc["n_angles"], n_det=n_det, sigma2=pc["sigma2"])
    elif kind == "phase":
        mask = build_mask(pc["n_p"], pc["accel"], pc["center_fraction"], pc["mask_seed"])
        sigma2 = pc["sigma2"]
        if pc["noise_zero_freq_pct"] > 0:
            amp = abs(float(np.sum(truth)))
            sigma2 = (pc["noise_zero_freq_pct"] / 100.0 * amp) ** 2
        problem = PhaseProblem(pc["n_p"], mask, sigma2)
    else:
        raise PipelineError(f"unknown problem kind {kind!r}")
    y_hat = problem.measure(truth, noise_rng).ravel()
    return ProblemSetup(problem, truth, y_hat)


def gan_config(cfg) -> GanTrainConfig:
    gc = cfg["gan"]
    return GanTrainConfig(
        n_z=gc["n_z"],
        gen_widths=tuple(gc["gen_widths"]),
        critic_widths=tuple(gc["critic_widths"]),
        epochs=gc["epochs"],
        batch=gc["batch"],
        lr=gc["lr"],
        lr_gen=gc["lr"] / 2.0,
        betas=(gc["beta1"], gc["beta2"]),
        lambda_gp=gc["lambda_gp"],
        n_critic=gc["n_critic"],
        patience=gc["patience"],
        ema_decay=0.999,
    )


def vi_config(cfg) -> VIConfig:
    vc = cfg["vi"]
    return VIConfig(
        epochs=vc["epochs"],
        batch=vc["batch"],
        lr=vc["lr"],
        betas=(vc["beta1"], vc["beta2"]),
        seed=cfg["seed"] + 1,
        patience=vc["patience"],
        stride=vc["stride"],
        lr_decay=True,
    )


def make_flow(cfg, n_z) -> FlowModel:
    fc = cfg["flow"]
    return FlowModel.create(
        fc["kind"], fc["n_layers"], n_z, seed=cfg["seed"] + 2,
        hidden=fc["hidden"], actnorm=fc["actnorm"],
    )


def run_pipeline(cfg: dict, outdir=None, generator_path=None) -> dict:
    """Phase A (skippable via generator_path), Phase B, Phase C, metrics."""
    t_start = time.time()
    out = Path(outdir if outdir is not None else cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "resolved_config.toml")
    figures = bool(cfg["output"]["figures"])

    setup = build_setup(cfg)
    problem = setup.problem
    tensorio.save_tensor(out / "truth.gft", setup.truth)
    tensorio.save_tensor(out / "y_hat.gft", setup.y_hat)

    # ---------------------------------------------------------------- Phase A
    if setup.generator is not None:
        gen = setup.generator
        phase_a = "analytic affine oracle"
    elif generator_path is not None:
        gen = GeneratorModel.load(generator_path)
        phase_a = f"reused {generator_path}"
    else:
        rescaler = default_rescaler(problem.kind)
        dataset = gen_dataset(
            cfg["prior"]["kind"], cfg["prior"]["n_data"], cfg["seed"],
            cfg["problem"]["n_p"], cfg["prior"]["shift_max"],
        )
        scaled = np.clip(rescaler.rescale(dataset), -1.0, 1.0)
        gen, _, gan_history = train_wgan(scaled, gan_config(cfg), cfg["seed"], rescaler)
        with open(out / "gan_history.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "critic_loss", "gen_loss", "penalty", "wasserstein_est"])
            writer.writerows(gan_history)
        if figures:
            report.save_loss_curve(
                out / "gan_history.png", gan_history,
                {"critic loss": 1, "generator loss": 2, "penalty": 3},
            )
        phase_a = "trained"
    gen.save(out / "generator")

    # ---------------------------------------------------------------- Phase B
    flow = make_flow(cfg, gen.n_z)
    model = LatentPosteriorModel(flow, gen, problem, setup.y_hat)
    theta_before = gen.params.data.copy()
    solves_before = problem.solve_count
    flow, vi_history = train_flow(model, vi_config(cfg))
    phase_b_solves = problem.solve_count - solves_before
    if not np.array_equal(gen.params.data, theta_before):
        raise PipelineError("generator parameters changed during flow training")
    flow.save(out / "flow")
    write_history_csv(out / "vi_history.csv", vi_history)
    if figures:
        report.save_loss_curve(
            out / "vi_history.png", vi_history,
            {"loss": 2, "loglik term": 3, "prior term": 4, "logdet term": 5},
        )

    # ---------------------------------------------------------------- Phase C
    solves_before_c = problem.solve_count
    ensemble = sample_posterior(gen, flow, cfg["sample"]["n_s"], cfg["seed"] + 3)
    phase_c_solves = problem.solve_count - solves_before_c
    tensorio.save_tensor(out / "posterior_mean.gft", ensemble.mean_field)
    tensorio.save_tensor(out / "posterior_std.gft", ensemble.std_field)

    n_p = int(round(np.sqrt(setup.truth.size)))
    square = n_p * n_p == setup.truth.size
    if square and "pgm" in cfg["output"]["formats"]:
        tensorio.save_pgm(out / "posterior_mean.pgm", ensemble.mean_field.reshape(n_p, n_p))
        tensorio.save_pgm(out / "posterior_std.pgm", ensemble.std_field.reshape(n_p, n_p))

    abs_err = np.abs(ensemble.mean_field - setup.truth)
    tensorio.save_tensor(out / "abs_error.gft", abs_err)
    if figures and square:
        report.save_field_grid(
            out / "posterior_fields.png",
            [setup.truth, ensemble.mean_field, ensemble.std_field, abs_err],
            ["truth", "posterior mean", "posterior std", "abs error"],
        )

    metrics = None
    if square and n_p >= 11:
        rescaler = gen.rescaler
        metrics = metric_report(
            ensemble.mean_field, setup.truth,
            dynamic_range=rescaler.hi - rescaler.lo,
            n_s=ensemble.n_s, seed=cfg["seed"],
        )
        metrics.save_csv(out / "metrics.csv")

    with open(out / "budget.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["phase_b_solves", "expected_phase_b", "phase_c_solves", "runtime_s"])
        writer.writerow(
            [phase_b_solves, cfg["vi"]["epochs"] * cfg["vi"]["batch"], phase_c_solves,
             round(time.time() - t_start, 2)]
        )

    return {
        "outdir": out,
        "generator": gen,
        "flow": flow,
        "problem": problem,
        "setup": setup,
        "ensemble": ensemble,
        "metrics": metrics,
        "vi_history": vi_history,
        "phase_a": phase_a,
        "phase_b_solves": phase_b_solves,
        "phase_c_solves": phase_c_solves,
    }
