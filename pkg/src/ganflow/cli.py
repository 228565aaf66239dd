"""Command-line front end.

Exit codes: 0 success, 1 validation/usage error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import report, tensorio
from .autodiff import NonFiniteError
from .flows import FlowError, FlowModel
from .forward_models import ForwardModelError
from .gan import GanError, GeneratorModel, TrainingDiverged, train_wgan
from .params import ParamVectorError
from .pipeline import PipelineError, build_setup, gan_config, make_flow, run_pipeline, vi_config
from .posterior import PosteriorError, metric_report, rmse, sample_posterior, ssim
from .prior_data import (
    PriorDataError,
    RectPriorConfig,
    default_rescaler,
    gen_dataset,
    render_rect_field,
    save_dataset,
)
from .samplers import (
    HmcConfig,
    SamplerError,
    conjugate_posterior,
    hmc_sample,
    importance_oracle,
    make_latent_logp,
    save_samples_csv,
)
from .tensorio import TensorIOError
from .util import derive_rng
from .vi import LatentPosteriorModel, VIError, train_flow, write_history_csv

VALIDATION_ERRORS = (
    cfgmod.ConfigError,
    PipelineError,
    ForwardModelError,
    PriorDataError,
    GanError,
    FlowError,
    VIError,
    SamplerError,
    PosteriorError,
    ParamVectorError,
    TensorIOError,
    FileNotFoundError,
    ValueError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _outdir(args, cfg) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "resolved_config.toml")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_prior(args) -> int:
    fields = gen_dataset(args.kind, args.n, args.seed, args.np, args.shift_max)
    save_dataset(args.out, fields, {"kind": args.kind, "seed": args.seed})
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_train_gan(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    rescaler = default_rescaler(cfg["problem"]["kind"])
    dataset = gen_dataset(
        cfg["prior"]["kind"], cfg["prior"]["n_data"], cfg["seed"],
        cfg["problem"]["n_p"], cfg["prior"]["shift_max"],
    )
    scaled = np.clip(rescaler.rescale(dataset), -1.0, 1.0)
    gen, _, history = train_wgan(scaled, gan_config(cfg), cfg["seed"], rescaler)
    gen.save(out / "generator")
    with open(out / "gan_history.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "critic_loss", "gen_loss", "penalty", "wasserstein_est"])
        writer.writerows(history)
    if cfg["output"]["figures"]:
        report.save_loss_curve(out / "gan_history.png", history,
                               {"critic loss": 1, "generator loss": 2, "penalty": 3})
    print(f"generator saved under {out}")
    return 0


def cmd_train_flow(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    setup = build_setup(cfg)
    gen = setup.generator if setup.generator is not None else GeneratorModel.load(args.generator)
    flow = make_flow(cfg, gen.n_z)
    model = LatentPosteriorModel(flow, gen, setup.problem, setup.y_hat)
    before = setup.problem.solve_count
    flow, history = train_flow(model, vi_config(cfg))
    flow.save(out / "flow")
    gen.save(out / "generator")
    write_history_csv(out / "vi_history.csv", history)
    if cfg["output"]["figures"]:
        report.save_loss_curve(out / "vi_history.png", history,
                               {"loss": 2, "loglik term": 3, "prior term": 4, "logdet term": 5})
    print(f"flow saved under {out}; forward solves: {setup.problem.solve_count - before}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    setup = build_setup(cfg)
    gen = setup.generator if setup.generator is not None else GeneratorModel.load(args.generator)
    flow = FlowModel.load(args.flow)
    before = setup.problem.solve_count
    ens = sample_posterior(gen, flow, args.n if args.n else cfg["sample"]["n_s"], cfg["seed"] + 3)
    assert setup.problem.solve_count == before  # sampling never touches F
    tensorio.save_tensor(out / "posterior_mean.gft", ens.mean_field)
    tensorio.save_tensor(out / "posterior_std.gft", ens.std_field)
    n_p = int(round(np.sqrt(setup.truth.size)))
    if n_p * n_p == setup.truth.size:
        tensorio.save_pgm(out / "posterior_mean.pgm", ens.mean_field.reshape(n_p, n_p))
        tensorio.save_pgm(out / "posterior_std.pgm", ens.std_field.reshape(n_p, n_p))
        if n_p >= 11:
            rep = metric_report(ens.mean_field, setup.truth,
                                gen.rescaler.hi - gen.rescaler.lo, ens.n_s, cfg["seed"])
            rep.save_csv(out / "metrics.csv")
        if cfg["output"]["figures"]:
            report.save_field_grid(
                out / "posterior_fields.png",
                [setup.truth, ens.mean_field, ens.std_field],
                ["truth", "posterior mean", "posterior std"],
            )
    print(f"ensemble of {ens.n_s} written to {out}")
    return 0


def cmd_hmc(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    setup = build_setup(cfg)
    gen = setup.generator if setup.generator is not None else GeneratorModel.load(args.generator)
    hc = cfg["hmc"]
    hmc_cfg = HmcConfig(
        n_samples=args.n if args.n else hc["n_samples"],
        n_leapfrog=hc["n_leapfrog"],
        target_accept=hc["target_accept"],
        burn_in_fraction=hc["burn_in_fraction"],
        initial_step=hc["initial_step"],
        seed=cfg["seed"] + 4,
    )
    logp = make_latent_logp(gen, setup.problem, setup.y_hat)
    before = setup.problem.solve_count
    stats = hmc_sample(logp, gen.n_z, hmc_cfg)
    save_samples_csv(out / "hmc_samples.csv", stats["samples"])
    # push the latent chain through the generator for ambient statistics
    zs = stats["samples"]
    fields = gen.rescaler.unrescale(_push_through(gen, zs))
    tensorio.save_tensor(out / "hmc_mean.gft", fields.mean(axis=0))
    tensorio.save_tensor(out / "hmc_std.gft", fields.std(axis=0, ddof=1))
    with open(out / "hmc_stats.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["accept_rate", "step_size", "n_samples", "forward_solves"])
        writer.writerow([stats["accept_rate"], stats["step_size"], len(zs),
                         setup.problem.solve_count - before])
    print(f"hmc acceptance {stats['accept_rate']:.3f}, step {stats['step_size']:.2e}")
    return 0


def _push_through(gen: GeneratorModel, zs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    from . import autodiff as ad
    from .nets import frozen_getter

    out = []
    graphs = {}
    for start in range(0, len(zs), chunk):
        part = zs[start : start + chunk]
        b = len(part)
        if b not in graphs:
            g = ad.Graph()
            zn = g.input("z", (b, gen.n_z))
            xn = gen.build(g, zn, frozen_getter(g, gen.params))
            graphs[b] = (g, xn)
        g, xn = graphs[b]
        g.bind("z", part)
        g.recompute()
        out.append(xn.value.copy())
    return np.concatenate(out, axis=0)


def cmd_oracle_is(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    if cfg["problem"]["kind"] != "heat" or cfg["prior"]["kind"] != "rect":
        raise PipelineError("the importance oracle targets the rectangular-prior heat problem")
    setup = build_setup(cfg)
    problem, y_hat = setup.problem, setup.y_hat
    rect_cfg = RectPriorConfig(n_p=cfg["problem"]["n_p"])

    def sample_fields(rng, k):
        from .prior_data import sample_rect_params

        return np.stack([
            render_rect_field(sample_rect_params(rng, rect_cfg), rect_cfg).ravel()
            for _ in range(k)
        ])

    def loglik(fields):
        resid = y_hat[None, :] - problem.apply_batch(fields)
        return -0.5 * np.sum(resid**2, axis=1) / problem.noise.sigma2

    res = importance_oracle(sample_fields, loglik, n=args.n, seed=cfg["seed"] + 5)
    tensorio.save_tensor(out / "is_mean.gft", res.mean)
    tensorio.save_tensor(out / "is_std.gft", res.std)
    with open(out / "is_stats.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n", "ess", "reliable"])
        writer.writerow([res.n, res.ess, res.reliable])
    print(f"importance oracle: n={res.n} ess={res.ess:.1f} reliable={res.reliable}")
    return 0


def cmd_conjugate_check(args) -> int:
    cfg = _load_cfg(args)
    if cfg["problem"]["kind"] != "conjugate":
        raise PipelineError("conjugate-check needs problem.kind = 'conjugate'")
    out = _outdir(args, cfg)
    result = run_pipeline(cfg, outdir=out)
    case = result["setup"].case
    mu, sigma = conjugate_posterior(case)

    z = derive_rng(cfg["seed"], "check-z").standard_normal((20_000, case.A_g.shape[1]))
    h, _ = result["flow"].forward(z)
    rows = [("flow-vi",
             float(np.linalg.norm(h.mean(axis=0) - mu) / np.linalg.norm(mu)),
             float(np.linalg.norm(np.cov(h.T) - sigma) / np.linalg.norm(sigma)))]

    from .samplers import make_conjugate_logp

    hc = cfg["hmc"]
    stats = hmc_sample(
        make_conjugate_logp(case), case.A_g.shape[1],
        HmcConfig(n_samples=hc["n_samples"], n_leapfrog=hc["n_leapfrog"],
                  target_accept=hc["target_accept"], burn_in_fraction=hc["burn_in_fraction"],
                  initial_step=hc["initial_step"], seed=cfg["seed"] + 4),
    )
    s = stats["samples"]
    rows.append(("hmc",
                 float(np.linalg.norm(s.mean(axis=0) - mu) / np.linalg.norm(mu)),
                 float(np.linalg.norm(np.cov(s.T) - sigma) / np.linalg.norm(sigma))))

    with open(out / "conjugate_check.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mean_rel_err", "cov_frob_rel_err"])
        writer.writerows(rows)
    for method, me, ce in rows:
        print(f"{method}: mean_rel_err={me:.4f} cov_frob_rel_err={ce:.4f}")
    return 0


def cmd_forward(args) -> int:
    cfg = _load_cfg(args)
    field = tensorio.load_tensor(args.infile)
    setup = build_setup(cfg)
    y = setup.problem.apply(field.ravel())
    tensorio.save_tensor(args.outfile, y)
    if args.noisy:
        noisy = y + setup.problem.noise.sample(derive_rng(cfg["seed"], "fwd-noise"), y.shape)
        tensorio.save_tensor(Path(args.outfile).with_suffix(".noisy.gft"), noisy)
    print(f"forward output written to {args.outfile}")
    return 0


def cmd_metrics(args) -> int:
    a = tensorio.load_tensor(args.a)
    b = tensorio.load_tensor(args.b)
    n_p = int(round(np.sqrt(a.size)))
    if n_p * n_p == a.size and n_p >= 11:
        rep = metric_report(a.ravel(), b.ravel(), dynamic_range=args.range)
        print(f"rmse={rep.rmse!r} ssim={rep.ssim!r}")
        if args.out:
            rep.save_csv(args.out)
    else:
        val = rmse(a.ravel(), b.ravel())
        print(f"rmse={val!r}")
        if args.out:
            with open(args.out, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["rmse", "ssim", "n_s", "seed"])
                writer.writerow([repr(val), "", 0, 0])
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    result = run_pipeline(cfg, outdir=args.out, generator_path=args.generator)
    print(f"pipeline complete: {result['outdir']} (phase A: {result['phase_a']}, "
          f"phase B solves: {result['phase_b_solves']}, phase C solves: {result['phase_c_solves']})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    nz_list = [int(v) for v in args.nz.split(",")]
    rows = []
    for n_z in nz_list:
        sub = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
        sub["gan"]["n_z"] = n_z
        t0 = time.time()
        result = run_pipeline(sub, outdir=out / f"nz{n_z}")
        runtime = time.time() - t0
        row = {
            "n_z": n_z,
            "rmse": result["metrics"].rmse if result["metrics"] else float("nan"),
            "ssim": result["metrics"].ssim if result["metrics"] else float("nan"),
            "loss_final": result["vi_history"][-1][2],
            "phase_b_solves": result["phase_b_solves"],
            "runtime_s": round(runtime, 2),
        }
        case = result["setup"].case
        if case is not None:
            mu, sigma = conjugate_posterior(case)
            z = derive_rng(sub["seed"], "sweep-z").standard_normal((20_000, n_z))
            h, _ = result["flow"].forward(z)
            row["mean_rel_err"] = float(np.linalg.norm(h.mean(axis=0) - mu) / np.linalg.norm(mu))
            row["cov_frob_rel_err"] = float(np.linalg.norm(np.cov(h.T) - sigma) / np.linalg.norm(sigma))
        else:
            row["mean_rel_err"] = float("nan")
            row["cov_frob_rel_err"] = float("nan")
        rows.append(row)

    fieldnames = ["n_z", "rmse", "ssim", "mean_rel_err", "cov_frob_rel_err",
                  "loss_final", "phase_b_solves", "runtime_s"]
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    if cfg["output"]["figures"]:
        report.save_sweep_curve(
            out / "sweep.png", [r["n_z"] for r in rows],
            {"posterior-mean rmse": [r["rmse"] for r in rows],
             "final loss": [r["loss_final"] for r in rows]},
        )
    print(f"sweep over n_z={nz_list} written to {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="ganflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True, seed=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML experiment config")
        if out:
            sp.add_argument("--out", default=None, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    sp = sub.add_parser("gen-prior", help="synthesize a prior dataset")
    sp.add_argument("--kind", choices=["rect", "phantom"], required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--np", type=int, default=32, help="grid size")
    sp.add_argument("--shift-max", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_prior)

    sp = sub.add_parser("train-gan", help="phase A: train the WGAN-GP prior")
    common(sp)
    sp.set_defaults(func=cmd_train_gan)

    sp = sub.add_parser("train-flow", help="phase B: variational flow training")
    common(sp)
    sp.add_argument("--generator", default=None, help="generator file prefix")
    sp.set_defaults(func=cmd_train_flow)

    sp = sub.add_parser("sample", help="phase C: posterior ensemble statistics")
    common(sp)
    sp.add_argument("--generator", default=None)
    sp.add_argument("--flow", required=True, help="flow file prefix")
    sp.add_argument("--n", type=int, default=0, help="ensemble size override")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("hmc", help="latent-space HMC baseline")
    common(sp)
    sp.add_argument("--generator", default=None)
    sp.add_argument("--n", type=int, default=0, help="retained samples override")
    sp.set_defaults(func=cmd_hmc)

    sp = sub.add_parser("oracle-is", help="importance-sampling baseline")
    common(sp)
    sp.add_argument("--n", type=int, default=100_000)
    sp.set_defaults(func=cmd_oracle_is)

    sp = sub.add_parser("conjugate-check", help="oracle equivalence on the linear-Gaussian case")
    common(sp)
    sp.set_defaults(func=cmd_conjugate_check)

    sp = sub.add_parser("forward", help="apply the forward operator to a field")
    common(sp, out=False)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--noisy", action="store_true", help="also write a noisy measurement")
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("metrics", help="rmse/ssim between two tensor files")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--range", type=float, default=1.0, help="ssim dynamic range")
    sp.add_argument("--out", default=None, help="optional CSV path")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("sweep", help="latent-dimension sweep")
    common(sp)
    sp.add_argument("--nz", required=True, help="comma-separated latent dims")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("pipeline", help="full run: phases A, B, C + metrics")
    common(sp)
    sp.add_argument("--generator", default=None, help="reuse a trained generator")
    sp.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (TrainingDiverged, NonFiniteError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
