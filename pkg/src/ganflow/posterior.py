"""Posterior ensembles and reconstruction metrics.

Latent draws go through the trained flow and generator only; the forward
model is never evaluated here, which the solve counter can certify."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import autodiff as ad
from .flows import FlowModel
from .gan import GeneratorModel
from .nets import frozen_getter
from .util import derive_rng


class PosteriorError(Exception):
    pass


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray  # (n_s, n_x), natural units
    mean_field: np.ndarray
    std_field: np.ndarray

    @property
    def n_s(self):
        return self.samples.shape[0]

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "PosteriorEnsemble":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape[0] < 2:
            raise PosteriorError("an ensemble needs n_s >= 2")
        return cls(
            samples=samples,
            mean_field=samples.mean(axis=0),
            std_field=samples.std(axis=0, ddof=1),
        )


def sample_posterior(gen: GeneratorModel, flow: FlowModel, n_s: int, seed: int,
                     chunk: int = 4096) -> PosteriorEnsemble:
    """x_i = unrescale(G*(H*(z_i))), z_i ~ N(0, I)."""
    if n_s < 2:
        raise PosteriorError("n_s must be >= 2")
    rng = derive_rng(seed, "posterior-sample")
    out = []
    graphs = {}
    done = 0
    while done < n_s:
        b = min(chunk, n_s - done)
        z = rng.standard_normal((b, gen.n_z))
        if b not in graphs:
            g = ad.Graph()
            zn = g.input("z", (b, gen.n_z))
            h, _ = flow.build(g, zn, frozen_getter(g, flow.params))
            x = gen.build(g, h, frozen_getter(g, gen.params))
            graphs[b] = (g, x)
        g, x = graphs[b]
        g.bind("z", z)
        g.recompute()
        out.append(gen.rescaler.unrescale(x.value))
        done += b
    return PosteriorEnsemble.from_samples(np.concatenate(out, axis=0))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PosteriorError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> float:
    """Mean local structural similarity, 11x11 Gaussian window (sigma 1.5),
    K1 = 0.01, K2 = 0.03; windows fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise PosteriorError("ssim expects two equal-shape 2-D fields")
    if dynamic_range <= 0:
        raise PosteriorError("dynamic_range must be positive")
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise PosteriorError("image smaller than the 11x11 ssim window")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b**2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    rmse: float
    ssim: float
    n_s: int
    seed: int

    def __post_init__(self):
        if self.rmse < 0:
            raise PosteriorError("rmse cannot be negative")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise PosteriorError("ssim out of [-1, 1]")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rmse", "ssim", "n_s", "seed"])
            writer.writerow([repr(self.rmse), repr(self.ssim), self.n_s, self.seed])


def metric_report(mean_field: np.ndarray, truth: np.ndarray, dynamic_range: float,
                  n_s: int = 0, seed: int = 0) -> MetricReport:
    n_p = int(round(np.sqrt(mean_field.size)))
    a = np.asarray(mean_field, dtype=np.float64).reshape(n_p, n_p)
    b = np.asarray(truth, dtype=np.float64).reshape(n_p, n_p)
    return MetricReport(rmse=rmse(a, b), ssim=ssim(a, b, dynamic_range), n_s=n_s, seed=seed)
