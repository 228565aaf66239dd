"""Synthetic prior datasets and the [-1, 1] rescaling contract.

Two data-generating laws:

* rectangular inclusions on a zero background, temperature ramping linearly
  from 2 (left edge) to 4 (right edge);
* head phantoms of ten constant-density ellipses with jittered parameters,
  integer pixel shifts, and a small rotation, clamped to [0, 1].

Training data is always rescaled to [-1, 1] (the generator ends in TanH);
the inverse map is applied before any likelihood evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import tensorio
from .util import derive_rng, ordered_map


class PriorDataError(Exception):
    pass


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rescaler:
    """Affine map [lo, hi] <-> [-1, 1]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PriorDataError("rescaler needs lo < hi")

    def rescale(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def unrescale(self, xt):
        return self.lo + (np.asarray(xt, dtype=np.float64) + 1.0) * (self.hi - self.lo) / 2.0

    def unrescale_node(self, g: ad.Graph, node: ad.Node) -> ad.Node:
        half_span = g.const(np.float64((self.hi - self.lo) / 2.0))
        shift = g.const(np.float64(self.lo + (self.hi - self.lo) / 2.0))
        return ad.add(ad.mul(node, half_span), shift)


def default_rescaler(kind: str) -> Rescaler:
    # bounds of the data-generating laws
    if kind == "heat":
        return Rescaler(0.0, 4.0)
    if kind in ("radon", "phase"):
        return Rescaler(0.0, 1.0)
    if kind == "conjugate":
        return Rescaler(-1.0, 1.0)  # identity
    raise PriorDataError(f"no rescaler for problem kind {kind!r}")


# ---------------------------------------------------------------------------
# rectangular inclusions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RectPriorConfig:
    n_p: int
    length: float = 2.0 * np.pi
    corner1_range: tuple = (0.2, 0.4)  # top-left, fractions of length
    corner2_range: tuple = (0.6, 0.8)  # bottom-right
    v_left: float = 2.0
    v_right: float = 4.0


def sample_rect_params(rng: np.random.Generator, cfg: RectPriorConfig) -> np.ndarray:
    """(col1, row1, col2, row2) corner coordinates in physical units."""
    lo1, hi1 = cfg.corner1_range
    lo2, hi2 = cfg.corner2_range
    c1 = rng.uniform(lo1 * cfg.length, hi1 * cfg.length, size=2)
    c2 = rng.uniform(lo2 * cfg.length, hi2 * cfg.length, size=2)
    return np.array([c1[0], c1[1], c2[0], c2[1]])


def render_rect_field(params: np.ndarray, cfg: RectPriorConfig) -> np.ndarray:
    """Rasterize one inclusion; corners snap to the nearest grid node."""
    h = cfg.length / (cfg.n_p - 1)
    c1x, c1y, c2x, c2y = params
    j0, i0 = int(round(c1x / h)), int(round(c1y / h))
    j1, i1 = int(round(c2x / h)), int(round(c2y / h))
    field = np.zeros((cfg.n_p, cfg.n_p))
    if j1 <= j0 or i1 < i0:
        raise PriorDataError("degenerate rectangle")
    ramp = cfg.v_left + (cfg.v_right - cfg.v_left) * (
        np.arange(j0, j1 + 1) - j0
    ) / (j1 - j0)
    field[i0 : i1 + 1, j0 : j1 + 1] = ramp[None, :]
    return field


def gen_rect_field(rng: np.random.Generator, cfg: RectPriorConfig) -> np.ndarray:
    return render_rect_field(sample_rect_params(rng, cfg), cfg)


# ---------------------------------------------------------------------------
# perturbed head phantoms
# ---------------------------------------------------------------------------

# columns: center_x, center_y, semi_a, semi_b, angle_deg, density
BASE_ELLIPSES = np.array(
    [
        [0.0, 0.0, 0.69, 0.92, 0.0, 1.0],
        [0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8],
        [0.22, 0.0, 0.11, 0.31, -18.0, -0.2],
        [-0.22, 0.0, 0.16, 0.41, -18.0, -0.2],
        [0.0, 0.35, 0.21, 0.25, 0.0, 0.1],
        [0.0, 0.1, 0.046, 0.026, 0.0, 0.1],
        [0.0, -0.1, 0.046, 0.046, 0.0, 0.1],
        [-0.08, -0.605, 0.046, 0.023, 0.0, 0.1],
        [0.0, -0.606, 0.023, 0.023, 0.0, 0.1],
        [0.06, -0.605, 0.023, 0.046, 0.0, 0.1],
    ]
)

PERTURB_SCALES = np.array([0.005, 0.005, 0.005, 0.005, 2.5, 0.0005])


@dataclass(frozen=True)
class PhantomConfig:
    n_p: int
    shift_max: int = 8
    rot_max_deg: float = 20.0


def perturb_ellipses(rng: np.random.Generator) -> np.ndarray:
    xi = rng.uniform(-1.0, 1.0, size=(10, 6))
    return BASE_ELLIPSES + PERTURB_SCALES[None, :] * xi


def render_phantom(ellipses: np.ndarray, n_p: int) -> np.ndarray:
    """Sum of constant-density ellipses at pixel centers, clamped to [0, 1]."""
    centers = (np.arange(n_p) + 0.5) * 2.0 / n_p - 1.0
    rr = centers[None, :]  # x varies along columns
    ss = -centers[:, None]  # y decreases down the rows
    img = np.zeros((n_p, n_p))
    for cx, cy, a, b, ang, rho in ellipses:
        th = np.deg2rad(ang)
        dr = rr - cx
        ds = ss - cy
        u = dr * np.cos(th) + ds * np.sin(th)
        v = -dr * np.sin(th) + ds * np.cos(th)
        img += rho * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return np.clip(img, 0.0, 1.0)


def _shift_image(img: np.ndarray, n_h: int, n_v: int) -> np.ndarray:
    """Integer pixel shift (columns right, rows down) with zero fill."""
    n = img.shape[0]
    out = np.zeros_like(img)
    src_r = slice(max(0, -n_v), min(n, n - n_v))
    src_c = slice(max(0, -n_h), min(n, n - n_h))
    dst_r = slice(max(0, n_v), min(n, n + n_v))
    dst_c = slice(max(0, n_h), min(n, n + n_h))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def _rotate_image(img: np.ndarray, beta_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear resampling, zero outside."""
    n = img.shape[0]
    th = np.deg2rad(beta_deg)
    c = (n - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    # inverse map: output pixel pulls from input coordinates
    dy = rows - c
    dx = cols - c
    src_x = np.cos(th) * dx + np.sin(th) * dy + c
    src_y = -np.sin(th) * dx + np.cos(th) * dy + c
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros_like(img)
    for ddy, ddx, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy = y0 + ddy
        xx = x0 + ddx
        ok = (yy >= 0) & (yy < n) & (xx >= 0) & (xx < n)
        out[ok] += w[ok] * img[yy[ok], xx[ok]]
    return out


def gen_phantom(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    ellipses = perturb_ellipses(rng)
    n_h = int(rng.integers(-cfg.shift_max, cfg.shift_max + 1))
    n_v = int(rng.integers(-cfg.shift_max, cfg.shift_max + 1))
    beta = float(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))
    img = render_phantom(ellipses, cfg.n_p)
    img = _shift_image(img, n_h, n_v)
    return _rotate_image(img, beta)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def gen_dataset(kind: str, n: int, seed: int, n_p: int, shift_max: int = 8):
    """n prior fields, flattened to (n, n_p^2), in natural (unrescaled) units.

    Per-sample seed streams keep the output independent of the worker count.
    """
    if kind == "rect":
        cfg = RectPriorConfig(n_p=n_p)

        def one(i):
            return gen_rect_field(derive_rng(seed, "rect", i), cfg).ravel()

    elif kind == "phantom":
        cfg = PhantomConfig(n_p=n_p, shift_max=shift_max)

        def one(i):
            return gen_phantom(derive_rng(seed, "phantom", i), cfg).ravel()

    else:
        raise PriorDataError(f"unknown prior kind {kind!r}")
    return np.stack(ordered_map(one, range(n)))


def save_dataset(outdir, fields: np.ndarray, manifest: dict) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    n_p = int(round(np.sqrt(fields.shape[1])))
    for i, row in enumerate(fields):
        tensorio.save_tensor(out / f"sample_{i:05d}.gft", row.reshape(n_p, n_p))
    cfgmod.dump({"dataset": {**manifest, "count": fields.shape[0], "n_p": n_p}}, out / "manifest.toml")


def load_dataset(path):
    import tomli

    root = Path(path)
    with open(root / "manifest.toml", "rb") as f:
        manifest = tomli.load(f)["dataset"]
    fields = [
        tensorio.load_tensor(root / f"sample_{i:05d}.gft").ravel()
        for i in range(manifest["count"])
    ]
    return np.stack(fields), manifest
