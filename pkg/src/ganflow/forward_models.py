"""Physics operators and the Gaussian likelihood.

Three measurement operators, all differentiable through the graph engine:

* heat      -- backward-Euler diffusion of an initial temperature field,
               precomputed as one dense matrix at desk scale;
* radon     -- parallel-beam line integrals of the bilinearly interpolated
               image over a circular field of view, also a dense matrix;
* phase     -- masked magnitudes of the unnormalized 2-D DFT (nonlinear).

Every operator evaluation (numpy or in-graph) increments `solve_count` on the
problem, which is how the training-phase solve budgets are audited.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class ForwardModelError(Exception):
    pass


@dataclass
class NoiseModel:
    """Additive zero-mean Gaussian noise, one variance for all entries."""

    sigma2: float

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ForwardModelError("sigma2 must be positive")

    def sample(self, rng: np.random.Generator, shape):
        return rng.normal(0.0, np.sqrt(self.sigma2), size=shape)


class ForwardProblem:
    """Operator + noise model + (optional) measurement, with a solve counter."""

    kind = "abstract"

    def __init__(self, noise: NoiseModel):
        self.noise = noise
        self.solve_count = 0
        self.y_hat: np.ndarray | None = None

    # subclasses: _apply_batch(xm: (B, n_x)) -> (B, n_y)
    #             _build(g, x_node (B, n_x)) -> (B, n_y) node

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward map of a single sample; counts one solve."""
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.n_x:
            raise ForwardModelError(f"expected {self.n_x} entries, got {x.size}")
        self.solve_count += 1
        return self._reshape_out(self._apply_batch(x.reshape(1, -1))[0])

    def apply_batch(self, xm: np.ndarray) -> np.ndarray:
        xm = np.asarray(xm, dtype=np.float64)
        self.solve_count += xm.shape[0]
        return self._apply_batch(xm)

    def build(self, g: ad.Graph, x_node: ad.Node) -> ad.Node:
        """Emit the operator into a graph; counts the batch on every recompute."""
        batch = x_node.shape[0]
        out = self._build(g, x_node)

        def tick(n=batch):
            self.solve_count += n

        g.add_hook(tick)
        return out

    def measure(self, x_true: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Synthetic noisy measurement of a ground-truth field."""
        y = self.apply(x_true)
        self.y_hat = y + self.noise.sample(rng, y.shape)
        return self.y_hat

    def reset_count(self) -> None:
        self.solve_count = 0

    def _reshape_out(self, flat):
        return flat

    @property
    def n_y(self) -> int:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# heat conduction
# ---------------------------------------------------------------------------

def _heat_interior_operator(n_p: int, length: float, kappa: float, dt: float, n_steps: int):
    """((I + dt K)^-1)^n_steps on interior nodes; K is the scaled 5-point
    negative Laplacian with boundary unknowns eliminated (u = 0 there)."""
    m = n_p - 2
    h = length / (n_p - 1)
    c = kappa / h**2
    K = np.zeros((m * m, m * m))
    for i in range(m):
        for j in range(m):
            row = i * m + j
            K[row, row] = 4.0 * c
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < m and 0 <= jj < m:
                    K[row, ii * m + jj] = -c
    B = np.linalg.inv(np.eye(m * m) + dt * K)
    return np.linalg.matrix_power(B, n_steps)


class HeatProblem(ForwardProblem):
    """Initial field -> field at final time, zero Dirichlet boundary."""

    kind = "heat"

    def __init__(
        self,
        n_p: int,
        sigma2: float = 1.0,
        length: float = 2.0 * np.pi,
        kappa: float = 0.64,
        dt: float = 0.01,
        t_final: float = 1.0,
    ):
        super().__init__(NoiseModel(sigma2))
        self.n_p = n_p
        self.length = length
        self.kappa = kappa
        self.dt = dt
        self.t_final = t_final
        n_steps = int(round(t_final / dt))
        interior = _heat_interior_operator(n_p, length, kappa, dt, n_steps)
        # embed into the full grid; boundary rows/cols stay zero
        idx = np.array(
            [i * n_p + j for i in range(1, n_p - 1) for j in range(1, n_p - 1)]
        )
        A = np.zeros((n_p * n_p, n_p * n_p))
        A[np.ix_(idx, idx)] = interior
        self.operator = A

    @property
    def n_x(self):
        return self.n_p * self.n_p

    @property
    def n_y(self):
        return self.n_p * self.n_p

    def _apply_batch(self, xm):
        return xm @ self.operator.T

    def _build(self, g, x_node):
        return ad.matmul(x_node, g.const(self.operator.T))

    def _reshape_out(self, flat):
        return flat.reshape(self.n_p, self.n_p)


class LinearProblem(ForwardProblem):
    """y = F x for an explicit dense matrix; the conjugate-oracle workhorse."""

    kind = "linear"

    def __init__(self, matrix: np.ndarray, sigma2: float):
        super().__init__(NoiseModel(sigma2))
        self.operator = np.asarray(matrix, dtype=np.float64)

    @property
    def n_x(self):
        return self.operator.shape[1]

    @property
    def n_y(self):
        return self.operator.shape[0]

    def _apply_batch(self, xm):
        return xm @ self.operator.T

    def _build(self, g, x_node):
        return ad.matmul(x_node, g.const(self.operator.T))


# ---------------------------------------------------------------------------
# Radon transform
# ---------------------------------------------------------------------------

def radon_geometry(n_p: int, n_angles: int, n_det: int):
    """Detector offsets (centered, spanning the field of view) and angles."""
    radius = (n_p - 1) / 2.0
    offsets = (np.arange(n_det) + 0.5) * (2.0 * radius / n_det) - radius
    angles = np.arange(n_angles) * np.pi / n_angles
    return radius, offsets, angles


def _bilinear_weights(u: float, v: float, n_p: int):
    """Corner pixels and weights of the interpolant at grid coords (u, v)."""
    iu = min(int(np.floor(u)), n_p - 2)
    iv = min(int(np.floor(v)), n_p - 2)
    fu, fv = u - iu, v - iv
    # image index = row * n_p + col with row <- v, col <- u
    return (
        (iv * n_p + iu, (1 - fu) * (1 - fv)),
        (iv * n_p + iu + 1, fu * (1 - fv)),
        ((iv + 1) * n_p + iu, (1 - fu) * fv),
        ((iv + 1) * n_p + iu + 1, fu * fv),
    )


def _ray_segments(t: float, angle: float, n_p: int, radius: float):
    """Split the ray's field-of-view chord at every cell boundary."""
    smax = np.sqrt(max(radius * radius - t * t, 0.0))
    if smax <= 0:
        return None
    nx, ny = np.cos(angle), np.sin(angle)
    dx, dy = -np.sin(angle), np.cos(angle)
    half = (n_p - 1) / 2.0
    # grid coords u = x + half, v = half - y
    u0, du = t * nx + half, dx
    v0, dv = half - t * ny, -dy
    cuts = [-smax, smax]
    for q0, dq in ((u0, du), (v0, dv)):
        if abs(dq) < 1e-14:
            continue
        lo = int(np.ceil(min(q0 - smax * abs(dq), q0 + smax * abs(dq))))
        for k in range(max(lo, 0), n_p):
            s = (k - q0) / dq
            if -smax < s < smax:
                cuts.append(s)
    cuts = np.unique(np.asarray(cuts))
    return u0, du, v0, dv, cuts


def _radon_matrix(n_p: int, n_angles: int, n_det: int) -> np.ndarray:
    """Exact line integrals of the bilinear interpolant, one row per ray.

    Within a grid cell the interpolant is quadratic along the ray, so a
    per-segment Simpson rule integrates it exactly.
    """
    radius, offsets, angles = radon_geometry(n_p, n_angles, n_det)
    mat = np.zeros((n_det * n_angles, n_p * n_p))
    for j, ang in enumerate(angles):
        for i, t in enumerate(offsets):
            seg = _ray_segments(t, ang, n_p, radius)
            if seg is None:
                continue
            u0, du, v0, dv, cuts = seg
            row = mat[i * n_angles + j]
            for sa, sb in zip(cuts[:-1], cuts[1:]):
                ln = sb - sa
                if ln < 1e-12:
                    continue
                for s, wq in ((sa, ln / 6.0), (0.5 * (sa + sb), 4.0 * ln / 6.0), (sb, ln / 6.0)):
                    u = min(max(u0 + s * du, 0.0), n_p - 1.0)
                    v = min(max(v0 + s * dv, 0.0), n_p - 1.0)
                    for pix, w in _bilinear_weights(u, v, n_p):
                        row[pix] += wq * w
    return mat


class RadonProblem(ForwardProblem):
    """Parallel-beam sinogram of shape (n_det, n_angles)."""

    kind = "radon"

    def __init__(self, n_p: int, n_angles: int, n_det: int | None = None, sigma2: float = 1.0):
        super().__init__(NoiseModel(sigma2))
        self.n_p = n_p
        self.n_angles = n_angles
        self.n_det = n_det if n_det is not None else n_p
        self.operator = _radon_matrix(n_p, n_angles, self.n_det)

    @property
    def n_x(self):
        return self.n_p * self.n_p

    @property
    def n_y(self):
        return self.n_det * self.n_angles

    def _apply_batch(self, xm):
        return xm @ self.operator.T

    def _build(self, g, x_node):
        return ad.matmul(x_node, g.const(self.operator.T))

    def _reshape_out(self, flat):
        return flat.reshape(self.n_det, self.n_angles)


# ---------------------------------------------------------------------------
# phase retrieval
# ---------------------------------------------------------------------------

def build_mask(n_p: int, r: int, center_fraction: float, seed: int) -> np.ndarray:
    """Vertical-band undersampling mask.

    The central band of floor(center_fraction * n_p) columns is always kept;
    each remaining column is kept independently with the probability that
    makes the expected kept fraction equal 1/r.
    """
    if r not in (4, 8):
        raise ForwardModelError("acceleration factor r must be 4 or 8")
    n_center = int(np.floor(center_fraction * n_p))
    target = n_p / r
    if n_center > target:
        raise ForwardModelError(
            f"center band of {n_center} columns already exceeds the 1/{r} budget"
        )
    mask_cols = np.zeros(n_p, dtype=np.float64)
    lo = (n_p - n_center) // 2
    mask_cols[lo : lo + n_center] = 1.0
    outside = np.flatnonzero(mask_cols == 0)
    if outside.size:
        p = (target - n_center) / outside.size
        rng = np.random.default_rng(seed)
        mask_cols[outside] = (rng.random(outside.size) < p).astype(np.float64)
    return np.tile(mask_cols, (n_p, 1))


def _dft_matrices(n_p: int):
    k = np.arange(n_p)
    phase = 2.0 * np.pi * np.outer(k, k) / n_p
    C = np.cos(phase)
    S = -np.sin(phase)
    k_re = np.kron(C, C) - np.kron(S, S)
    k_im = np.kron(C, S) + np.kron(S, C)
    return k_re, k_im


class PhaseProblem(ForwardProblem):
    """Magnitudes of the masked unnormalized 2-D DFT of a real image."""

    kind = "phase"

    def __init__(self, n_p: int, mask: np.ndarray, sigma2: float):
        super().__init__(NoiseModel(sigma2))
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n_p, n_p):
            raise ForwardModelError(f"mask shape {mask.shape} does not match image {n_p}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ForwardModelError("mask entries must be 0 or 1")
        self.n_p = n_p
        self.mask = mask
        self.kept = np.flatnonzero(mask.ravel())
        self.k_re, self.k_im = _dft_matrices(n_p)

    @property
    def n_x(self):
        return self.n_p * self.n_p

    @property
    def n_y(self):
        return int(self.kept.size)

    def _apply_batch(self, xm):
        re = xm @ self.k_re.T
        im = xm @ self.k_im.T
        return np.hypot(re[:, self.kept], im[:, self.kept])

    def _build(self, g, x_node):
        re = ad.take_cols(ad.matmul(x_node, g.const(self.k_re.T)), self.kept)
        im = ad.take_cols(ad.matmul(x_node, g.const(self.k_im.T)), self.kept)
        return ad.hypot(re, im)

    def zero_frequency_amplitude(self, x: np.ndarray) -> float:
        """|DFT(x)[0, 0]| without touching the solve counter."""
        return float(abs(np.sum(x)))


# ---------------------------------------------------------------------------
# Gaussian log-likelihood
# ---------------------------------------------------------------------------

def log_likelihood(problem: ForwardProblem, y_hat: np.ndarray, x: np.ndarray) -> float:
    """log N(y_hat | F(x), sigma2 I); counts one forward solve."""
    y = problem.apply(x).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y_hat.size != y.size:
        raise ForwardModelError(f"measurement has {y_hat.size} entries, expected {y.size}")
    s2 = problem.noise.sigma2
    n = y.size
    return float(-0.5 * np.sum((y_hat - y) ** 2) / s2 - 0.5 * n * np.log(2.0 * np.pi * s2))


def log_likelihood_nodes(
    problem: ForwardProblem, g: ad.Graph, y_hat: np.ndarray, x_node: ad.Node
) -> ad.Node:
    """Per-sample log-likelihood node of shape (B,) for a batch of fields."""
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y_hat.size != problem.n_y:
        raise ForwardModelError(f"measurement has {y_hat.size} entries, expected {problem.n_y}")
    y = problem.build(g, x_node)
    resid = ad.sub(g.const(y_hat.reshape(1, -1)), y)
    s2 = problem.noise.sigma2
    quad = ad.mul(ad.sum_(ad.square(resid), axis=1), g.const(np.float64(-0.5 / s2)))
    const = -0.5 * y_hat.size * np.log(2.0 * np.pi * s2)
    return ad.add(quad, g.const(np.float64(const)))
