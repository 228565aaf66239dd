"""Invertible layers with exact log-Jacobians and their composition.

Layer types: planar perturbations (no closed-form inverse; none is needed on
the sampling path), affine coupling (exact inverse), activation
normalization, and fixed permutations.  The composite log-determinant is the
sum of the per-layer terms.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import tomli

from . import autodiff as ad
from . import config as cfgmod
from .nets import DenseNet, frozen_getter, trainable_getter
from .params import ParamVector
from .util import derive_rng


class FlowError(Exception):
    pass


PLANAR_INIT_STD = 0.1  # parameter init N(0, 0.01); see README notes


# ---------------------------------------------------------------------------
# planar
# ---------------------------------------------------------------------------

def planar_constrain(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Reparameterized u with w.u >= -1, which keeps the layer invertible."""
    wnorm2 = float(w @ w)
    if wnorm2 < 1e-24:
        raise FlowError("planar layer with ||w|| < 1e-12")
    wu = float(w @ u)
    m = -1.0 + np.logaddexp(0.0, wu)
    return u + (m - wu) * w / wnorm2


class PlanarLayer:
    kind = "planar"
    invertible = False

    def __init__(self, index: int, n_z: int):
        self.prefix = f"flow.L{index}"
        self.n_z = n_z

    def init_params(self, rng):
        return {
            f"{self.prefix}.u": rng.normal(0.0, PLANAR_INIT_STD, size=self.n_z),
            f"{self.prefix}.w": rng.normal(0.0, PLANAR_INIT_STD, size=self.n_z),
            f"{self.prefix}.b": np.zeros(1),
        }

    def build(self, g, x, get):
        u = get(f"{self.prefix}.u")
        w = get(f"{self.prefix}.w")
        b = get(f"{self.prefix}.b")
        # constraint applied on every forward: optimizer steps may leave the
        # raw u outside the invertible region
        wu = ad.dot(w, u)
        m = ad.softplus(wu) - 1.0
        uhat = ad.add(u, ad.mul(ad.mul(ad.sub(m, wu), ad.reciprocal(ad.sum_(ad.square(w)))), w))
        a = ad.add(ad.reshape(ad.matmul(x, ad.reshape(w, (self.n_z, 1))), (x.shape[0],)), b)
        t = ad.tanh(a)
        y = ad.add(x, ad.mul(ad.reshape(t, (x.shape[0], 1)), ad.reshape(uhat, (1, self.n_z))))
        uw = ad.dot(uhat, w)
        logdet = ad.log(ad.add(ad.mul(ad.sub(g.const(np.float64(1.0)), ad.square(t)), uw), g.const(np.float64(1.0))))
        return y, logdet

    def inverse_np(self, y, params):
        raise FlowError("planar layers have no closed-form inverse")

    def spec(self):
        return {"kind": self.kind}


# ---------------------------------------------------------------------------
# affine coupling
# ---------------------------------------------------------------------------

class CouplingLayer:
    """Two half-updates with scale/shift nets; starts as the identity map.

    Zero-initialized gains multiply every net output, so a freshly built
    layer is exactly y = x regardless of the random net weights.
    """

    kind = "coupling"
    invertible = True

    def __init__(self, index: int, n_z: int, perm: np.ndarray, hidden: int | None = None):
        if n_z < 2:
            raise FlowError("coupling needs n_z >= 2")
        self.prefix = f"flow.L{index}"
        self.n_z = n_z
        self.perm = np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(n_z)):
            raise FlowError("partition permutation must cover all coordinates")
        d_a = n_z // 2
        self.idx_a = self.perm[:d_a]
        self.idx_b = self.perm[d_a:]
        h = hidden if hidden else 2 * n_z
        d_b = n_z - d_a
        self.nets = {
            "s1": DenseNet(f"{self.prefix}.s1", (d_a, h, h, d_b), hidden_act="tanh"),
            "t1": DenseNet(f"{self.prefix}.t1", (d_a, h, h, d_b), hidden_act="tanh"),
            "s2": DenseNet(f"{self.prefix}.s2", (d_b, h, h, d_a), hidden_act="tanh"),
            "t2": DenseNet(f"{self.prefix}.t2", (d_b, h, h, d_a), hidden_act="tanh"),
        }

    def init_params(self, rng):
        out = {}
        for net in self.nets.values():
            out.update(net.init_params(rng))
        for tag in ("s1", "t1", "s2", "t2"):
            out[f"{self.prefix}.{tag}.gain"] = np.zeros(1)
        return out

    def _scale(self, g, get, tag, x):
        raw = self.nets[tag].build(g, x, get)
        gain = ad.reshape(get(f"{self.prefix}.{tag}.gain"), (1, 1))
        return ad.mul(ad.tanh(raw), gain)

    def _shift(self, g, get, tag, x):
        raw = self.nets[tag].build(g, x, get)
        gain = ad.reshape(get(f"{self.prefix}.{tag}.gain"), (1, 1))
        return ad.mul(raw, gain)

    def build(self, g, x, get):
        xa = ad.take_cols(x, self.idx_a)
        xb = ad.take_cols(x, self.idx_b)
        s1 = self._scale(g, get, "s1", xa)
        t1 = self._shift(g, get, "t1", xa)
        yb = ad.add(ad.mul(xb, ad.exp(s1)), t1)
        s2 = self._scale(g, get, "s2", yb)
        t2 = self._shift(g, get, "t2", yb)
        ya = ad.add(ad.mul(xa, ad.exp(s2)), t2)
        y = ad.add(
            ad.scatter_cols(ya, self.idx_a, self.n_z),
            ad.scatter_cols(yb, self.idx_b, self.n_z),
        )
        logdet = ad.add(ad.sum_(s1, axis=1), ad.sum_(s2, axis=1))
        return y, logdet

    def _np_scale(self, tag, x, params):
        gain = params.get(f"{self.prefix}.{tag}.gain")[0]
        return gain * np.tanh(self.nets[tag].forward_np(x, params))

    def _np_shift(self, tag, x, params):
        gain = params.get(f"{self.prefix}.{tag}.gain")[0]
        return gain * self.nets[tag].forward_np(x, params)

    def inverse_np(self, y, params):
        ya = y[:, self.idx_a]
        yb = y[:, self.idx_b]
        xa = (ya - self._np_shift("t2", yb, params)) * np.exp(-self._np_scale("s2", yb, params))
        xb = (yb - self._np_shift("t1", xa, params)) * np.exp(-self._np_scale("s1", xa, params))
        x = np.zeros_like(y)
        x[:, self.idx_a] = xa
        x[:, self.idx_b] = xb
        return x

    def spec(self):
        return {"kind": self.kind, "perm": self.perm.tolist(), "hidden": self.nets["s1"].widths[1]}


# ---------------------------------------------------------------------------
# activation normalization
# ---------------------------------------------------------------------------

class ActNormLayer:
    kind = "actnorm"
    invertible = True

    def __init__(self, index: int, n_z: int):
        self.prefix = f"flow.L{index}"
        self.n_z = n_z
        self.initialized = False

    def init_params(self, rng):
        return {
            f"{self.prefix}.scale": np.ones(self.n_z),
            f"{self.prefix}.bias": np.zeros(self.n_z),
        }

    def init_from_batch(self, batch: np.ndarray, params: ParamVector):
        """Data-dependent init: first batch comes out with mean 0, std 1."""
        if batch.shape[0] < 2:
            raise FlowError("actnorm init needs a batch of at least 2")
        std = batch.std(axis=0)
        if np.any(std < 1e-12):
            raise FlowError("actnorm init hit a zero-variance dimension")
        params.set(f"{self.prefix}.bias", batch.mean(axis=0))
        params.set(f"{self.prefix}.scale", 1.0 / std)
        self.initialized = True

    def build(self, g, x, get):
        scale = get(f"{self.prefix}.scale")
        bias = get(f"{self.prefix}.bias")
        y = ad.mul(ad.sub(x, ad.reshape(bias, (1, self.n_z))), ad.reshape(scale, (1, self.n_z)))
        per_dim = ad.log(ad.sqrt(ad.square(scale)))  # log|scale|
        logdet = ad.mul(ad.sum_(per_dim), g.const(np.ones(x.shape[0])))
        return y, logdet

    def inverse_np(self, y, params):
        scale = params.get(f"{self.prefix}.scale")
        bias = params.get(f"{self.prefix}.bias")
        return y / scale + bias

    def spec(self):
        return {"kind": self.kind, "initialized": self.initialized}


# ---------------------------------------------------------------------------
# fixed permutation
# ---------------------------------------------------------------------------

class PermuteLayer:
    kind = "permute"
    invertible = True

    def __init__(self, index: int, n_z: int, perm: np.ndarray):
        self.prefix = f"flow.L{index}"
        self.n_z = n_z
        self.perm = np.asarray(perm, dtype=np.int64)

    def init_params(self, rng):
        return {}

    def build(self, g, x, get):
        y = ad.take_cols(x, self.perm)
        return y, g.const(np.zeros(x.shape[0]))

    def inverse_np(self, y, params):
        return y[:, np.argsort(self.perm)]

    def spec(self):
        return {"kind": self.kind, "perm": self.perm.tolist()}


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

class FlowModel:
    """Ordered bijections acting on the latent space."""

    def __init__(self, layers: list, n_z: int, params: ParamVector):
        self.layers = layers
        self.n_z = n_z
        self.params = params
        self._fwd_cache: dict = {}

    @property
    def n_f(self):
        return len(self.layers)

    # -------------------------------------------------------------- creation
    @classmethod
    def create(cls, kind: str, n_layers: int, n_z: int, seed: int,
               hidden: int = 0, actnorm: bool = False) -> "FlowModel":
        """Stack `n_layers` layers of one family.

        kind "planar": planar stack.  kind "coupling": per-layer random
        partitions, optionally preceded by actnorm.
        """
        rng = derive_rng(seed, "flow-init")
        layers: list = []
        idx = 0
        for _ in range(n_layers):
            if kind == "planar":
                layers.append(PlanarLayer(idx, n_z))
                idx += 1
            elif kind == "coupling":
                if actnorm:
                    layers.append(ActNormLayer(idx, n_z))
                    idx += 1
                layers.append(CouplingLayer(idx, n_z, rng.permutation(n_z), hidden or None))
                idx += 1
            else:
                raise FlowError(f"unknown flow kind {kind!r}")
        arrays = {}
        for layer in layers:
            arrays.update(layer.init_params(rng))
        params = ParamVector.from_dict(arrays) if arrays else ParamVector.from_dict({"flow.empty": np.zeros(1)})
        return cls(layers, n_z, params)

    # -------------------------------------------------------------- graph
    def build(self, g: ad.Graph, z: ad.Node, get) -> tuple[ad.Node, ad.Node]:
        self._require_initialized()
        h = z
        logdet = g.const(np.zeros(z.shape[0]))
        for layer in self.layers:
            h, ld = layer.build(g, h, get)
            logdet = ad.add(logdet, ld)
        return h, logdet

    # -------------------------------------------------------------- numpy paths
    def forward(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(H(z), log|det dH/dz|) for a batch; parameters are rebound, so the
        cached graph stays valid across training steps."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        B = z.shape[0]
        if B not in self._fwd_cache:
            g = ad.Graph()
            zn = g.input("flow.z", (B, self.n_z))
            out, logdet = self.build(g, zn, trainable_getter(g, self.params))
            self._fwd_cache[B] = (g, out, logdet)
        g, out, logdet = self._fwd_cache[B]
        g.bind("flow.z", z)
        g.bind_params(self.params)
        g.recompute()
        return out.value.copy(), logdet.value.copy()

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        for layer in reversed(self.layers):
            y = layer.inverse_np(y, self.params)
        return y

    def initialize_actnorm(self, z_batch: np.ndarray) -> None:
        """One-time data-dependent init, layer by layer, in composition order."""
        h = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ActNormLayer) and not layer.initialized:
                layer.init_from_batch(h, self.params)
            h = self._single_layer_forward(i, h)
        self._fwd_cache.clear()

    def _single_layer_forward(self, i, h):
        g = ad.Graph()
        xn = g.input("x", h.shape)
        out, _ = self.layers[i].build(g, xn, frozen_getter(g, self.params))
        g.bind("x", h)
        g.recompute()
        return out.value.copy()

    def _require_initialized(self):
        for layer in self.layers:
            if isinstance(layer, ActNormLayer) and not layer.initialized:
                raise FlowError("actnorm layer used before data-dependent init")

    # -------------------------------------------------------------- files
    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.params.save(prefix.with_suffix(".gfp"))
        doc = {
            "flow": {
                "n_z": self.n_z,
                "n_f": self.n_f,
                "kinds": [layer.kind for layer in self.layers],
                "perms": [layer.spec().get("perm", []) for layer in self.layers],
                "hiddens": [layer.spec().get("hidden", 0) for layer in self.layers],
                "initialized": [bool(layer.spec().get("initialized", True)) for layer in self.layers],
            }
        }
        cfgmod.dump(doc, prefix.with_suffix(".toml"))

    @classmethod
    def load(cls, prefix) -> "FlowModel":
        prefix = Path(prefix)
        params = ParamVector.load(prefix.with_suffix(".gfp"))
        with open(prefix.with_suffix(".toml"), "rb") as f:
            doc = tomli.load(f)["flow"]
        layers: list = []
        for i, kind in enumerate(doc["kinds"]):
            if kind == "planar":
                layers.append(PlanarLayer(i, doc["n_z"]))
            elif kind == "coupling":
                layers.append(CouplingLayer(i, doc["n_z"], np.array(doc["perms"][i]), doc["hiddens"][i] or None))
            elif kind == "actnorm":
                layer = ActNormLayer(i, doc["n_z"])
                layer.initialized = doc["initialized"][i]
                layers.append(layer)
            elif kind == "permute":
                layers.append(PermuteLayer(i, doc["n_z"], np.array(doc["perms"][i])))
            else:
                raise FlowError(f"unknown layer kind {kind!r} in sidecar")
        return cls(layers, doc["n_z"], params)
