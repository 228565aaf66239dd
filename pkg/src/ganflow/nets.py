"""Small dense networks: parameter init, graph building, numpy forward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .params import ParamVector


@dataclass(frozen=True)
class DenseNet:
    """Fully connected net; parameters live in a ParamVector under `prefix`."""

    prefix: str
    widths: tuple  # (n_in, hidden..., n_out)
    hidden_act: str = "leaky_relu"  # or "tanh"
    out_act: str = "linear"  # or "tanh"
    slope: float = 0.2

    def layer_names(self):
        for i in range(len(self.widths) - 1):
            yield f"{self.prefix}.W{i}", (self.widths[i], self.widths[i + 1])
            yield f"{self.prefix}.b{i}", (self.widths[i + 1],)

    def init_params(self, rng: np.random.Generator) -> dict:
        out = {}
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            fan_in = self.widths[i]
            gain = np.sqrt(2.0 / fan_in) if self.hidden_act == "leaky_relu" else np.sqrt(1.0 / fan_in)
            if i == n_layers - 1:
                gain = np.sqrt(1.0 / fan_in)
            out[f"{self.prefix}.W{i}"] = rng.normal(0.0, gain, size=(fan_in, self.widths[i + 1]))
            out[f"{self.prefix}.b{i}"] = np.zeros(self.widths[i + 1])
        return out

    def build(self, g: ad.Graph, x: ad.Node, get) -> ad.Node:
        n_layers = len(self.widths) - 1
        h = x
        for i in range(n_layers):
            h = ad.affine(h, get(f"{self.prefix}.W{i}"), get(f"{self.prefix}.b{i}"))
            if i < n_layers - 1:
                h = ad.leaky_relu(h, self.slope) if self.hidden_act == "leaky_relu" else ad.tanh(h)
            elif self.out_act == "tanh":
                h = ad.tanh(h)
        return h

    def forward_np(self, x: np.ndarray, params: ParamVector) -> np.ndarray:
        n_layers = len(self.widths) - 1
        h = np.asarray(x, dtype=np.float64)
        for i in range(n_layers):
            h = h @ params.get(f"{self.prefix}.W{i}") + params.get(f"{self.prefix}.b{i}")
            if i < n_layers - 1:
                h = np.where(h > 0, h, self.slope * h) if self.hidden_act == "leaky_relu" else np.tanh(h)
            elif self.out_act == "tanh":
                h = np.tanh(h)
        return h


def frozen_getter(g: ad.Graph, params: ParamVector):
    """Parameters enter the graph as constants (e.g. a frozen generator)."""
    cache: dict = {}

    def get(name):
        if name not in cache:
            cache[name] = g.const(params.get(name))
        return cache[name]

    return get


def trainable_getter(g: ad.Graph, params: ParamVector):
    """Parameters enter the graph as named inputs, rebound every step."""

    def get(name):
        if name in g.inputs:
            return g.inputs[name]
        offset, shape = params.segments[name]
        return g.input(name, shape)

    return get
