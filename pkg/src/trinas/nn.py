"""Parameterized layers over the autodiff primitives.

Layers here are functional: a layer object owns names, shapes and an
initializer, but the actual values live in a ``WeightSet`` that gets passed
to every call. That keeps whole networks pure functions of (weights, input),
which the second-order machinery depends on (it nudges weights in place and
replays the same closure).

Initialization follows the usual He/Glorot-style fan-in scaling so stacked
relu blocks neither die nor explode at the depths used here.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "Conv2d",
    "DepthwiseConv2d",
    "Linear",
    "Embedding",
    "collect_shapes",
    "init_weight_arrays",
]


class Conv2d:
    def __init__(self, prefix: str, cin: int, cout: int, k: int,
                 stride: int = 1, padding: str = "same", dilation: int = 1,
                 bias: bool = False):
        self.prefix = prefix
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.bias = bias

    def shapes(self) -> dict:
        s = {f"{self.prefix}.w": (self.cout, self.cin, self.k, self.k)}
        if self.bias:
            s[f"{self.prefix}.b"] = (self.cout,)
        return s

    def init(self, rng: np.random.Generator) -> dict:
        fan_in = self.cin * self.k * self.k
        std = np.sqrt(2.0 / fan_in)
        out = {f"{self.prefix}.w": std * rng.standard_normal(
            (self.cout, self.cin, self.k, self.k))}
        if self.bias:
            out[f"{self.prefix}.b"] = np.zeros(self.cout)
        return out

    def __call__(self, ws, x):
        b = ws[f"{self.prefix}.b"] if self.bias else None
        return ad.conv2d(x, ws[f"{self.prefix}.w"], b, stride=self.stride,
                         padding=self.padding, dilation=self.dilation)


class DepthwiseConv2d:
    def __init__(self, prefix: str, channels: int, k: int,
                 stride: int = 1, padding: str = "same", dilation: int = 1):
        self.prefix = prefix
        self.channels, self.k = channels, k
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def shapes(self) -> dict:
        return {f"{self.prefix}.w": (self.channels, self.k, self.k)}

    def init(self, rng: np.random.Generator) -> dict:
        std = np.sqrt(2.0 / (self.k * self.k))
        return {f"{self.prefix}.w": std * rng.standard_normal(
            (self.channels, self.k, self.k))}

    def __call__(self, ws, x):
        return ad.depthwise_conv2d(x, ws[f"{self.prefix}.w"],
                                   stride=self.stride, padding=self.padding,
                                   dilation=self.dilation)


class Linear:
    def __init__(self, prefix: str, fin: int, fout: int, bias: bool = True):
        self.prefix = prefix
        self.fin, self.fout = fin, fout
        self.bias = bias

    def shapes(self) -> dict:
        s = {f"{self.prefix}.w": (self.fin, self.fout)}
        if self.bias:
            s[f"{self.prefix}.b"] = (self.fout,)
        return s

    def init(self, rng: np.random.Generator) -> dict:
        std = np.sqrt(1.0 / self.fin)
        out = {f"{self.prefix}.w": std * rng.standard_normal((self.fin, self.fout))}
        if self.bias:
            out[f"{self.prefix}.b"] = np.zeros(self.fout)
        return out

    def __call__(self, ws, x):
        y = ad.matmul(x, ws[f"{self.prefix}.w"])
        if self.bias:
            y = y + ad.reshape(ws[f"{self.prefix}.b"], (1, self.fout))
        return y


class Embedding:
    """Lookup table of learned vectors, one per integer id."""

    def __init__(self, prefix: str, num: int, dim: int, std: float = 0.5):
        self.prefix = prefix
        self.num, self.dim = num, dim
        self.std = std

    def shapes(self) -> dict:
        return {f"{self.prefix}.table": (self.num, self.dim)}

    def init(self, rng: np.random.Generator) -> dict:
        return {f"{self.prefix}.table": self.std * rng.standard_normal(
            (self.num, self.dim))}

    def __call__(self, ws, ids):
        return ad.gather_rows(ws[f"{self.prefix}.table"], np.asarray(ids))


def collect_shapes(layers) -> dict:
    """Merge the shape dicts of several layers, rejecting name clashes."""
    out = {}
    for layer in layers:
        for name, shape in layer.shapes().items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out[name] = shape
    return out


def init_weight_arrays(layers, rng: np.random.Generator) -> dict:
    """Initialize all layers in order with a single RNG stream."""
    out = {}
    for layer in layers:
        for name, arr in layer.init(rng).items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out[name] = arr
    return out
