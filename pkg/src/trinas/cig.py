"""Class-conditional image generation against a shared-trunk critic.

The generator maps (label, noise) to an image through an embedding, a
linear lift and, depending on capacity, one or two upsample-convolution
stages, ending in tanh so outputs land in [-1, 1]. It deliberately
contains no batch normalization: no op mixes examples, so generating one
class alone produces the same pixels (up to BLAS rounding) as generating
it inside a mixed batch, and downstream losses can safely be computed on
per-class slices.

The critic is the relaxed search network itself (shared architecture
logits, private weights) reading the image with an extra label-embedding
plane concatenated as a channel, and a one-unit head producing a realness
logit.

Both players update simultaneously from one value function

    V(G, H) = E[log D(x, y)] + E[log(1 - D(G(z, y), y))],

the critic H ascending, the generator G descending (the saturating form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .data import nchw
from .search_space import ArchParams, Supernet, SupernetSpec

__all__ = [
    "GeneratorSpec",
    "Generator",
    "Discriminator",
    "SyntheticBatch",
    "generate",
    "gan_value",
    "gan_step",
]

_CAPACITIES = ("tiny", "small", "medium")


@dataclass(frozen=True)
class GeneratorSpec:
    """Sizing of the conditional generator.

    ``image_shape`` is (height, width, channels). Capacity tiers:
    ``tiny`` is a plain linear map, ``small`` adds one upsample-conv stage,
    ``medium`` two. Spatial dims must divide by 2 (small) or 4 (medium).
    """

    num_classes: int
    image_shape: tuple = (8, 8, 1)
    noise_dim: int = 8
    embed_dim: int = 4
    capacity: str = "small"
    base_channels: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.image_shape) != 3 or any(int(d) < 1 for d in self.image_shape):
            raise ValueError(f"bad image_shape {self.image_shape}")
        if self.noise_dim < 1 or self.embed_dim < 1 or self.base_channels < 1:
            raise ValueError("dims must be positive")
        if self.capacity not in _CAPACITIES:
            raise ValueError(f"capacity must be one of {_CAPACITIES}")
        h, w, _ = self.image_shape
        need = {"tiny": 1, "small": 2, "medium": 4}[self.capacity]
        if h % need or w % need:
            raise ValueError(f"{self.capacity} generator needs image dims "
                             f"divisible by {need}, got {h}x{w}")


class Generator:
    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        h, w, ch = spec.image_shape
        zin = spec.noise_dim + spec.embed_dim
        self.embed = nn.Embedding("gen.embed", spec.num_classes,
                                  spec.embed_dim, std=0.5)
        bc = spec.base_channels
        if spec.capacity == "tiny":
            self.fc = nn.Linear("gen.fc", zin, h * w * ch)
            self.convs = []
            self._lift = (ch, h, w)
        elif spec.capacity == "small":
            self.fc = nn.Linear("gen.fc", zin, bc * (h // 2) * (w // 2))
            self.convs = [nn.Conv2d("gen.conv1", bc, ch, 3, bias=True)]
            self._lift = (bc, h // 2, w // 2)
        else:
            self.fc = nn.Linear("gen.fc", zin, 2 * bc * (h // 4) * (w // 4))
            self.convs = [nn.Conv2d("gen.conv1", 2 * bc, bc, 3, bias=True),
                          nn.Conv2d("gen.conv2", bc, ch, 3, bias=True)]
            self._lift = (2 * bc, h // 4, w // 4)

    def _layers(self):
        return [self.embed, self.fc] + self.convs

    def param_shapes(self) -> dict:
        return nn.collect_shapes(self._layers())

    def init_weights(self, rng: np.random.Generator) -> ad.WeightSet:
        return ad.WeightSet.from_arrays(nn.init_weight_arrays(self._layers(), rng))

    def forward(self, ws: ad.WeightSet, labels, noise) -> ad.Tensor:
        """Images [B, ch, H, W] in (-1, 1) for integer labels and noise
        [B, noise_dim]. Pure per-example map: no op mixes examples."""
        labels = np.asarray(labels, dtype=np.int64)
        noise = ad.astensor(noise)
        if noise.shape != (labels.size, self.spec.noise_dim):
            raise ad.ShapeError(f"noise shape {noise.shape} does not match "
                                f"{labels.size} labels x {self.spec.noise_dim}")
        e = self.embed(ws, labels)
        z = ad.concat([noise, e], axis=1)
        x = self.fc(ws, z)
        capacity = self.spec.capacity
        if capacity == "tiny":
            return ad.tanh(ad.reshape(x, (labels.size,) + self._lift))
        x = ad.relu(x)
        x = ad.reshape(x, (labels.size,) + self._lift)
        x = ad.upsample2x(x)
        x = self.convs[0](ws, x)
        if capacity == "medium":
            x = ad.relu(x)
            x = ad.upsample2x(x)
            x = self.convs[1](ws, x)
        return ad.tanh(x)


@dataclass(frozen=True)
class SyntheticBatch:
    """Detached generated images plus the noise that produced them.

    Keeping the noise around lets any later computation rebuild the same
    images differentiably through the generator.
    """

    images: np.ndarray  # [N, H, W, C], channels-last like real data
    labels: np.ndarray
    noise: np.ndarray

    def class_slice(self, c: int) -> tuple:
        idx = np.flatnonzero(self.labels == c)
        return self.images[idx], self.noise[idx]


def generate(gen: Generator, ws: ad.WeightSet, labels,
             noise: np.ndarray = None,
             rng: np.random.Generator = None) -> SyntheticBatch:
    """Sample images for the given labels. Draws noise from ``rng`` unless
    provided explicitly."""
    labels = np.asarray(labels, dtype=np.int64)
    if noise is None:
        if rng is None:
            raise ValueError("need either explicit noise or an rng")
        noise = rng.standard_normal((labels.size, gen.spec.noise_dim))
    out = gen.forward(ws, labels, ad.constant(noise))
    images = np.ascontiguousarray(out.data.transpose(0, 2, 3, 1))
    return SyntheticBatch(images=images, labels=labels.copy(),
                          noise=np.asarray(noise, dtype=np.float64))


class Discriminator:
    """Shared-trunk conditional critic.

    The label is embedded as a full image plane and concatenated onto the
    input channels; the trunk is a relaxed search network driven by the
    same architecture logits as the classifier, with a one-unit head.
    """

    def __init__(self, spec: SupernetSpec):
        h, w, ch = spec.in_shape
        self.spec = spec
        self.plane = nn.Embedding("disc.plane", spec.num_classes, h * w,
                                  std=0.5)
        self.trunk = Supernet(spec, in_channels=ch + 1, head_dim=1)

    def param_shapes(self) -> dict:
        return {**self.plane.shapes(), **self.trunk.param_shapes()}

    def init_weights(self, rng: np.random.Generator) -> ad.WeightSet:
        arrays = self.plane.init(rng)
        arrays.update(nn.init_weight_arrays(self.trunk._layers(), rng))
        return ad.WeightSet.from_arrays(arrays)

    def forward(self, ws: ad.WeightSet, arch: ArchParams, images,
                labels) -> ad.Tensor:
        """Realness logits [B] for images [B, ch, H, W] (Tensor or array)."""
        images = ad.astensor(images)
        b = images.shape[0]
        h, w, _ = self.spec.in_shape
        plane = ad.reshape(self.plane(ws, labels), (b, 1, h, w))
        x = ad.concat([images, plane], axis=1)
        return ad.reshape(self.trunk.forward(ws, arch, x), (b,))


def gan_value(gen: Generator, disc: Discriminator, arch: ArchParams,
              gws: ad.WeightSet, hws: ad.WeightSet,
              real_images: np.ndarray, real_labels: np.ndarray,
              noise: np.ndarray) -> ad.Tensor:
    """The minimax value V(G, H) on one batch.

    ``real_images`` are channels-last arrays; fakes are generated from
    ``noise`` with the same labels, keeping the class mix identical on
    both sides.
    """
    real_t = ad.constant(nchw(real_images))
    fake_t = gen.forward(gws, real_labels, ad.constant(noise))
    d_real = disc.forward(hws, arch, real_t, real_labels)
    d_fake = disc.forward(hws, arch, fake_t, real_labels)
    ones = np.ones(d_real.shape[0])
    zeros = np.zeros(d_fake.shape[0])
    return ad.neg(ad.bce_with_logits(d_real, ones)
                  + ad.bce_with_logits(d_fake, zeros))


def gan_step(gen: Generator, disc: Discriminator, arch: ArchParams,
             gws: ad.WeightSet, hws: ad.WeightSet,
             real_images: np.ndarray, real_labels: np.ndarray,
             noise: np.ndarray, xi_g: float, xi_h: float,
             opt_g=None, opt_h=None) -> dict:
    """One simultaneous update of both players from a single value graph.

    Without optimizers this is the plain coupled rule
    ``G -= xi_g * dV/dG`` and ``H += xi_h * dV/dH``; with optimizers the
    same gradients feed them instead (the critic's must be constructed
    with ``maximize=True``).
    """
    v = gan_value(gen, disc, arch, gws, hws, real_images, real_labels, noise)
    grad_g = ad.gradients(v, gws)
    grad_h = ad.gradients(v, hws)
    if opt_g is None:
        gws.add_(grad_g, -float(xi_g))
    else:
        opt_g.step(gws, grad_g, float(xi_g))
    if opt_h is None:
        hws.add_(grad_h, +float(xi_h))
    else:
        opt_h.step(hws, grad_h, float(xi_h))
    value = v.item()
    return {"value": value, "loss_g": value, "loss_h": -value,
            "grad_norm_g": grad_g.norm(), "grad_norm_h": grad_h.norm()}
