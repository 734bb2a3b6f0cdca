"""Labeled image sets, splits, streams and the synthetic benchmark.

Images live in channels-last [N, H, W, C] float arrays scaled to [-1, 1];
``nchw`` converts to the channels-first layout the network primitives use.

The synthetic benchmark draws each class as a fixed orthonormal cosine
pattern plus white noise. Patterns differ in orientation and frequency, so
convolutions can pick them up and the signal survives global average
pooling; class difficulty is a single separation knob with a closed-form
error bound to sanity-check trained accuracy against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabeledImageSet",
    "Split",
    "stratified_split",
    "cig_view",
    "synth_blobs",
    "bayes_error_bound",
    "save_lfmc",
    "load_lfmc",
    "LfmcFormatError",
    "BatchStream",
    "StratifiedStream",
    "nchw",
]


def nchw(images: np.ndarray) -> np.ndarray:
    """[N, H, W, C] -> [N, C, H, W] as float64."""
    if images.ndim != 4:
        raise ValueError(f"expected 4-d images, got shape {images.shape}")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float64)


@dataclass(frozen=True)
class LabeledImageSet:
    """Images [N, H, W, C] in [-1, 1] with integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        img, lab = self.images, self.labels
        if img.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got {img.shape}")
        if lab.shape != (img.shape[0],):
            raise ValueError(f"labels shape {lab.shape} does not match "
                             f"{img.shape[0]} images")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be integers")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if not np.all(np.isfinite(img)):
            raise ValueError("images contain non-finite values")
        if img.size and (img.min() < -1.0 or img.max() > 1.0):
            raise ValueError("images must be scaled to [-1, 1]")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx],
                               self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Split:
    train: LabeledImageSet
    val: LabeledImageSet


def stratified_split(ds: LabeledImageSet, fraction: float = 0.5,
                     rng: np.random.Generator = None) -> Split:
    """Per-class random split; ``fraction`` goes to train, odd ones too.

    Each class must have at least two examples so both halves see it.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    if rng is None:
        rng = np.random.default_rng(0)
    tr_idx, va_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has {idx.size} examples, "
                             "cannot split")
        idx = rng.permutation(idx)
        k = int(np.ceil(fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        tr_idx.append(idx[:k])
        va_idx.append(idx[k:])
    tr = np.sort(np.concatenate(tr_idx))
    va = np.sort(np.concatenate(va_idx))
    return Split(train=ds.subset(tr), val=ds.subset(va))


def cig_view(split: Split) -> Split:
    """The generator's view of the data: train and val swap roles.

    No copies are made; both views alias the original arrays. The swap
    keeps the generator from fitting the exact examples the classifier
    trains on while using no extra data.
    """
    return Split(train=split.val, val=split.train)


# -- synthetic benchmark ------------------------------------------------------


def _cosine_template(size: int, u: int, v: int) -> np.ndarray:
    """Orthonormal 2-d cosine basis function (u, v) on a size x size grid."""
    n = size
    x = np.arange(n)
    au = np.sqrt(1.0 / n) if u == 0 else np.sqrt(2.0 / n)
    av = np.sqrt(1.0 / n) if v == 0 else np.sqrt(2.0 / n)
    cu = np.cos(np.pi * (2 * x + 1) * u / (2 * n)) * au
    cv = np.cos(np.pi * (2 * x + 1) * v / (2 * n)) * av
    return np.outer(cu, cv)


def _template_order(size: int):
    """(u, v) pairs by increasing frequency, skipping the flat DC pattern."""
    pairs = [(u, v) for u in range(size) for v in range(size) if (u, v) != (0, 0)]
    pairs.sort(key=lambda p: (p[0] + p[1], p[0]))
    return pairs


def class_templates(num_classes: int, size: int) -> np.ndarray:
    """The per-class mean patterns, [C, size, size], mutually orthonormal."""
    pairs = _template_order(size)
    if num_classes > len(pairs):
        raise ValueError(f"{num_classes} classes need a grid larger than "
                         f"{size}x{size}")
    return np.stack([_cosine_template(size, u, v)
                     for u, v in pairs[:num_classes]])


def bayes_error_bound(num_classes: int, separation: float,
                      noise_std: float = 1.0) -> float:
    """Union bound on the optimal error rate of the synthetic benchmark.

    Class means sit ``separation * sqrt(2)`` apart (orthonormal patterns
    scaled by the separation), so each pairwise error is
    Phi(-separation / (noise_std * sqrt(2))) and the union over the other
    C - 1 classes bounds the total. Scaling applied after generation (the
    [-1, 1] normalization) cancels out of the bound.
    """
    from math import erf, sqrt
    z = separation / (noise_std * sqrt(2.0))
    phi = 0.5 * (1.0 - erf(z / sqrt(2.0)))
    return min(1.0, (num_classes - 1) * phi)


def synth_blobs(num_classes: int, per_class: int, size: int = 8,
                separation: float = 3.0, noise_std: float = 1.0,
                channels: int = 1,
                rng: np.random.Generator = None) -> LabeledImageSet:
    """Generate the pattern-plus-noise benchmark.

    Each image is ``separation * template[class] + noise`` with iid
    Gaussian pixel noise, replicated over channels, then scaled globally by
    the max absolute value into [-1, 1] and rounded through float32 so the
    on-disk container reproduces it bit for bit.
    """
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if rng is None:
        rng = np.random.default_rng(0)
    templates = class_templates(num_classes, size)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size
    images = separation * templates[labels][:, :, :, None]
    images = np.broadcast_to(images, (n, size, size, channels)).copy()
    images += noise_std * rng.standard_normal(images.shape)
    images /= np.abs(images).max()
    images = images.astype(np.float32).astype(np.float64)
    order = rng.permutation(n)
    return LabeledImageSet(images[order], labels[order].astype(np.int64),
                           num_classes)


# -- binary container ----------------------------------------------------------


_LFMC_MAGIC = b"LFMC"
_LFMC_VERSION = 1
_HEADER = struct.Struct("<4sHHIHHB")
_LABEL = struct.Struct("<H")


class LfmcFormatError(ValueError):
    """The byte stream is not a valid container."""


def save_lfmc(path, ds: LabeledImageSet) -> None:
    """Write the binary container: fixed header, then one record per image
    (u16 label followed by float32 little-endian pixels, channels-last)."""
    n, h, w, c = ds.images.shape
    if ds.num_classes > 0xFFFF or n > 0xFFFFFFFF:
        raise ValueError("dataset too large for the container header")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_LFMC_MAGIC, _LFMC_VERSION, ds.num_classes,
                             n, h, w, c))
        for i in range(n):
            f.write(_LABEL.pack(int(ds.labels[i])))
            f.write(np.ascontiguousarray(ds.images[i], dtype="<f4").tobytes())


def load_lfmc(path) -> LabeledImageSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise LfmcFormatError("file shorter than header")
    magic, version, num_classes, n, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != _LFMC_MAGIC:
        raise LfmcFormatError(f"bad magic {magic!r}")
    if version != _LFMC_VERSION:
        raise LfmcFormatError(f"unsupported container version {version}")
    rec = _LABEL.size + h * w * c * 4
    expect = _HEADER.size + n * rec
    if len(blob) != expect:
        raise LfmcFormatError(f"expected {expect} bytes, file has {len(blob)}")
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, h, w, c), dtype=np.float64)
    off = _HEADER.size
    for i in range(n):
        (labels[i],) = _LABEL.unpack_from(blob, off)
        off += _LABEL.size
        pix = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=off)
        images[i] = pix.reshape(h, w, c)
        off += h * w * c * 4
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise LfmcFormatError(f"record {bad[0]} has label {labels[bad[0]]} "
                              f"outside [0, {num_classes})")
    return LabeledImageSet(images, labels, int(num_classes))


# -- batch streams --------------------------------------------------------------


class BatchStream:
    """Deterministic shuffled batches, reshuffling at each epoch boundary.

    Every draw of ``n`` examples consumes the current permutation in order;
    when fewer than ``n`` remain the stream reshuffles and starts a fresh
    pass (no partial batches, no example reuse within a pass).
    """

    def __init__(self, ds: LabeledImageSet, rng: np.random.Generator):
        if ds.n < 1:
            raise ValueError("empty dataset")
        self.ds = ds
        self.rng = rng
        self._order = rng.permutation(ds.n)
        self._pos = 0

    def next(self, n: int) -> tuple:
        if n > self.ds.n:
            raise ValueError(f"batch of {n} from a set of {self.ds.n}")
        if self._pos + n > self._order.size:
            self._order = self.rng.permutation(self.ds.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + n]
        self._pos += n
        return self.ds.images[idx], self.ds.labels[idx]


class StratifiedStream:
    """Batches with exactly n / num_classes examples of every class.

    Used wherever a batch gets partitioned per class downstream, so no
    class ever comes up empty.
    """

    def __init__(self, ds: LabeledImageSet, rng: np.random.Generator):
        self.ds = ds
        self.rng = rng
        self._pools = [np.flatnonzero(ds.labels == c)
                       for c in range(ds.num_classes)]
        for c, pool in enumerate(self._pools):
            if pool.size == 0:
                raise ValueError(f"class {c} absent from dataset")
        self._orders = [rng.permutation(p) for p in self._pools]
        self._pos = [0] * ds.num_classes

    def next(self, n: int) -> tuple:
        ncls = self.ds.num_classes
        if n % ncls != 0:
            raise ValueError(f"batch size {n} not divisible by {ncls} classes")
        per = n // ncls
        picks = []
        for c in range(ncls):
            if per > self._pools[c].size:
                raise ValueError(f"class {c} has {self._pools[c].size} "
                                 f"examples, need {per} per batch")
            if self._pos[c] + per > self._orders[c].size:
                self._orders[c] = self.rng.permutation(self._pools[c])
                self._pos[c] = 0
            picks.append(self._orders[c][self._pos[c]:self._pos[c] + per])
            self._pos[c] += per
        idx = np.concatenate(picks)
        idx = idx[self.rng.permutation(idx.size)]
        return self.ds.images[idx], self.ds.labels[idx]
