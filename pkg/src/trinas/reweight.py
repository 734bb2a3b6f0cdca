"""Per-class validation losses and the class-weighted retraining objective.

The second training stage weights synthetic examples of each class by how
badly the first-stage model does on that class's validation slice: classes
the model gets wrong pull more gradient through their synthetic examples.

Conventions worth calling out:

- The per-class validation losses l_c come from one shared forward over a
  stratified batch, reduced per class as the mean over that class's rows.
  Forwarding each class alone would let batch normalization center away
  exactly the per-channel statistics that identify the class (a class-pure
  batch has the class pattern as its mean), which drives every l_c toward
  or past chance level no matter how good the model is.
- The synthetic examples form one batch, by default labeled to mirror the
  real training batch (one synthetic example per real one, same label);
  the per-class sums s_c are partial sums of that single batch's per-row
  losses. A fixed count per class is available instead via
  ``synth_per_class``.
- s_c sums (does not average) over the class's synthetic rows, so the
  weighting knob trades off against real-data strength per example, not
  per class-average.

With the knob at exactly zero the weighted objective *is* the plain real
loss: the synthetic closure is never invoked, so the training trajectory
matches an unweighted run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import nchw

__all__ = [
    "WeightingConfig",
    "ClassLossVector",
    "class_losses",
    "supernet_class_losses",
    "weighted_objective",
]


@dataclass(frozen=True)
class WeightingConfig:
    """How the second stage mixes real and synthetic data.

    ``lam`` scales the synthetic term. ``synth_per_class`` of None (the
    default) labels the synthetic batch exactly like the real training
    batch; a positive integer generates that many examples of every class
    instead. ``synthetic_only`` drops the real-data term, training the
    second stage purely on weighted synthetic data. ``normalize`` rescales
    the class losses to mean one before they weight the synthetic term
    (an experiment knob; raw losses are the faithful default), which pins
    the total synthetic weight at ``lam * C`` regardless of how well or
    badly the first-stage model is doing.
    """

    lam: float = 1.0
    synth_per_class: int = None
    synthetic_only: bool = False
    normalize: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.synth_per_class is not None and self.synth_per_class < 1:
            raise ValueError("synth_per_class must be positive when set")
        if self.synthetic_only and self.lam == 0.0:
            raise ValueError("synthetic_only with lam=0 trains on nothing")

    def synth_labels_for(self, train_labels: np.ndarray,
                         num_classes: int) -> np.ndarray:
        """Labels of the synthetic batch for one iteration."""
        if self.synth_per_class is None:
            return train_labels.copy()
        return np.repeat(np.arange(num_classes), self.synth_per_class)

    def weights(self, lc) -> np.ndarray:
        """Per-class coefficients of the synthetic terms, as floats."""
        lc = np.asarray(lc, dtype=np.float64)
        if not self.normalize:
            return self.lam * lc
        total = lc.sum()
        if total == 0.0:
            return np.zeros_like(lc)
        return self.lam * lc.size * lc / total

    def weight_jacobian(self, lc) -> np.ndarray:
        """d weights / d lc, shape [C, C] (row: weight, column: loss).

        The raw form is a scaled identity. Normalization couples the
        classes: raising one class's loss lowers every other weight, and
        the hypergradient terms that ride on d/d l_c must see that.
        """
        lc = np.asarray(lc, dtype=np.float64)
        n = lc.size
        if not self.normalize:
            return self.lam * np.eye(n)
        total = lc.sum()
        if total == 0.0:
            return np.zeros((n, n))
        return self.lam * n * (np.eye(n) * total - lc[:, None]) / total ** 2


@dataclass(frozen=True)
class ClassLossVector:
    """Validation loss per class, the weights of the synthetic term."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("need a 1-d vector with one entry per class")
        if not np.all(np.isfinite(v)):
            raise ValueError("class losses must be finite")
        if np.any(v < 0):
            raise ValueError("cross-entropy losses cannot be negative")
        object.__setattr__(self, "values", v)

    @property
    def num_classes(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, c: int) -> float:
        return float(self.values[c])

    def hardest(self) -> int:
        return int(self.values.argmax())


def class_losses(class_terms_fn) -> ClassLossVector:
    """Evaluate the per-class loss closure and detach the values.

    ``class_terms_fn()`` returns one scalar tensor per class, all hanging
    off a shared forward graph; only the detached values are kept here.
    The same closure is what the gradient machinery differentiates later,
    so both views come from one definition.
    """
    vals = np.array([float(t.item()) for t in class_terms_fn()])
    return ClassLossVector(vals)


def supernet_class_losses(net, ws, arch, images: np.ndarray,
                          labels: np.ndarray) -> ClassLossVector:
    """Mean cross entropy per class for a relaxed network on one batch.

    The whole batch is forwarded once (see module notes on batch norm) and
    reduced per class, so the batch must contain at least one example of
    every class; use a stratified stream to guarantee that.
    """
    num_classes = net.head_dim
    counts = np.bincount(labels, minlength=num_classes)
    if counts.min() == 0:
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {missing} missing from the batch; "
                         "draw validation batches stratified")

    def terms():
        logits = net.forward(ws, arch, ad.constant(nchw(images)))
        per_row = ad.cross_entropy(logits, labels, reduction="none")
        return [ad.tsum(per_row * ad.constant(
                    (labels == c).astype(np.float64))) / counts[c]
                for c in range(num_classes)]

    return class_losses(terms)


def weighted_objective(real_loss_fn, synth_class_terms_fn, lc,
                       cfg: WeightingConfig) -> ad.Tensor:
    """Build the stage-two objective as a live graph.

        real + sum_c weight_c * s_c        (standard)
        sum_c weight_c * s_c               (synthetic_only)

    with ``weight_c = lam * lc[c]`` (or its mean-one rescaling under
    ``cfg.normalize``). ``real_loss_fn`` is a nullary closure returning
    the real-data loss; ``synth_class_terms_fn`` is a nullary closure
    returning one scalar tensor per class (the per-class synthetic loss
    sums s_c, usually partial sums of a single shared forward pass).
    ``lc`` is anything indexable with one weight per class. Closures are
    invoked only for terms that actually appear, so ``lam == 0``
    reproduces the plain real loss graph exactly.
    """
    if cfg.lam == 0.0:
        return real_loss_fn()

    terms = synth_class_terms_fn()
    if len(terms) != len(lc):
        raise ValueError(f"{len(terms)} synthetic class terms "
                         f"for {len(lc)} classes")
    wvec = cfg.weights(np.asarray([lc[c] for c in range(len(terms))]))
    synth = None
    for c, t in enumerate(terms):
        term = ad.scale(t, wvec[c])
        synth = term if synth is None else synth + term
    if cfg.synthetic_only:
        return synth
    return real_loss_fn() + synth
