"""The three-stage training loop and the architecture hypergradient.

Each iteration runs, in order:

1. classifier stage: one momentum-SGD step of W1 on the training batch;
2. adversarial stage: one simultaneous generator/critic update;
3. per-class validation losses of the updated W1;
4. reweighted stage: one step of W2 on real data plus synthetic examples
   weighted by those class losses;
5. architecture update from the hypergradient below.

The architecture gradient treats each stage as a single plain-SGD step
taken from the current parameter values (a one-step unroll):

    W1' = W1 - xi1 * d L_tr / d W1
    G'  = G  - xig * d V / d G
    W2' = W2 - xi2 * d J / d W2,
    J   = L_real(W2, A) + lam * sum_c l_c(W1', A) * s_c(W2, G', A)

and differentiates L_val(W2', A) through every route A takes into W2':

    direct    d L_val / d A at (W2', A)
    w2_path   -xi2 [ d2 J / dA dW2 . v0 + lam * sum_c a_c * d l_c / dA ]
    w1_path   +xi1 xi2 * d2 L_tr / dA dW1 . u
    gen_path  +xi2 xig * d2 V / dA dG . w

with the propagated vectors

    v0  = d L_val / d W2            at (W2', A)
    a_c = < d s_c / d W2 , v0 >     at (W2, G', A)
    u   = lam * sum_c a_c * d l_c / d W1     at (W1', A)
    w   = lam * sum_c l_c * d2 s_c / dG dW2 . v0   at (W2, G', A)

Every second derivative is a central-difference Hessian-vector product.
Terms whose prefactor or propagated vector is exactly zero are skipped
outright, so ``lam = 0`` or a zero rate yields exact zeros for the
corresponding paths rather than finite-difference noise.

A problem object supplies the six loss closures over live WeightSets (see
``NeuralTrilevelProblem``); the quadratic verification instances implement
the same protocol, so one engine serves both.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cig as cig_mod
from . import optim
from .autodiff import GradientMap, gradients, hvp
from .data import BatchStream, Split, StratifiedStream, cig_view, nchw
from .reweight import WeightingConfig, class_losses, weighted_objective
from .search_space import ArchParams, DiscreteCell, Supernet, SupernetSpec, derive_cell

__all__ = [
    "RateSchedule",
    "SearchSetup",
    "IterationDraw",
    "NeuralTrilevelProblem",
    "hypergradient_arch",
    "HYPERGRAD_TERMS",
    "step_w1",
    "step_w2",
    "step_arch",
    "SearchResult",
    "run_search",
    "evaluate_accuracy",
]

HYPERGRAD_TERMS = ("direct", "w2_path", "w1_path", "gen_path")


@dataclass(frozen=True)
class RateSchedule:
    """Learning rates and regularization for the three parameter groups.

    Classifier weights ride a half-cosine from ``w_max`` to ``w_min``;
    architecture and adversarial rates are flat. The same classifier rate
    doubles as the unroll step size inside the hypergradient.
    """

    w_max: float = 0.025
    w_min: float = 0.001
    arch: float = 3e-4
    gan: float = 2e-4
    momentum: float = 0.9
    weight_decay: float = 3e-4
    arch_weight_decay: float = 1e-3
    grad_clip: float = 5.0

    def w_lr(self, step: int, total_steps: int) -> float:
        return optim.cosine_lr(step, total_steps, self.w_max, self.w_min)


@dataclass(frozen=True)
class SearchSetup:
    """Everything a search run needs besides the data split."""

    net_spec: SupernetSpec
    gen_spec: "cig_mod.GeneratorSpec"
    weighting: WeightingConfig
    rates: RateSchedule = field(default_factory=RateSchedule)
    epochs: int = 25
    batch_size: int = 32
    seed: int = 0
    hypergrad_mode: str = "second"
    hvp_eps: float = 0.01
    plain_updates: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.hypergrad_mode not in ("first", "second"):
            raise ValueError("hypergrad_mode must be 'first' or 'second'")
        if self.hvp_eps <= 0:
            raise ValueError("hvp_eps must be positive")
        if self.net_spec.num_classes != self.gen_spec.num_classes:
            raise ValueError("classifier and generator disagree on classes")
        if self.batch_size % self.net_spec.num_classes != 0:
            raise ValueError("batch_size must divide evenly across classes "
                             "(stratified validation batches)")


@dataclass(frozen=True)
class IterationDraw:
    """All randomness one iteration consumes, drawn up front.

    The same bundle feeds the actual stage updates and the hypergradient,
    so the unrolled derivative model sees exactly the batches and noise
    the stages used.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    cig_images: np.ndarray
    cig_labels: np.ndarray
    cig_noise: np.ndarray
    lc_images: np.ndarray
    lc_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    synth_labels: np.ndarray
    synth_noise: np.ndarray


class NeuralTrilevelProblem:
    """Loss closures for one iteration of the neural problem.

    Exposes the protocol the hypergradient engine consumes:

    - WeightSets ``w1``, ``w2``, ``g``, ``h`` and ``arch_ws``
    - ``train_loss()``, ``real_loss_w2()``, ``val_loss()``, ``gan_loss()``
    - ``class_val_losses()`` and ``synth_class_terms()``
    - ``num_classes`` and ``weighting``

    All closures are pure functions of the *current* values in those
    WeightSets and the fixed batch bundle. The per-class validation losses
    share one forward over the stratified batch and reduce per class (see
    the reweight module notes on why class-pure forwards would fight batch
    normalization). The synthetic terms come from one forward of the whole
    synthetic batch regenerated from stored noise through the live
    generator weights (so gradients reach G), with per-class partial sums
    split out by label mask; a class absent from the batch gets an
    exactly-zero term.
    """

    def __init__(self, net: Supernet, gen, disc, arch: ArchParams,
                 w1: ad.WeightSet, w2: ad.WeightSet,
                 g: ad.WeightSet, h: ad.WeightSet,
                 draw: IterationDraw, weighting: WeightingConfig):
        self.net, self.gen, self.disc = net, gen, disc
        self.arch = arch
        self.w1, self.w2, self.g, self.h = w1, w2, g, h
        self.draw = draw
        self.weighting = weighting
        self.num_classes = net.spec.num_classes

        self._train_x = nchw(draw.train_images)
        self._val_x = nchw(draw.val_images)
        self._lc_counts = np.bincount(draw.lc_labels,
                                      minlength=self.num_classes)
        if self._lc_counts.min() == 0:
            missing = np.flatnonzero(self._lc_counts == 0).tolist()
            raise ValueError(f"classes {missing} missing from the per-class "
                             "validation batch; stratify the stream")
        self._lc_x = nchw(draw.lc_images)
        self._lc_masks = [(draw.lc_labels == c).astype(np.float64)
                          for c in range(self.num_classes)]
        self._synth_masks = [(draw.synth_labels == c).astype(np.float64)
                             for c in range(self.num_classes)]

    @property
    def arch_ws(self) -> ad.WeightSet:
        return self.arch.weights

    def train_loss(self) -> ad.Tensor:
        logits = self.net.forward(self.w1, self.arch, ad.constant(self._train_x))
        return ad.cross_entropy(logits, self.draw.train_labels)

    def real_loss_w2(self) -> ad.Tensor:
        logits = self.net.forward(self.w2, self.arch, ad.constant(self._train_x))
        return ad.cross_entropy(logits, self.draw.train_labels)

    def val_loss(self) -> ad.Tensor:
        logits = self.net.forward(self.w2, self.arch, ad.constant(self._val_x))
        return ad.cross_entropy(logits, self.draw.val_labels)

    def class_val_losses(self) -> list:
        logits = self.net.forward(self.w1, self.arch, ad.constant(self._lc_x))
        per_row = ad.cross_entropy(logits, self.draw.lc_labels,
                                   reduction="none")
        return [ad.tsum(per_row * ad.constant(m)) / n
                for m, n in zip(self._lc_masks, self._lc_counts)]

    def synth_class_terms(self) -> list:
        labels = self.draw.synth_labels
        images = self.gen.forward(self.g, labels,
                                  ad.constant(self.draw.synth_noise))
        logits = self.net.forward(self.w2, self.arch, images)
        per_row = ad.cross_entropy(logits, labels, reduction="none")
        return [ad.tsum(per_row * ad.constant(m)) for m in self._synth_masks]

    def gan_loss(self) -> ad.Tensor:
        d = self.draw
        return cig_mod.gan_value(self.gen, self.disc, self.arch, self.g,
                                 self.h, d.cig_images, d.cig_labels,
                                 d.cig_noise)


def hypergradient_arch(problem, xi1: float, xi2: float, xi_g: float,
                       mode: str = "second", eps: float = 0.01,
                       term_scale: dict = None) -> tuple:
    """Architecture gradient of the one-step-unrolled objective.

    Returns ``(total, breakdown)`` where breakdown maps each term name in
    ``HYPERGRAD_TERMS`` to its (unscaled) GradientMap plus diagnostics:
    the class losses ``lc``, couplings ``a``, and the norms of the
    propagated vectors. ``term_scale`` rescales individual terms in the
    total (diagnostics for sensitivity tests); unknown names are errors.

    All weights are restored to their incoming values before returning,
    also on failure.
    """
    if mode not in ("first", "second"):
        raise ValueError("mode must be 'first' or 'second'")
    scales = dict.fromkeys(HYPERGRAD_TERMS, 1.0)
    if term_scale:
        for k, s in term_scale.items():
            if k not in scales:
                raise ValueError(f"unknown hypergradient term {k!r}")
            scales[k] = float(s)

    arch_ws = problem.arch_ws
    w1, w2, g = problem.w1, problem.w2, problem.g
    lam = float(problem.weighting.lam)
    ncls = problem.num_classes
    zero = lambda: GradientMap.zeros_like(arch_ws)
    terms = {name: zero() for name in HYPERGRAD_TERMS}
    info = {"lc": np.zeros(ncls), "a": np.zeros(ncls),
            "v0_norm": 0.0, "u_norm": 0.0, "w_norm": 0.0}

    if mode == "first":
        terms["direct"] = gradients(problem.val_loss(), arch_ws)
        total = sum((scales[n] * t for n, t in terms.items()), zero())
        return total, {**terms, **info}

    snap1, snap2, snapg = w1.snapshot(), w2.snapshot(), g.snapshot()
    try:
        # virtual stage steps (plain SGD, from current values)
        if xi1 != 0.0:
            w1.add_(gradients(problem.train_loss(), w1), -xi1)
        if xi_g != 0.0:
            g.add_(gradients(problem.gan_loss(), g), -xi_g)

        lc = np.zeros(ncls)
        lc_terms = None
        if lam != 0.0:
            # one shared forward; the same graph serves the per-class
            # backward passes below (w1 and arch do not move in between)
            lc_terms = problem.class_val_losses()
            lc = np.array([t.item() for t in lc_terms])
        info["lc"] = lc

        def stage2_objective():
            return weighted_objective(problem.real_loss_w2,
                                      problem.synth_class_terms, lc,
                                      problem.weighting)

        if xi2 != 0.0:
            w2.add_(gradients(stage2_objective(), w2), -xi2)

        val = problem.val_loss()
        terms["direct"] = gradients(val, arch_ws)
        if xi2 != 0.0:
            v0 = gradients(val, w2)
            info["v0_norm"] = v0.norm()
            if info["v0_norm"] > 0.0:
                # J's mixed second derivatives live at the pre-step W2
                w2.load(snap2)
                terms["w2_path"] = -xi2 * hvp(stage2_objective, w2, v0,
                                              eps=eps, wrt=arch_ws)
                if lam != 0.0:
                    a = np.zeros(ncls)
                    s_terms = problem.synth_class_terms()
                    for c in range(ncls):
                        a[c] = v0.dot(gradients(s_terms[c], w2))
                    info["a"] = a
                    # sensitivity of the objective to each class loss;
                    # raw weights give b = lam * a, normalization couples
                    # the classes through the weight jacobian
                    b = problem.weighting.weight_jacobian(lc).T @ a

                    u = GradientMap.zeros_like(w1)
                    lc_arch = zero()
                    for c in range(ncls):
                        if b[c] == 0.0:
                            continue
                        g_arch, g_w1 = gradients(lc_terms[c], (arch_ws, w1))
                        lc_arch = lc_arch + g_arch * b[c]
                        u = u + g_w1 * b[c]
                    terms["w2_path"] = terms["w2_path"] + (-xi2) * lc_arch
                    info["u_norm"] = u.norm()

                    if xi_g != 0.0:
                        wvec = problem.weighting.weights(lc)

                        def synth_total():
                            tot = None
                            for c, t in enumerate(problem.synth_class_terms()):
                                t = ad.scale(t, wvec[c])
                                tot = t if tot is None else tot + t
                            return tot
                        w_vec = hvp(synth_total, w2, v0, eps=eps, wrt=g)
                        info["w_norm"] = w_vec.norm()
                    else:
                        w_vec = None

                    if xi1 != 0.0 and info["u_norm"] > 0.0:
                        w1.load(snap1)
                        terms["w1_path"] = (xi1 * xi2) * hvp(
                            problem.train_loss, w1, u, eps=eps, wrt=arch_ws)

                    if w_vec is not None and info["w_norm"] > 0.0:
                        g.load(snapg)
                        terms["gen_path"] = (xi2 * xi_g) * hvp(
                            problem.gan_loss, g, w_vec, eps=eps, wrt=arch_ws)
    finally:
        w1.load(snap1)
        w2.load(snap2)
        g.load(snapg)

    total = sum((scales[n] * t for n, t in terms.items()), zero())
    return total, {**terms, **info}


# -- stage steps ------------------------------------------------------------


def step_w1(problem: NeuralTrilevelProblem, opt, lr: float) -> float:
    loss = problem.train_loss()
    opt.step(problem.w1, gradients(loss, problem.w1), lr)
    return loss.item()


def step_w2(problem: NeuralTrilevelProblem, lc, opt, lr: float) -> dict:
    """One step of W2 on the weighted objective. Returns the logged parts."""
    parts = {"real": 0.0, "synth": 0.0}
    wcfg = problem.weighting

    def real_fn():
        t = problem.real_loss_w2()
        parts["real"] = t.item()
        return t

    def terms_fn():
        terms = problem.synth_class_terms()
        wvec = wcfg.weights(np.asarray([lc[c] for c in range(len(terms))]))
        parts["synth"] = sum(w * t.item() for w, t in zip(wvec, terms))
        return terms

    loss = weighted_objective(real_fn, terms_fn, lc, wcfg)
    opt.step(problem.w2, gradients(loss, problem.w2), lr)
    parts["total"] = loss.item()
    return parts


def step_arch(arch: ArchParams, hyper: GradientMap, opt, lr: float) -> float:
    opt.step(arch.weights, hyper, lr)
    return hyper.norm()


# -- the search loop ----------------------------------------------------------


@dataclass
class SearchResult:
    arch: ArchParams
    cell: DiscreteCell
    metrics: list
    sup_val_accuracy: float
    iterations: int
    weights: dict
    elapsed_seconds: float


def evaluate_accuracy(forward_fn, ds, batch_size: int = 64) -> float:
    """Top-1 accuracy of ``forward_fn(images_nchw) -> logits Tensor`` over a
    dataset, in fixed-order batches (the final short batch included)."""
    hits = 0
    for start in range(0, ds.n, batch_size):
        imgs = ds.images[start:start + batch_size]
        labels = ds.labels[start:start + batch_size]
        logits = forward_fn(nchw(imgs))
        hits += int((logits.data.argmax(axis=1) == labels).sum())
    return hits / ds.n


def run_search(setup: SearchSetup, split: Split, log=None,
               snapshot_hook=None) -> SearchResult:
    """Run the full three-stage search on a train/validation split.

    Deterministic for a fixed (setup, split): all randomness flows from
    ``setup.seed`` through independent spawned streams for initialization,
    batch order and generator noise.

    ``snapshot_hook(epoch, state)`` is called after each completed epoch
    with copies of every parameter array (keys like ``w1.stem.w``,
    ``arch.normal``); callers use it to keep a last-good checkpoint in
    case a later iteration goes non-finite.
    """
    t_start = time.perf_counter()
    spec = setup.net_spec
    ncls = spec.num_classes
    rng_init, rng_train, rng_cig, rng_lc, rng_val, rng_noise = \
        np.random.default_rng(setup.seed).spawn(6)

    net = Supernet(spec)
    gen = cig_mod.Generator(setup.gen_spec)
    disc = cig_mod.Discriminator(spec)
    arch = ArchParams.init(spec, rng_init)
    w1 = net.init_weights(rng_init)
    w2 = w1.copy()
    g = gen.init_weights(rng_init)
    h = disc.init_weights(rng_init)

    flip = cig_view(split)
    train_stream = BatchStream(split.train, rng_train)
    cig_stream = BatchStream(flip.train, rng_cig)
    lc_stream = StratifiedStream(split.val, rng_lc)
    val_stream = BatchStream(split.val, rng_val)

    rates = setup.rates
    if setup.plain_updates:
        opt_w1 = optim.SGD()
        opt_w2 = optim.SGD()
        opt_arch = optim.SGD()
        opt_g = opt_h = None
    else:
        opt_w1 = optim.SGD(rates.momentum, rates.weight_decay, rates.grad_clip)
        opt_w2 = optim.SGD(rates.momentum, rates.weight_decay, rates.grad_clip)
        opt_arch = optim.Adam(betas=(0.5, 0.999),
                              weight_decay=rates.arch_weight_decay)
        opt_g = optim.Adam(betas=(0.5, 0.999))
        opt_h = optim.Adam(betas=(0.5, 0.999), maximize=True)

    iters_per_epoch = max(1, split.train.n // setup.batch_size)
    total_iters = setup.epochs * iters_per_epoch
    metrics = []

    for t in range(total_iters):
        tr_x, tr_y = train_stream.next(setup.batch_size)
        cg_x, cg_y = cig_stream.next(setup.batch_size)
        lc_x, lc_y = lc_stream.next(setup.batch_size)
        va_x, va_y = val_stream.next(setup.batch_size)
        synth_labels = setup.weighting.synth_labels_for(tr_y, ncls)
        draw = IterationDraw(
            train_images=tr_x, train_labels=tr_y,
            cig_images=cg_x, cig_labels=cg_y,
            cig_noise=rng_noise.standard_normal(
                (cg_y.size, setup.gen_spec.noise_dim)),
            lc_images=lc_x, lc_labels=lc_y,
            val_images=va_x, val_labels=va_y,
            synth_labels=synth_labels,
            synth_noise=rng_noise.standard_normal(
                (synth_labels.size, setup.gen_spec.noise_dim)),
        )
        problem = NeuralTrilevelProblem(net, gen, disc, arch, w1, w2, g, h,
                                        draw, setup.weighting)
        w_lr = rates.w_lr(t, total_iters)

        loss_w1 = step_w1(problem, opt_w1, w_lr)
        gan = cig_mod.gan_step(gen, disc, arch, g, h, cg_x, cg_y,
                               draw.cig_noise, rates.gan, rates.gan,
                               opt_g, opt_h)
        lc = class_losses(problem.class_val_losses)
        w2_parts = step_w2(problem, lc, opt_w2, w_lr)
        hyper, _ = hypergradient_arch(problem, xi1=w_lr, xi2=w_lr,
                                      xi_g=rates.gan,
                                      mode=setup.hypergrad_mode,
                                      eps=setup.hvp_eps)
        grad_norm_a = step_arch(arch, hyper, opt_arch, rates.arch)
        val_loss = problem.val_loss().item()

        row = {
            "iteration": t,
            "epoch": t // iters_per_epoch,
            "loss_w1": loss_w1,
            "loss_gan_g": gan["loss_g"],
            "loss_gan_h": gan["loss_h"],
            "loss_w2_real": w2_parts["real"],
            "loss_w2_synth": w2_parts["synth"],
            "val_loss": val_loss,
            "grad_norm_A": grad_norm_a,
        }
        for c in range(ncls):
            row[f"l_c{c}"] = lc[c]
        metrics.append(row)
        if log is not None and (t % iters_per_epoch == 0 or t == total_iters - 1):
            log(f"iter {t:5d} epoch {row['epoch']:3d} "
                f"w1 {loss_w1:.4f} val {val_loss:.4f} "
                f"gan {gan['loss_g']:+.4f} |dA| {grad_norm_a:.4f}")
        if snapshot_hook is not None and (t + 1) % iters_per_epoch == 0:
            state = {}
            for prefix, ws in (("arch", arch.weights), ("w1", w1),
                               ("w2", w2), ("g", g), ("h", h)):
                for name, vals in ws.snapshot().items():
                    state[f"{prefix}.{name}"] = vals
            snapshot_hook(t // iters_per_epoch, state)

    acc = evaluate_accuracy(
        lambda x: net.forward(w2, arch, ad.constant(x)), split.val,
        batch_size=setup.batch_size)
    return SearchResult(
        arch=arch,
        cell=derive_cell(arch),
        metrics=metrics,
        sup_val_accuracy=acc,
        iterations=total_iters,
        weights={"w1": w1, "w2": w2, "g": g, "h": h},
        elapsed_seconds=time.perf_counter() - t_start,
    )
