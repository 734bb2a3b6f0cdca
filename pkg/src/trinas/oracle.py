"""Independent verification of the architecture hypergradient.

Two oracles, deliberately sharing no code with the engine's chain rule:

- Random quadratic three-stage instances. Every loss is an explicit
  quadratic form, so the one-step unroll and its architecture gradient
  have closed forms assembled here by plain matrix algebra
  (``analytic_quadratic_hypergrad``). The same instance also implements
  the closure protocol, so the engine can be run on it and compared term
  by term.

- Brute force: treat the whole unroll (stage steps, then the validation
  loss) as a black-box scalar function of the architecture and
  differentiate it by central finite differences, one coordinate at a
  time (``unrolled_hypergrad_fd``). Works on any problem object, neural
  ones included.

Plus ``fd_gradients``, the coordinate-wise gradient checker the op-level
tests use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, WeightSet, gradients
from .reweight import WeightingConfig

__all__ = [
    "fd_gradients",
    "QuadraticCoeffs",
    "QuadraticTrilevelProblem",
    "random_quadratic_problem",
    "analytic_quadratic_hypergrad",
    "unrolled_value",
    "unrolled_hypergrad_fd",
]


def fd_gradients(loss_fn, params: WeightSet, h: float = 1e-6) -> GradientMap:
    """Central-difference gradient of a scalar closure, coordinate-wise."""
    out = {}
    for name, t in params.items():
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().item())
            flat[i] = orig - h
            lm = float(loss_fn().item())
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        out[name] = g.reshape(t.data.shape)
    return GradientMap(out)


# -- quadratic instances -------------------------------------------------------


def _spd(rng: np.random.Generator, n: int, lo: float = 0.5,
         hi: float = 2.0) -> np.ndarray:
    """Symmetric matrix with eigenvalues uniform in [lo, hi]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = rng.uniform(lo, hi, n)
    return (q * eig) @ q.T


def _cross(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    return rng.standard_normal((n, m)) / np.sqrt(max(n, m))


@dataclass
class QuadraticCoeffs:
    """Coefficients of one random instance. Names follow the loss layout:

    stage 1      L_tr(W1, A)   = W1'P W1/2 + W1'Q A + p'W1 + q'A
    class c      l_c(W1, A)    = W1'Pc W1/2 + W1'Qc A + pc'W1 + qc'A + rc
    synthetic c  s_c(W2, G, A) = W2'Sc W2/2 + W2'Tc G + W2'Uc A + tc'W2
    adversarial  V(G, H, A)    = G'K G/2 + G'M A + G'N H + g'G
                                 - H'J H/2 + h'H
    stage 2 real L_real(W2, A) = W2'Rr W2/2 + W2'Qr A + pr'W2
    outer        L_val(W2, A)  = W2'V W2/2 + W2'Y A + A'Z A/2 + v'W2 + z'A
    """

    P: np.ndarray
    Q: np.ndarray
    p: np.ndarray
    q: np.ndarray
    Pc: list
    Qc: list
    pc: list
    qc: list
    rc: np.ndarray
    Sc: list
    Tc: list
    Uc: list
    tc: list
    K: np.ndarray
    M: np.ndarray
    N: np.ndarray
    g: np.ndarray
    J: np.ndarray
    h: np.ndarray
    Rr: np.ndarray
    Qr: np.ndarray
    pr: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    v: np.ndarray
    z: np.ndarray


class QuadraticTrilevelProblem:
    """A quadratic instance exposing the hypergradient closure protocol.

    Parameter sets each hold one vector named ``w``. The loss closures
    build the quadratic forms through the autodiff graph so the engine can
    differentiate them like any network.
    """

    def __init__(self, coeffs: QuadraticCoeffs, w1_0, w2_0, g_0, h_0, a_0,
                 weighting: WeightingConfig):
        self.c = coeffs
        self.w1 = WeightSet.from_arrays({"w": w1_0})
        self.w2 = WeightSet.from_arrays({"w": w2_0})
        self.g = WeightSet.from_arrays({"w": g_0})
        self.h = WeightSet.from_arrays({"w": h_0})
        self._arch = WeightSet.from_arrays({"w": a_0})
        self.weighting = weighting
        self.num_classes = len(coeffs.Pc)

    @property
    def arch_ws(self) -> WeightSet:
        return self._arch

    # quadratic-form helpers on 1-d parameter tensors
    @staticmethod
    def _quad(x, mat):
        xr = ad.reshape(x, (1, x.shape[0]))
        return ad.scale(ad.tsum(ad.matmul(xr, ad.constant(mat)) * xr), 0.5)

    @staticmethod
    def _bilin(x, mat, y):
        xr = ad.reshape(x, (1, x.shape[0]))
        yr = ad.reshape(y, (1, y.shape[0]))
        return ad.tsum(ad.matmul(xr, ad.constant(mat)) * yr)

    @staticmethod
    def _lin(x, vec):
        return ad.tsum(x * ad.constant(vec))

    def train_loss(self):
        c, w1, a = self.c, self.w1["w"], self._arch["w"]
        return (self._quad(w1, c.P) + self._bilin(w1, c.Q, a)
                + self._lin(w1, c.p) + self._lin(a, c.q))

    def class_val_losses(self):
        c, w1, a = self.c, self.w1["w"], self._arch["w"]
        return [self._quad(w1, c.Pc[i]) + self._bilin(w1, c.Qc[i], a)
                + self._lin(w1, c.pc[i]) + self._lin(a, c.qc[i])
                + ad.constant(c.rc[i])
                for i in range(self.num_classes)]

    def synth_class_terms(self):
        c, w2, g, a = self.c, self.w2["w"], self.g["w"], self._arch["w"]
        return [self._quad(w2, c.Sc[i]) + self._bilin(w2, c.Tc[i], g)
                + self._bilin(w2, c.Uc[i], a) + self._lin(w2, c.tc[i])
                for i in range(self.num_classes)]

    def gan_loss(self):
        c, g, h, a = self.c, self.g["w"], self.h["w"], self._arch["w"]
        return (self._quad(g, c.K) + self._bilin(g, c.M, a)
                + self._bilin(g, c.N, h) + self._lin(g, c.g)
                - self._quad(h, c.J) + self._lin(h, c.h))

    def real_loss_w2(self):
        c, w2, a = self.c, self.w2["w"], self._arch["w"]
        return (self._quad(w2, c.Rr) + self._bilin(w2, c.Qr, a)
                + self._lin(w2, c.pr))

    def val_loss(self):
        c, w2, a = self.c, self.w2["w"], self._arch["w"]
        return (self._quad(w2, c.V) + self._bilin(w2, c.Y, a)
                + self._quad(a, c.Z) + self._lin(w2, c.v) + self._lin(a, c.z))


def random_quadratic_problem(rng: np.random.Generator, n1: int = 6,
                             ng: int = 5, nh: int = 4, na: int = 7,
                             num_classes: int = 3, lam: float = 1.0,
                             synthetic_only: bool = False,
                             normalize: bool = False
                             ) -> QuadraticTrilevelProblem:
    """Draw a well-conditioned instance (all curvatures in [0.5, 2])."""
    cls = range(num_classes)
    coeffs = QuadraticCoeffs(
        P=_spd(rng, n1), Q=_cross(rng, n1, na),
        p=rng.standard_normal(n1), q=rng.standard_normal(na),
        Pc=[_spd(rng, n1) for _ in cls],
        Qc=[_cross(rng, n1, na) for _ in cls],
        pc=[rng.standard_normal(n1) for _ in cls],
        qc=[rng.standard_normal(na) for _ in cls],
        rc=rng.uniform(0.5, 1.5, num_classes),
        Sc=[_spd(rng, n1) for _ in cls],
        Tc=[_cross(rng, n1, ng) for _ in cls],
        Uc=[_cross(rng, n1, na) for _ in cls],
        tc=[rng.standard_normal(n1) for _ in cls],
        K=_spd(rng, ng), M=_cross(rng, ng, na), N=_cross(rng, ng, nh),
        g=rng.standard_normal(ng),
        J=_spd(rng, nh), h=rng.standard_normal(nh),
        Rr=_spd(rng, n1), Qr=_cross(rng, n1, na), pr=rng.standard_normal(n1),
        V=_spd(rng, n1), Y=_cross(rng, n1, na), Z=_spd(rng, na),
        v=rng.standard_normal(n1), z=rng.standard_normal(na),
    )
    weighting = WeightingConfig(lam=lam, synthetic_only=synthetic_only,
                                normalize=normalize) \
        if lam != 0.0 else WeightingConfig(lam=0.0)
    return QuadraticTrilevelProblem(
        coeffs,
        w1_0=rng.standard_normal(n1), w2_0=rng.standard_normal(n1),
        g_0=rng.standard_normal(ng), h_0=rng.standard_normal(nh),
        a_0=rng.standard_normal(na), weighting=weighting)


def analytic_quadratic_hypergrad(problem: QuadraticTrilevelProblem,
                                 xi1: float, xi2: float, xi_g: float
                                 ) -> tuple:
    """Closed-form hypergradient of a quadratic instance.

    Pure matrix algebra on the coefficient arrays; no autodiff, no finite
    differences. Returns (total, breakdown-by-term) as plain vectors.
    Covers the raw weighting form only; normalized weights change the
    class-loss sensitivities, and those runs are checked against the
    unrolled finite-difference oracle instead.
    """
    if problem.weighting.normalize:
        raise ValueError("analytic oracle covers raw (unnormalized) "
                         "class weights only")
    c = problem.c
    lam = float(problem.weighting.lam)
    synthetic_only = problem.weighting.synthetic_only
    w1 = problem.w1["w"].data.copy()
    w2 = problem.w2["w"].data.copy()
    g = problem.g["w"].data.copy()
    h = problem.h["w"].data.copy()
    a = problem.arch_ws["w"].data.copy()
    ncls = problem.num_classes

    # stage unrolls
    w1p = w1 - xi1 * (c.P @ w1 + c.Q @ a + c.p)
    gp = g - xi_g * (c.K @ g + c.M @ a + c.N @ h + c.g)
    lc = np.array([0.5 * w1p @ c.Pc[i] @ w1p + w1p @ c.Qc[i] @ a
                   + c.pc[i] @ w1p + c.qc[i] @ a + c.rc[i]
                   for i in range(ncls)])

    grad_j = np.zeros_like(w2)
    if not synthetic_only:
        grad_j += c.Rr @ w2 + c.Qr @ a + c.pr
    if lam != 0.0:
        for i in range(ncls):
            grad_j += lam * lc[i] * (c.Sc[i] @ w2 + c.Tc[i] @ gp
                                     + c.Uc[i] @ a + c.tc[i])
    w2p = w2 - xi2 * grad_j

    v0 = c.V @ w2p + c.Y @ a + c.v
    direct = c.Y.T @ w2p + c.Z @ a + c.z

    w2_path = np.zeros_like(a)
    w1_path = np.zeros_like(a)
    gen_path = np.zeros_like(a)
    if xi2 != 0.0:
        mixed = np.zeros_like(a)
        if not synthetic_only:
            mixed += c.Qr.T @ v0
        if lam != 0.0:
            u = np.zeros_like(w1)
            w_vec = np.zeros_like(g)
            for i in range(ncls):
                a_i = (c.Sc[i] @ w2 + c.Tc[i] @ gp + c.Uc[i] @ a
                       + c.tc[i]) @ v0
                d_a = c.Qc[i].T @ w1p + c.qc[i]
                d_w1 = c.Pc[i] @ w1p + c.Qc[i] @ a + c.pc[i]
                mixed += lam * (lc[i] * (c.Uc[i].T @ v0) + a_i * d_a)
                u += lam * a_i * d_w1
                w_vec += lam * lc[i] * (c.Tc[i].T @ v0)
            w1_path = xi1 * xi2 * (c.Q.T @ u)
            gen_path = xi2 * xi_g * (c.M.T @ w_vec)
        w2_path = -xi2 * mixed

    total = direct + w2_path + w1_path + gen_path
    return total, {"direct": direct, "w2_path": w2_path,
                   "w1_path": w1_path, "gen_path": gen_path}


# -- brute force -----------------------------------------------------------------


def unrolled_value(problem, xi1: float, xi2: float, xi_g: float) -> float:
    """Run the one-step unroll with plain gradient steps and return the
    outer validation loss. All parameters are restored afterwards."""
    from .reweight import weighted_objective  # local to avoid cycle noise

    w1, w2, g = problem.w1, problem.w2, problem.g
    snap1, snap2, snapg = w1.snapshot(), w2.snapshot(), g.snapshot()
    lam = float(problem.weighting.lam)
    try:
        if xi1 != 0.0:
            w1.add_(gradients(problem.train_loss(), w1), -xi1)
        if xi_g != 0.0:
            g.add_(gradients(problem.gan_loss(), g), -xi_g)
        lc = np.zeros(problem.num_classes)
        if lam != 0.0:
            lc = np.array([t.item() for t in problem.class_val_losses()])
        if xi2 != 0.0:
            obj = weighted_objective(problem.real_loss_w2,
                                     problem.synth_class_terms, lc,
                                     problem.weighting)
            w2.add_(gradients(obj, w2), -xi2)
        return float(problem.val_loss().item())
    finally:
        w1.load(snap1)
        w2.load(snap2)
        g.load(snapg)


def unrolled_hypergrad_fd(problem, xi1: float, xi2: float, xi_g: float,
                          h: float = 1e-5) -> GradientMap:
    """Central-difference gradient of the unrolled validation loss with
    respect to the architecture, one coordinate at a time."""
    arch = problem.arch_ws
    out = {}
    for name, t in arch.items():
        flat = t.data.ravel()
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = unrolled_value(problem, xi1, xi2, xi_g)
            flat[i] = orig - h
            fm = unrolled_value(problem, xi1, xi2, xi_g)
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
        out[name] = grad.reshape(t.data.shape)
    return GradientMap(out)
