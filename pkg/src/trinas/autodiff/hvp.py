"""Hessian-vector products by central finite differences of gradients.

The trick is standard: for a loss L(p) and direction v,

    H v  ~=  [ grad L(p + h v) - grad L(p - h v) ] / (2 h)

with h chosen as eps / ||v|| so the actual perturbation has size eps no
matter how v is scaled. For losses that are quadratic in the perturbed
parameters the central difference is exact up to rounding, which is what
the verification oracles lean on.

``hvp`` also covers mixed second derivatives: perturb one parameter set,
differentiate with respect to another.
"""

from __future__ import annotations

from .collections import GradientMap, WeightSet, gradients

__all__ = ["hvp", "ZeroDirectionError"]


class ZeroDirectionError(ValueError):
    """The direction vector for an HVP has zero norm."""


def hvp(loss_fn, perturb: WeightSet, v: GradientMap, eps: float = 0.01,
        wrt: WeightSet = None) -> GradientMap:
    """Estimate (d/d wrt)(d/d perturb) L . v by central differences.

    ``loss_fn`` is a nullary closure that rebuilds the loss from the
    current values of the parameter tensors. ``perturb`` is displaced by
    +-h v (h = eps/||v||); gradients are taken with respect to ``wrt``
    (defaults to ``perturb`` itself, the ordinary Hessian case). Parameter
    values are restored bit for bit afterwards.
    """
    if set(v.names()) != set(perturb.names()):
        raise ValueError("direction names do not match the perturbed set")
    vnorm = v.norm()
    if vnorm == 0.0:
        raise ZeroDirectionError("cannot form an HVP along a zero direction")
    if wrt is None:
        wrt = perturb
    h = float(eps) / vnorm

    saved = perturb.snapshot()
    try:
        for name, t in perturb.items():
            t.data = saved[name] + h * v[name]
        g_plus = gradients(loss_fn(), wrt)
        for name, t in perturb.items():
            t.data = saved[name] - h * v[name]
        g_minus = gradients(loss_fn(), wrt)
    finally:
        perturb.load(saved)
    return (g_plus - g_minus) * (1.0 / (2.0 * h))
