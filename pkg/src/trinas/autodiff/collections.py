"""Named collections of parameters and gradients.

A ``WeightSet`` is an ordered mapping from parameter names to leaf tensors.
Optimizers and the outer-gradient machinery update tensors in place through
it, so every closure built over the same WeightSet sees the new values on
its next forward pass.

A ``GradientMap`` is the matching mapping from names to raw arrays, with
just enough vector-space structure (add, scale, dot, norm) to write update
rules without flattening everything into one long vector.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backprop

__all__ = ["WeightSet", "GradientMap", "gradients"]


class WeightSet:
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __init__(self, tensors: dict):
        self._tensors = {}
        for name, t in tensors.items():
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
            self._tensors[str(name)] = t

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = True) -> "WeightSet":
        return cls({name: Tensor(np.array(a, dtype=np.float64, copy=True),
                                 requires_grad=requires_grad)
                    for name, a in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "WeightSet":
        """Deep copy: fresh tensors with copied arrays."""
        return WeightSet.from_arrays({n: t.data for n, t in self.items()})

    def snapshot(self) -> dict:
        """Copies of the current arrays, for exact restore later."""
        return {n: t.data.copy() for n, t in self.items()}

    def load(self, arrays: dict) -> None:
        """Overwrite parameter values in place (shapes must match)."""
        for name, t in self.items():
            a = arrays[name]
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch loading {name!r}: "
                                 f"{a.shape} into {t.data.shape}")
            t.data = np.array(a, dtype=t.data.dtype, copy=True)

    def add_(self, direction: "GradientMap", alpha: float = 1.0) -> None:
        """In-place update ``p += alpha * direction[name]`` for every name."""
        self._require_same_names(direction)
        for name, t in self.items():
            t.data = t.data + alpha * direction[name]

    def to_gradient_map(self) -> "GradientMap":
        return GradientMap({n: t.data.copy() for n, t in self.items()})

    def _require_same_names(self, other) -> None:
        if set(self._tensors) != set(other.names()):
            ours = set(self._tensors)
            theirs = set(other.names())
            raise ValueError(f"name mismatch: only here {sorted(ours - theirs)}, "
                             f"only there {sorted(theirs - ours)}")

    def __repr__(self):
        return f"WeightSet({len(self)} params, {self.num_params} scalars)"


class GradientMap:
    """Ordered name -> ndarray mapping with vector-space helpers."""

    # keep numpy scalars from absorbing us in `np.float64(x) * gm`
    __array_ufunc__ = None

    def __init__(self, arrays: dict):
        self._arrays = {str(n): np.asarray(a, dtype=np.float64) for n, a in arrays.items()}

    @classmethod
    def zeros_like(cls, ws) -> "GradientMap":
        return cls({n: np.zeros_like(t.data) for n, t in ws.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self):
        return iter(self._arrays)

    def names(self) -> list:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "GradientMap":
        return GradientMap({n: a.copy() for n, a in self.items()})

    def _check_names(self, other: "GradientMap") -> None:
        if set(self._arrays) != set(other._arrays):
            raise ValueError("gradient maps cover different parameter names")

    def __add__(self, other: "GradientMap") -> "GradientMap":
        self._check_names(other)
        return GradientMap({n: a + other[n] for n, a in self.items()})

    def __sub__(self, other: "GradientMap") -> "GradientMap":
        self._check_names(other)
        return GradientMap({n: a - other[n] for n, a in self.items()})

    def __mul__(self, alpha) -> "GradientMap":
        alpha = float(alpha)
        return GradientMap({n: a * alpha for n, a in self.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "GradientMap":
        return self * -1.0

    def dot(self, other: "GradientMap") -> float:
        self._check_names(other)
        return float(sum(np.vdot(a, other[n]) for n, a in self.items()))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a) for a in self._arrays.values())))

    def max_abs(self) -> float:
        return float(max((np.abs(a).max() if a.size else 0.0)
                         for a in self._arrays.values()))

    def clipped(self, max_norm: float) -> "GradientMap":
        """Scale down to global L2 norm ``max_norm`` if currently above it."""
        n = self.norm()
        if n <= max_norm or n == 0.0:
            return self
        return self * (max_norm / n)

    def __repr__(self):
        return f"GradientMap({len(self)} entries, norm={self.norm():.4g})"


def gradients(loss: Tensor, params) -> GradientMap:
    """Gradient of a scalar loss with respect to every parameter in ``params``.

    Parameters the loss never touched get exact zeros, so the result always
    covers the same names as the input set. Passing a sequence of WeightSets
    extracts one GradientMap per set from a single backward pass, for graphs
    shared between parameter groups.
    """
    many = not isinstance(params, WeightSet)
    sets = list(params) if many else [params]
    wanted = {id(t) for ws in sets for t in ws.tensors()}
    table = backprop(loss, wanted)
    maps = []
    for ws in sets:
        out = {}
        for name, t in ws.items():
            g = table.get(id(t))
            out[name] = g.copy() if g is not None else np.zeros_like(t.data)
        maps.append(GradientMap(out))
    return maps if many else maps[0]
