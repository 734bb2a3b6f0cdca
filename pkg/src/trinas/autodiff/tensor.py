"""Reverse-mode automatic differentiation on numpy arrays.

The engine is define-by-run: every primitive builds a node that remembers
its parents and a closure computing vector-Jacobian products. Calling
``backward`` on a scalar walks the recorded graph once, in reverse
topological order, accumulating gradients keyed by node identity.

Everything runs in float64 by default. Each primitive checks its output
for NaN/Inf and raises ``NonFiniteError`` immediately, so a blown-up loss
surfaces at the op that produced it instead of three modules later.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "set_default_dtype",
    "get_default_dtype",
    "set_finite_checks",
    "astensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "row",
    "gather_rows",
    "mean",
    "tsum",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "bce_with_logits",
    "weighted_sum",
    "backward",
]


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf checking (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE:
        # summing is one allocation-free reduce; a finite sum proves all
        # entries finite, and any NaN/Inf poisons it, so the elementwise
        # scan only runs to rule out cancellation artifacts
        if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
    return data


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse mode.

    ``_parents`` holds the input tensors and ``_vjp`` is a closure mapping
    the output cotangent to one cotangent per parent (``None`` for parents
    that do not need gradients). Leaf tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"

    # identity hashing is load-bearing: gradient accumulation is keyed by node
    __hash__ = object.__hash__

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        """Return the raw array, cut off from the graph."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def astensor(x) -> Tensor:
    """Wrap ``x`` as a constant tensor if it is not one already."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE), requires_grad=False)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=_DEFAULT_DTYPE, copy=True), requires_grad=True)


def _make(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    out._op = op
    _check(data, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = astensor(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp, "neg")


def scale(a, alpha: float) -> Tensor:
    a = astensor(a)
    alpha = float(alpha)

    def vjp(g):
        return (g * alpha,)

    return _make(a.data * alpha, (a,), vjp, "scale")


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), vjp, "matmul")


# -- shape manipulation -------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a, axes) -> Tensor:
    a = astensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), vjp, "transpose")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes[:-1])

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), vjp, "concat")


def gather_rows(table, indices) -> Tensor:
    """Pick rows of a 2-d tensor: ``out[i] = table[indices[i]]``."""
    table = astensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, (table,), vjp, "gather_rows")


def row(a, i: int) -> Tensor:
    """Row ``i`` of a 2-d tensor as a 1-d tensor."""
    a = astensor(a)
    k = a.shape[1]
    return reshape(gather_rows(a, np.array([int(i)])), (k,))


# -- reductions ----------------------------------------------------------


def _reduce_vjp_shape(shape, axis):
    """The keepdims-shape a reduced gradient must take before broadcast."""
    if axis is None:
        return tuple(1 for _ in shape)
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % len(shape) for a in axis)
    return tuple(1 if i in axis else n for i, n in enumerate(shape))


def tsum(a, axis=None) -> Tensor:
    a = astensor(a)
    data = a.data.sum(axis=axis)
    kshape = _reduce_vjp_shape(a.shape, axis)

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kshape), a.shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = astensor(a)
    data = a.data.mean(axis=axis)
    kshape = _reduce_vjp_shape(a.shape, axis)
    count = a.size if axis is None else a.size // int(np.prod(data.shape or (1,)))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kshape), a.shape) / count,)

    return _make(np.asarray(data), (a,), vjp, "mean")


# -- nonlinearities -------------------------------------------------------


def relu(a) -> Tensor:
    a = astensor(a)
    data = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), vjp, "relu")


def tanh(a) -> Tensor:
    a = astensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), vjp, "tanh")


def sigmoid(a) -> Tensor:
    a = astensor(a)
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp, "sigmoid")


def exp(a) -> Tensor:
    a = astensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = astensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp, "log")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), vjp, "log_softmax")


# -- losses ----------------------------------------------------------------


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy against integer labels.

    ``logits`` is [B, K], ``labels`` a length-B integer array. Reduction is
    one of ``mean``, ``sum`` or ``none`` (per-example vector).
    """
    logits = astensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range for logits")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")

    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per_example = -logp[np.arange(b), labels]
    soft = np.exp(logp)

    onehot = np.zeros_like(logits.data)
    onehot[np.arange(b), labels] = 1.0

    if reduction == "mean":
        data = np.asarray(per_example.mean())

        def vjp(g):
            return ((soft - onehot) * (g / b),)

    elif reduction == "sum":
        data = np.asarray(per_example.sum())

        def vjp(g):
            return ((soft - onehot) * g,)

    else:
        data = per_example

        def vjp(g):
            return ((soft - onehot) * g[:, None],)

    return _make(data, (logits,), vjp, "cross_entropy")


def bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Binary cross entropy on raw logits, computed in the stable form

        max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    logits = astensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    n = logits.size

    if reduction == "mean":
        data = np.asarray(per.mean())

        def vjp(g):
            return ((sig - t) * (g / n),)

    elif reduction == "sum":
        data = np.asarray(per.sum())

        def vjp(g):
            return ((sig - t) * g,)

    else:
        data = per

        def vjp(g):
            return ((sig - t) * g,)

    return _make(data, (logits,), vjp, "bce_with_logits")


def weighted_sum(weights, items) -> Tensor:
    """Sum of ``weights[k] * items[k]`` as one fused primitive.

    ``weights`` is a 1-d tensor. Items must share a common shape; ``None``
    entries stand for all-zero contributions (their weight still gets a
    gradient, which is exactly zero).
    """
    weights = astensor(weights)
    if weights.ndim != 1:
        raise ShapeError(f"weights must be 1-d, got {weights.shape}")
    if len(items) != weights.shape[0]:
        raise ShapeError(f"{len(items)} items for {weights.shape[0]} weights")
    live = [(k, astensor(it)) for k, it in enumerate(items) if it is not None]
    if not live:
        raise ShapeError("weighted_sum needs at least one non-None item")
    shape = live[0][1].shape
    for _, it in live:
        if it.shape != shape:
            raise ShapeError("weighted_sum items disagree on shape")

    w = weights.data
    data = np.zeros(shape, dtype=weights.dtype)
    for k, it in live:
        data += w[k] * it.data

    def vjp(g):
        gw = np.zeros_like(w)
        out = [gw]
        for k, it in live:
            gw[k] = np.sum(g * it.data)
            out.append(g * w[k])
        return tuple(out)

    parents = (weights,) + tuple(it for _, it in live)
    return _make(data, parents, vjp, "weighted_sum")


# -- reverse pass -----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the subgraph that requires gradients."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root: Tensor, wanted: set = None) -> dict:
    """Run reverse mode from a scalar root. Returns {id(tensor): grad}.

    With ``wanted`` (a set of tensor ids), the walk only differentiates
    through nodes that can actually reach one of those tensors, skipping
    unrelated subgraphs entirely; other nodes get no entry.
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    useful = None
    if wanted is not None:
        useful = set()
        for node in order:  # parents precede children in post-order
            if id(node) in wanted or any(id(p) in useful
                                         for p in node._parents):
                useful.add(id(node))
        if id(root) not in useful:
            return {}
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        if useful is not None and not any(id(p) in useful
                                          for p in node._parents):
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if useful is not None and key not in useful:
                continue
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(root: Tensor) -> None:
    """Backprop from ``root`` and write ``.grad`` on every reached tensor."""
    grads = backprop(root)
    for node in _topo_order(root):
        g = grads.get(id(node))
        if g is not None:
            node.grad = g
