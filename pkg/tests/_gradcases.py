"""Finite-difference cases for every differentiable primitive.

Each case is (name, weight set, nullary loss closure); the closure
rebuilds its graph from the weight set's tensors, so the central
difference oracle can perturb those arrays in place. Inputs are drawn
once per case with margins away from non-smooth points (relu kinks,
pool ties), making the checks deterministic.
"""

import numpy as np

from trinas import autodiff as ad


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    x += np.sign(x) * margin
    return x


def _cases():
    rng = np.random.default_rng(1234)
    out = []

    def case(name, loss_fn, **params):
        ws = ad.WeightSet(params)
        out.append((name, ws, loss_fn))

    def p(*shape, scale=0.6):
        return ad.parameter(rng.standard_normal(shape) * scale)

    # probe vectors make reductions sensitive to every coordinate
    def probe(shape):
        n = int(np.prod(shape))
        return ad.constant((np.arange(n, dtype=np.float64) % 7 - 3.0)
                           .reshape(shape) / 3.0)

    def sq(t):
        return ad.tsum(t * t)

    for shape in ((4,), (3, 5), (2, 3, 4)):
        a, b = p(*shape), p(*shape)
        case(f"add {shape}", lambda a=a, b=b: sq(ad.add(a, b)), a=a, b=b)
        a, b = p(*shape), p(*shape)
        case(f"sub {shape}", lambda a=a, b=b: sq(ad.sub(a, b)), a=a, b=b)
        a, b = p(*shape), p(*shape)
        case(f"mul {shape}", lambda a=a, b=b: ad.tsum(ad.mul(a, b)), a=a, b=b)
        a = p(*shape)
        case(f"neg {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.neg(a) * pr), a=a)
        a = p(*shape)
        case(f"scale {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.scale(a, 1.7) * pr), a=a)

    for m, k, n in ((2, 3, 4), (1, 5, 2), (4, 4, 4)):
        a, b = p(m, k), p(k, n)
        case(f"matmul {m}x{k}x{n}",
             lambda a=a, b=b: sq(ad.matmul(a, b)), a=a, b=b)

    for shape, new in (((6,), (2, 3)), ((2, 6), (3, 4)), ((2, 2, 3), (12,))):
        a = p(*shape)
        case(f"reshape {shape}->{new}",
             lambda a=a, new=new, pr=probe(new):
             ad.tsum(ad.reshape(a, new) * pr), a=a)

    for shape, axes in (((3, 4), (1, 0)), ((2, 3, 4), (2, 0, 1)),
                        ((2, 2, 2, 2), (0, 2, 1, 3))):
        a = p(*shape)
        out_shape = tuple(shape[i] for i in axes)
        case(f"transpose {shape} axes {axes}",
             lambda a=a, axes=axes, pr=probe(out_shape):
             ad.tsum(ad.transpose(a, axes) * pr), a=a)

    for shapes, axis in ((((2, 3), (2, 3)), 0), (((2, 3), (2, 2)), 1),
                         (((1, 2, 2), (3, 2, 2)), 0)):
        parts = [p(*s) for s in shapes]
        cat_shape = list(shapes[0])
        cat_shape[axis] = sum(s[axis] for s in shapes)
        case(f"concat {shapes} axis {axis}",
             lambda parts=parts, axis=axis, pr=probe(tuple(cat_shape)):
             ad.tsum(ad.concat(parts, axis=axis) * pr),
             **{f"part{i}": t for i, t in enumerate(parts)})

    for rows, cols, idx in ((4, 3, [0, 2, 2, 1]), (5, 2, [4, 0]),
                            (3, 6, [1, 1, 1])):
        a = p(rows, cols)
        case(f"gather_rows {rows}x{cols} idx {idx}",
             lambda a=a, idx=idx, pr=probe((len(idx), cols)):
             ad.tsum(ad.gather_rows(a, np.array(idx)) * pr), a=a)

    for rows, cols, i in ((3, 4, 0), (5, 2, 4), (2, 6, 1)):
        a = p(rows, cols)
        case(f"row {rows}x{cols} i={i}",
             lambda a=a, i=i, pr=probe((cols,)):
             ad.tsum(ad.row(a, i) * pr), a=a)

    for shape, axis in (((5,), None), ((3, 4), 0), ((2, 3, 4), 2)):
        a = p(*shape)
        case(f"tsum {shape} axis {axis}",
             lambda a=a, axis=axis: sq(ad.tsum(a, axis=axis))
             if axis is not None else ad.tsum(a, axis=None) * ad.tsum(a),
             a=a)
        a = p(*shape)
        case(f"mean {shape} axis {axis}",
             lambda a=a, axis=axis: sq(ad.mean(a, axis=axis))
             if axis is not None else ad.mean(a) * ad.mean(a),
             a=a)

    for shape in ((6,), (3, 4), (2, 2, 3)):
        a = ad.parameter(_away_from_zero(rng, shape))
        case(f"relu {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.relu(a) * pr), a=a)
        a = p(*shape)
        case(f"tanh {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.tanh(a) * pr), a=a)
        a = p(*shape)
        case(f"sigmoid {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.sigmoid(a) * pr), a=a)
        a = p(*shape, scale=0.4)
        case(f"exp {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.exp(a) * pr), a=a)
        a = ad.parameter(rng.uniform(0.3, 2.0, shape))
        case(f"log {shape}", lambda a=a, pr=probe(shape):
             ad.tsum(ad.log(a) * pr), a=a)

    for shape, axis in (((5,), -1), ((3, 4), 1), ((2, 3, 4), 0)):
        a = p(*shape)
        case(f"softmax {shape} axis {axis}",
             lambda a=a, axis=axis, pr=probe(shape):
             ad.tsum(ad.softmax(a, axis=axis) * pr), a=a)
        a = p(*shape)
        case(f"log_softmax {shape} axis {axis}",
             lambda a=a, axis=axis, pr=probe(shape):
             ad.tsum(ad.log_softmax(a, axis=axis) * pr), a=a)

    for n, c, red in ((4, 3, "mean"), (6, 2, "sum"), (3, 5, "none")):
        a = p(n, c)
        labels = np.arange(n) % c
        if red == "none":
            case(f"cross_entropy {n}x{c} {red}",
                 lambda a=a, labels=labels, pr=probe((n,)):
                 ad.tsum(ad.cross_entropy(a, labels, reduction="none") * pr),
                 a=a)
        else:
            case(f"cross_entropy {n}x{c} {red}",
                 lambda a=a, labels=labels, red=red:
                 ad.cross_entropy(a, labels, reduction=red), a=a)

    for n, red in ((5, "mean"), (4, "sum"), (6, "none")):
        a = p(n)
        targets = (np.arange(n) % 2).astype(np.float64)
        if red == "none":
            case(f"bce_with_logits {n} {red}",
                 lambda a=a, targets=targets, pr=probe((n,)):
                 ad.tsum(ad.bce_with_logits(a, targets, reduction="none")
                         * pr), a=a)
        else:
            case(f"bce_with_logits {n} {red}",
                 lambda a=a, targets=targets, red=red:
                 ad.bce_with_logits(a, targets, reduction=red), a=a)

    for k, shape in ((2, (3,)), (3, (2, 2)), (4, (2, 3))):
        w = p(k, scale=0.8)
        items = [p(*shape) for _ in range(k)]
        if k == 4:
            items[2] = None
        live = {f"item{i}": t for i, t in enumerate(items) if t is not None}
        case(f"weighted_sum k={k} {shape}",
             lambda w=w, items=items, pr=probe(shape):
             ad.tsum(ad.weighted_sum(w, items) * pr), w=w, **live)

    for n, ci, co, kw in ((1, 2, 3, {}), (2, 3, 2, {"stride": 2}),
                          (1, 2, 2, {"dilation": 2})):
        x, w = p(n, ci, 6, 6), p(co, ci, 3, 3)
        case(f"conv2d {n}x{ci} {kw or 'plain'}",
             lambda x=x, w=w, kw=kw: sq(ad.conv2d(x, w, **kw)), x=x, w=w)
    x, w, b = p(1, 2, 5, 5), p(3, 2, 3, 3), p(3)
    case("conv2d bias", lambda x=x, w=w, b=b: sq(ad.conv2d(x, w, b)),
         x=x, w=w, b=b)

    for n, c, kw in ((1, 3, {}), (2, 2, {"stride": 2}),
                     (1, 2, {"dilation": 2})):
        x, w = p(n, c, 6, 6), p(c, 3, 3)
        case(f"depthwise {n}x{c} {kw or 'plain'}",
             lambda x=x, w=w, kw=kw: sq(ad.depthwise_conv2d(x, w, **kw)),
             x=x, w=w)

    for n, c, k, s in ((1, 2, 3, 1), (2, 1, 3, 2), (1, 3, 2, 2)):
        x = p(n, c, 6, 6, scale=1.0)
        case(f"max_pool k={k} s={s} ({n},{c})",
             lambda x=x, k=k, s=s: sq(ad.max_pool(x, k, stride=s)), x=x)
        x = p(n, c, 6, 6)
        case(f"avg_pool k={k} s={s} ({n},{c})",
             lambda x=x, k=k, s=s: sq(ad.avg_pool(x, k, stride=s)), x=x)

    for n, c, hw in ((4, 2, 3), (3, 3, 4), (5, 1, 2)):
        x = p(n, c, hw, hw)
        case(f"batch_norm ({n},{c},{hw})",
             lambda x=x, pr=probe((n, c, hw, hw)):
             ad.tsum(ad.batch_norm(x) * pr), x=x)

    for n, c, hw in ((1, 2, 3), (2, 1, 4), (2, 3, 2)):
        x = p(n, c, hw, hw)
        case(f"upsample2x ({n},{c},{hw})",
             lambda x=x, pr=probe((n, c, 2 * hw, 2 * hw)):
             ad.tsum(ad.upsample2x(x) * pr), x=x)
        x = p(n, c, hw, hw)
        case(f"global_avg_pool ({n},{c},{hw})",
             lambda x=x, pr=probe((n, c)):
             ad.tsum(ad.global_avg_pool(x) * pr), x=x)

    return out


ALL_CASES = _cases()
