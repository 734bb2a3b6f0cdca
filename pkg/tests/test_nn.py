import numpy as np
import pytest

from trinas import autodiff as ad
from trinas import nn


def _ws(layer, seed=0):
    return ad.WeightSet.from_arrays(layer.init(np.random.default_rng(seed)))


def test_conv2d_shapes_and_bias():
    layer = nn.Conv2d("c", 3, 5, 3, bias=True)
    assert layer.shapes() == {"c.w": (5, 3, 3, 3), "c.b": (5,)}
    ws = _ws(layer)
    out = layer(ws, ad.constant(np.zeros((2, 3, 8, 8))))
    assert out.shape == (2, 5, 8, 8)


def test_conv2d_stride_halves_resolution():
    layer = nn.Conv2d("c", 2, 2, 3, stride=2)
    out = layer(_ws(layer), ad.constant(np.zeros((1, 2, 8, 8))))
    assert out.shape == (1, 2, 4, 4)


def test_depthwise_keeps_channel_count():
    layer = nn.DepthwiseConv2d("d", 4, 3)
    out = layer(_ws(layer), ad.constant(np.zeros((2, 4, 6, 6))))
    assert out.shape == (2, 4, 6, 6)


def test_linear_applies_bias():
    layer = nn.Linear("fc", 3, 2)
    ws = ad.WeightSet.from_arrays({"fc.w": np.zeros((3, 2)),
                                   "fc.b": np.array([1.0, -2.0])})
    out = layer(ws, ad.constant(np.zeros((4, 3))))
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (4, 1)))


def test_embedding_returns_requested_rows():
    layer = nn.Embedding("e", 5, 3)
    table = np.arange(15.0).reshape(5, 3)
    ws = ad.WeightSet.from_arrays({"e.table": table})
    out = layer(ws, np.array([4, 0, 4]))
    np.testing.assert_array_equal(out.data, table[[4, 0, 4]])


def test_init_scales_with_fan_in():
    rng = np.random.default_rng(3)
    narrow = nn.Conv2d("a", 2, 64, 3).init(rng)["a.w"]
    wide = nn.Conv2d("b", 32, 64, 3).init(rng)["b.w"]
    assert narrow.std() > 2 * wide.std()


def test_collect_shapes_rejects_clashes():
    with pytest.raises(ValueError):
        nn.collect_shapes([nn.Linear("x", 2, 2), nn.Linear("x", 4, 1)])


def test_init_weight_arrays_is_seed_deterministic():
    layers = [nn.Conv2d("c", 2, 3, 3), nn.Linear("f", 4, 2)]
    a = nn.init_weight_arrays(layers, np.random.default_rng(9))
    b = nn.init_weight_arrays(layers, np.random.default_rng(9))
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
