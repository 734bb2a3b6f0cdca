import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinas import autodiff as ad
from trinas import reweight
from trinas.reweight import (ClassLossVector, WeightingConfig, class_losses,
                             supernet_class_losses, weighted_objective)
from trinas.search_space import ArchParams, Supernet, SupernetSpec


def _const_terms(vals):
    return lambda: [ad.constant(np.float64(v)) for v in vals]


def test_worked_example():
    # real 3.0, per-class sums (1.0, 2.0), class losses (0.5, 2.0), lam 1
    cfg = WeightingConfig(lam=1.0)
    lc = ClassLossVector(np.array([0.5, 2.0]))
    loss = weighted_objective(lambda: ad.constant(3.0),
                              _const_terms([1.0, 2.0]), lc, cfg)
    assert loss.item() == pytest.approx(3.0 + 0.5 * 1.0 + 2.0 * 2.0)


def test_synthetic_only_drops_real_term():
    cfg = WeightingConfig(lam=1.0, synthetic_only=True)
    lc = ClassLossVector(np.array([0.5, 2.0]))
    called = []

    def real():
        called.append(True)
        return ad.constant(3.0)

    loss = weighted_objective(real, _const_terms([1.0, 2.0]), lc, cfg)
    assert loss.item() == pytest.approx(0.5 + 4.0)
    assert not called


def test_lambda_zero_is_the_plain_real_graph():
    cfg = WeightingConfig(lam=0.0)
    lc = ClassLossVector(np.array([1.0, 1.0]))
    real = ad.constant(2.5)
    synth_calls = []

    def synth():
        synth_calls.append(True)
        return [ad.constant(1.0), ad.constant(1.0)]

    out = weighted_objective(lambda: real, synth, lc, cfg)
    assert out is real
    assert not synth_calls


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0),
       st.lists(st.floats(0.0, 4.0), min_size=2, max_size=5))
def test_scaling_lambda_scales_the_synthetic_part(lam, k, lcs):
    terms = list(np.linspace(0.5, 2.0, len(lcs)))
    lc = ClassLossVector(np.array(lcs))
    base = weighted_objective(lambda: ad.constant(1.0),
                              _const_terms(terms), lc,
                              WeightingConfig(lam=lam)).item()
    scaled = weighted_objective(lambda: ad.constant(1.0),
                                _const_terms(terms), lc,
                                WeightingConfig(lam=lam * k)).item()
    synth = base - 1.0
    assert scaled - 1.0 == pytest.approx(k * synth, rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.floats(0.1, 3.0))
def test_affine_in_each_class_loss(c_idx, lam):
    """Doubling one l_c moves the loss by exactly its coefficient."""
    terms = [0.7, 1.3, 0.4, 2.1]
    c = c_idx % len(terms)
    lc_vals = np.array([0.5, 1.0, 1.5, 0.25])
    cfg = WeightingConfig(lam=lam)

    def run(lc_arr):
        return weighted_objective(lambda: ad.constant(1.0),
                                  _const_terms(terms),
                                  ClassLossVector(lc_arr), cfg).item()

    before = run(lc_vals)
    bumped = lc_vals.copy()
    bumped[c] *= 2.0
    after = run(bumped)
    coeff = lam * terms[c]  # d loss / d lc[c]
    assert after - before == pytest.approx(coeff * lc_vals[c], rel=1e-9)


def test_term_count_mismatch_rejected():
    cfg = WeightingConfig(lam=1.0)
    lc = ClassLossVector(np.array([1.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        weighted_objective(lambda: ad.constant(0.0),
                           _const_terms([1.0, 2.0]), lc, cfg)


class TestWeights:
    def test_raw_weights_are_lambda_times_lc(self):
        cfg = WeightingConfig(lam=2.0)
        np.testing.assert_allclose(cfg.weights([0.5, 1.5]), [1.0, 3.0])

    def test_normalized_weights_average_to_lambda(self):
        cfg = WeightingConfig(lam=1.3, normalize=True)
        w = cfg.weights([0.2, 0.7, 2.1])
        assert w.mean() == pytest.approx(1.3)
        # ordering preserved
        assert w[0] < w[1] < w[2]

    def test_normalized_all_zero_losses_give_zero_weights(self):
        cfg = WeightingConfig(lam=1.0, normalize=True)
        np.testing.assert_array_equal(cfg.weights([0.0, 0.0]), [0.0, 0.0])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.05, 3.0), min_size=2, max_size=6),
           st.booleans())
    def test_jacobian_matches_finite_differences(self, lcs, normalize):
        cfg = WeightingConfig(lam=0.9, normalize=normalize)
        lc = np.array(lcs)
        jac = cfg.weight_jacobian(lc)
        h = 1e-7
        fd = np.empty_like(jac)
        for j in range(lc.size):
            up, dn = lc.copy(), lc.copy()
            up[j] += h
            dn[j] -= h
            fd[:, j] = (cfg.weights(up) - cfg.weights(dn)) / (2 * h)
        np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            WeightingConfig(lam=-0.1)
        with pytest.raises(ValueError):
            WeightingConfig(lam=0.0, synthetic_only=True)


class TestClassLossVector:
    def test_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValueError):
            ClassLossVector(np.array([0.5, -0.1]))
        with pytest.raises(ValueError):
            ClassLossVector(np.array([np.inf, 1.0]))

    def test_hardest_is_argmax(self):
        assert ClassLossVector(np.array([0.1, 2.0, 0.4])).hardest() == 1

    def test_class_losses_detaches(self):
        lc = class_losses(_const_terms([0.25, 0.5]))
        assert isinstance(lc, ClassLossVector)
        assert lc[1] == 0.5


def test_supernet_class_losses_match_masked_means():
    spec = SupernetSpec(num_cells=1, num_nodes=4, channels=4, num_classes=3,
                        in_shape=(6, 6, 1),
                        ops=("avg_pool_3x3", "identity", "zero"))
    net = Supernet(spec)
    rng = np.random.default_rng(0)
    ws = net.init_weights(rng)
    arch = ArchParams.init(spec, rng)
    images = rng.uniform(-1, 1, (6, 6, 6, 1))
    labels = np.array([0, 1, 2, 0, 1, 2])

    lc = supernet_class_losses(net, ws, arch, images, labels)

    from trinas.data import nchw
    logits = net.forward(ws, arch, ad.constant(nchw(images)))
    per_row = ad.cross_entropy(logits, labels, reduction="none").data
    for c in range(3):
        assert lc[c] == pytest.approx(per_row[labels == c].mean(), rel=1e-12)


def test_supernet_class_losses_need_every_class():
    spec = SupernetSpec(num_cells=1, num_nodes=4, channels=4, num_classes=3,
                        in_shape=(6, 6, 1),
                        ops=("avg_pool_3x3", "identity", "zero"))
    net = Supernet(spec)
    rng = np.random.default_rng(1)
    ws = net.init_weights(rng)
    arch = ArchParams.init(spec, rng)
    images = rng.uniform(-1, 1, (4, 6, 6, 1))
    with pytest.raises(ValueError):
        supernet_class_losses(net, ws, arch, images, np.array([0, 0, 1, 1]))
