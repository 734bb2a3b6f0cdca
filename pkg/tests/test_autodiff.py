import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinas import autodiff as ad
from trinas.autodiff.collections import gradients
from trinas.oracle import fd_gradients

from _gradcases import ALL_CASES


@pytest.mark.parametrize("name,ws,loss_fn",
                         ALL_CASES, ids=[c[0] for c in ALL_CASES])
def test_backward_matches_finite_differences(name, ws, loss_fn):
    got = gradients(loss_fn(), ws)
    fd = fd_gradients(loss_fn, ws, h=1e-5)
    for key in ws.names():
        denom = max(np.linalg.norm(fd[key]), 1e-10)
        err = np.linalg.norm(got[key] - fd[key]) / denom
        assert err <= 1e-4, f"{name}/{key}: rel err {err:.3e}"


def test_constant_gets_no_gradient():
    c = ad.constant([1.0, 2.0])
    p = ad.parameter([3.0, 4.0])
    loss = ad.tsum(c * p)
    grads = gradients(loss, ad.WeightSet({"p": p}))
    np.testing.assert_allclose(grads["p"], [1.0, 2.0])
    assert not c.requires_grad


def test_gradient_accumulates_across_reuse():
    p = ad.parameter([2.0])
    loss = ad.tsum(p * p) + ad.tsum(ad.scale(p, 3.0))
    grads = gradients(loss, ad.WeightSet({"p": p}))
    np.testing.assert_allclose(grads["p"], [2 * 2.0 + 3.0])


def test_cross_entropy_matches_manual_log_softmax():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 4))
    labels = np.array([0, 1, 2, 3, 1, 2])
    loss = ad.cross_entropy(ad.constant(logits), labels).item()
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(loss, -logp[np.arange(6), labels].mean(),
                               rtol=1e-12)


def test_softmax_rows_sum_to_one():
    x = ad.constant(np.random.default_rng(1).standard_normal((5, 7)) * 10)
    s = ad.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=1), np.ones(5), atol=1e-12)
    assert (s > 0).all()


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.constant([0.0]))


def test_nonfinite_check_can_be_disabled():
    ad.set_finite_checks(False)
    try:
        t = ad.log(ad.constant([0.0]))
        assert np.isneginf(t.data[0])
    finally:
        ad.set_finite_checks(True)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12),
       st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_add_commutes_elementwise(xs, ys):
    n = min(len(xs), len(ys))
    a, b = np.array(xs[:n]), np.array(ys[:n])
    lhs = ad.add(ad.constant(a), ad.constant(b)).data
    rhs = ad.add(ad.constant(b), ad.constant(a)).data
    np.testing.assert_array_equal(lhs, rhs)
    np.testing.assert_allclose(lhs, a + b, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2 ** 31 - 1))
def test_matmul_matches_numpy(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    got = ad.matmul(ad.constant(a), ad.constant(b)).data
    np.testing.assert_allclose(got, a @ b, rtol=1e-12, atol=1e-12)


def test_weighted_sum_none_entries_get_zero_gradient():
    w = ad.parameter([0.3, 0.5, 0.2])
    a = ad.parameter([[1.0, 2.0]])
    b = ad.parameter([[3.0, -1.0]])
    out = ad.weighted_sum(w, [a, None, b])
    grads = gradients(ad.tsum(out), ad.WeightSet({"w": w}))
    np.testing.assert_allclose(grads["w"], [3.0, 0.0, 2.0])


def test_backward_rejects_nonscalar_root():
    p = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        gradients(p * p, ad.WeightSet({"p": p}))


class TestHvp:
    def _quadratic(self):
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        a = (q * rng.uniform(0.5, 2.0, 5)) @ q.T
        p = ad.parameter(rng.standard_normal(5))
        return a, ad.WeightSet({"p": p})

    def test_matches_exact_hessian_product(self):
        a, ws = self._quadratic()
        rng = np.random.default_rng(8)
        v = ad.GradientMap({"p": rng.standard_normal(5)})
        got = ad.hvp(lambda: self._loss(a, ws), ws, v, eps=1e-3)
        np.testing.assert_allclose(got["p"], a @ v["p"], rtol=1e-6, atol=1e-8)

    @staticmethod
    def _loss(a, ws):
        p = ws["p"]
        ap = ad.matmul(ad.constant(a), ad.reshape(p, (5, 1)))
        return ad.scale(ad.tsum(ad.reshape(p, (5, 1)) * ap), 0.5)

    def test_restores_parameter_values(self):
        a, ws = self._quadratic()
        before = ws["p"].data.copy()
        v = ad.GradientMap({"p": np.ones(5)})
        ad.hvp(lambda: self._loss(a, ws), ws, v, eps=1e-2)
        np.testing.assert_array_equal(ws["p"].data, before)

    def test_zero_direction_raises(self):
        a, ws = self._quadratic()
        v = ad.GradientMap({"p": np.zeros(5)})
        with pytest.raises(ad.ZeroDirectionError):
            ad.hvp(lambda: self._loss(a, ws), ws, v)


def test_gradient_map_vector_space_ops():
    g1 = ad.GradientMap({"a": np.array([1.0, 2.0]), "b": np.array([3.0])})
    g2 = ad.GradientMap({"a": np.array([0.5, 0.5]), "b": np.array([1.0])})
    s = g1 + 2.0 * g2
    np.testing.assert_allclose(s["a"], [2.0, 3.0])
    np.testing.assert_allclose(s["b"], [5.0])
    assert g1.dot(g2) == pytest.approx(1.5 + 3.0)
    assert g1.norm() == pytest.approx(np.sqrt(1 + 4 + 9))


def test_gradient_map_name_mismatch():
    g1 = ad.GradientMap({"a": np.zeros(2)})
    g2 = ad.GradientMap({"b": np.zeros(2)})
    with pytest.raises(ValueError):
        g1 + g2
