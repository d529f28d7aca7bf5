import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from popgraph import autodiff as ad
from popgraph.autodiff import Tensor
from popgraph.errors import EmptyLossSupport, ShapeError
from popgraph.gradcheck import check_gradients, finite_difference_check


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_matmul_hand_values():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_mean_over_axis():
    np.testing.assert_array_equal(ad.mean_over_axis(Tensor([[2, 4], [6, 8]]), axis=0).data, [4, 6])


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.concat_last_axis([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])


def test_embedding_index_error():
    table = leaf(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        ad.embedding_lookup(table, np.array([0, 4]))
    with pytest.raises(IndexError):
        ad.embedding_lookup(table, np.array([-1]))


def test_softmax_uniform_and_hand():
    np.testing.assert_allclose(ad.softmax_rows_with_bias(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4)))).data, 0.25)
    out = ad.softmax_rows_with_bias(Tensor([[0.0, math.log(3.0)]]), Tensor(np.zeros((1, 2))))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(logits, shift):
    bias = np.zeros_like(logits)
    y = ad.softmax_rows_with_bias(Tensor(logits), Tensor(bias)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    shifted = logits.copy()
    shifted[2] += shift
    y2 = ad.softmax_rows_with_bias(Tensor(shifted), Tensor(bias)).data
    np.testing.assert_allclose(y2, y, atol=1e-9, rtol=0)


def test_losses_hand_values():
    x = Tensor([1.0, 2.0])
    assert ad.loss_primitive("mse", x, np.array([1.0, 2.0]), np.ones(2)).item() == 0.0
    ce = ad.loss_primitive("cross_entropy", Tensor([[0.0, 0.0, 0.0]]), np.array([1]), np.ones(1))
    assert ce.item() == pytest.approx(math.log(3.0), abs=1e-15)
    bce = ad.loss_primitive("binary_cross_entropy", Tensor([0.0]), np.array([1.0]), np.ones(1))
    assert bce.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_loss_empty_support():
    with pytest.raises(EmptyLossSupport):
        ad.loss_primitive("mse", Tensor([1.0]), np.array([0.0]), np.zeros(1))


def test_backward_mse_grad():
    x = leaf([3.0])
    ad.backward(ad.loss_primitive("mse", x, np.array([0.0]), np.ones(1)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_unused_leaf_and_nonscalar():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    loss = ad.sum_all(ad.multiply(x, x))
    ad.backward(loss)
    assert y.grad is None or np.all(y.grad == 0)
    with pytest.raises(ShapeError):
        ad.backward(ad.multiply(leaf([1.0, 2.0]), 2.0))


def _shared_vs_unrolled(x0, outer):
    x = leaf(x0)
    s = ad.multiply(x, x)
    ad.backward(ad.sum_all(ad.add(outer(s), ad.multiply(s, 3.0))))
    x2 = leaf(x0)
    ad.backward(ad.sum_all(ad.add(outer(ad.multiply(x2, x2)), ad.multiply(ad.multiply(x2, x2), 3.0))))
    return x.grad, x2.grad


def test_shared_subexpression_equals_unrolled_exactly():
    # dyadic inputs and power-of-two scalings keep every product exact
    shared, unrolled = _shared_vs_unrolled(np.array([0.5, -1.25, 2.0]), lambda s: ad.multiply(s, 0.25))
    np.testing.assert_array_equal(shared, unrolled)


def test_shared_subexpression_matches_unrolled_to_rounding():
    shared, unrolled = _shared_vs_unrolled(np.array([0.3, -1.2, 2.0]), ad.sigmoid)
    np.testing.assert_allclose(shared, unrolled, rtol=1e-15, atol=0)


def test_two_uses_accumulate():
    x = leaf([2.0])
    ad.backward(ad.sum_all(ad.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def run():
        x, w = leaf(a), leaf(b)
        out = ad.gelu(ad.layer_norm_last_axis(ad.matmul(x, w), leaf(np.ones(3)), leaf(np.zeros(3))))
        ad.backward(ad.sum_all(out))
        return out.data, x.grad, w.grad

    for u, v in zip(run(), run()):
        assert u.tobytes() == v.tobytes()


def test_finite_difference_examples():
    rep = finite_difference_check(lambda x: ad.sum_all(ad.multiply(x, x)), [1.0, 2.0, 3.0])
    assert rep.passed
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum_all(ad.multiply(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    rep = finite_difference_check(lambda x: ad.sum_all(ad.multiply(Tensor(np.zeros(3)), x)), [1.0, 2.0, 3.0])
    assert rep.passed and rep.max_rel_error == 0.0


def _primitive_cases(rng):
    """(name, params, loss builder) for every primitive; losses are random projections."""
    w = {k: rng.normal(size=s) for k, s in {"p34": (3, 4), "p4": (4,), "p45": (4, 5), "p234": (2, 3, 4)}.items()}
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    ce_t = np.array([0, 3, 1])
    cases = {
        "matmul": (("p34", "p45"), lambda P: ad.matmul(P["p34"], P["p45"])),
        "batched_matmul": (("p234", "p45"), lambda P: ad.matmul(P["p234"], P["p45"])),
        "add": (("p34", "p4"), lambda P: ad.add(P["p34"], P["p4"])),
        "multiply": (("p34", "p4"), lambda P: ad.multiply(P["p34"], P["p4"])),
        "concat": (("p34", "p45"), lambda P: ad.concat_last_axis([P["p34"], ad.transpose_last_two(P["p45"])[:3]])),
        "mean": (("p234",), lambda P: ad.mean_over_axis(P["p234"], axis=1)),
        "sigmoid": (("p34",), lambda P: ad.sigmoid(P["p34"])),
        "gelu": (("p34",), lambda P: ad.gelu(P["p34"])),
        "layer_norm": (("p234", "p4"), lambda P: ad.layer_norm_last_axis(P["p234"], P["p4"], ad.multiply(P["p4"], 0.5))),
        "embedding": (("p45",), lambda P: ad.embedding_lookup(P["p45"], idx)),
        "linear": (("p34", "p45", "p4"), lambda P: ad.linear(P["p34"], P["p45"], ad.concat_last_axis([P["p4"], P["p4"][:1]]))),
        "transpose": (("p234",), lambda P: ad.transpose_last_two(P["p234"])),
        "permute": (("p234",), lambda P: ad.permute(P["p234"], (2, 0, 1))),
        "reshape": (("p234",), lambda P: ad.reshape(P["p234"], (6, 4))),
        "softmax_bias": (("p34", "p4"), lambda P: ad.softmax_rows_with_bias(P["p34"], ad.add(ad.multiply(P["p34"], 0.0), P["p4"]))),
        "take": (("p34",), lambda P: P["p34"][:, [0, 2, 2]]),
    }
    out = {}
    for name, (keys, fn) in cases.items():
        def loss(P=None, fn=fn):
            y = fn(P)
            r = Tensor(np.random.default_rng(1).normal(size=y.shape))
            return ad.sum_all(ad.multiply(y, r))

        out[name] = (keys, loss)
    out["mse"] = (("p34",), lambda P: ad.loss_primitive("mse", P["p34"], np.ones((3, 4)), (np.arange(12) % 2).reshape(3, 4)))
    out["cross_entropy"] = (("p34",), lambda P: ad.loss_primitive("cross_entropy", P["p34"], ce_t, np.array([1, 0, 1])))
    out["bce"] = (("p34",), lambda P: ad.loss_primitive("binary_cross_entropy", P["p34"], (np.arange(12) % 3 == 0).reshape(3, 4), np.ones((3, 4))))
    return w, out


@pytest.mark.parametrize("point", range(10))
def test_every_primitive_gradient(point):
    rng = np.random.default_rng(100 + point)
    w, cases = _primitive_cases(rng)
    for name, (keys, loss) in cases.items():
        params = {k: leaf(w[k].copy()) for k in keys}
        rep = check_gradients(lambda: loss(params), params)
        assert rep.passed, (name, rep.max_rel_error, rep.failures[:3])
