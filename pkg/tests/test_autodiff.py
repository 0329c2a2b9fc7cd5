from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfl import autodiff as ad
from dfl.autodiff import DegenerateRowError, ParamSet, ShapeError, Tensor, grad_check

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _scalarize(t: Tensor, seed: int = 7) -> Tensor:
    """Random projection of ``t`` to a scalar so every output entry is tested."""
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.sum_(t * w)


# --- forward values -----------------------------------------------------------

def test_matmul_identity_and_hand_case():
    X = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(X)).value, X)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert np.array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_leaky_relu_values_and_slope():
    assert ad.leaky_relu(Tensor(2.0), 0.1).item() == 2.0
    assert ad.leaky_relu(Tensor(-2.0), 0.1).item() == pytest.approx(-0.2)
    x = Tensor(-1.0, requires_grad=True)
    g = ad.backward(ad.leaky_relu(x, 0.1), {"x": x})["x"]
    assert g == pytest.approx(0.1)
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            ad.leaky_relu(Tensor(1.0), bad)


def test_softmax_cases():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).value, [1 / 3] * 3, atol=1e-15)
    big = ad.softmax(Tensor([1000.0, 1000.0])).value
    assert np.all(np.isfinite(big)) and np.allclose(big, 0.5)
    # closed form: e^0 / (1 + 3) and 3 / (1 + 3)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(3.0)])).value, [0.25, 0.75], atol=1e-15)


def test_masked_softmax_cases():
    scores = Tensor(np.random.default_rng(1).standard_normal((4, 4)))
    np.testing.assert_array_equal(ad.masked_softmax(scores, np.eye(4)).value, np.eye(4))
    two = ad.masked_softmax(Tensor(np.zeros((1, 3))), np.array([[1, 1, 0]])).value
    np.testing.assert_array_equal(two, [[0.5, 0.5, 0.0]])
    w = ad.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.array([1, 0, 1])).value
    ref = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
    assert w[1] == 0.0
    np.testing.assert_allclose(w[[0, 2]], ref, atol=1e-15)


def test_masked_softmax_degenerate_row():
    with pytest.raises(DegenerateRowError):
        ad.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[1, 0], [0, 0]]))


def test_reduce_stats_cases():
    mu, sd = ad.reduce_stats(Tensor([1.0, 2.0, 3.0]))
    assert mu.item() == pytest.approx(2.0)
    assert sd.item() == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-15)
    assert ad.reduce_stats(Tensor([4.0, 4.0, 4.0]))[1].item() == 0.0
    mu, sd = ad.reduce_stats(Tensor([7.5]))
    assert (mu.item(), sd.item()) == (7.5, 0.0)


def test_reduce_stats_constant_gradient_is_finite():
    x = Tensor([2.0, 2.0, 2.0], requires_grad=True)
    g = ad.backward(ad.reduce_stats(x)[1], {"x": x})["x"]
    assert np.all(np.isfinite(g)) and np.allclose(g, 0.0)


def test_concat_cases():
    a = Tensor(np.ones((2, 3)))
    assert ad.concat([a]) is a
    parts = [Tensor(np.zeros((4, c)), requires_grad=True) for c in (1, 2, 3)]
    out = ad.concat(parts, axis=1)
    assert out.shape == (4, 6)
    grads = ad.backward(ad.sum_(out), {str(i): p for i, p in enumerate(parts)})
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(grads[str(i)], np.ones(p.shape))
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=1)


def test_l2_norm_cases():
    assert ad.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    z = Tensor(np.zeros(3), requires_grad=True)
    out = ad.l2_norm(z)
    assert out.item() == 0.0
    np.testing.assert_array_equal(ad.backward(out, {"z": z})["z"], np.zeros(3))


def test_backward_sum_of_squares_and_unused_parameter():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([5.0], requires_grad=True)
    grads = ad.backward(ad.sum_(p * p), {"p": p, "q": q})
    np.testing.assert_array_equal(grads["p"], [2.0, 4.0])
    np.testing.assert_array_equal(grads["q"], [0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        ad.backward(Tensor(np.ones(3), requires_grad=True))


def test_shared_parameter_accumulates_both_paths():
    rng = np.random.default_rng(3)
    W0 = rng.standard_normal((3, 3))
    x = rng.standard_normal((2, 3))

    def fn(W):
        h = ad.leaky_relu(Tensor(x) @ W, 0.3)
        return ad.sum_((h @ W) * (h @ W))  # W used twice, h used twice

    assert grad_check(fn, W0) < 1e-6


def test_param_set_rules():
    ps = ParamSet()
    ps.new("w", np.zeros(2))
    with pytest.raises(KeyError):
        ps.new("w", np.zeros(2))
    with pytest.raises(ShapeError):
        ps.assign({"w": np.zeros(3)})
    clone = ps.copy()
    ps.assign({"w": np.ones(2)})
    np.testing.assert_array_equal(clone["w"].tensor.value, [0.0, 0.0])
    assert ps.count() == 2 and ps.names() == ["w"]


def test_no_graph_recorded_without_grad():
    out = Tensor(np.ones(2)) * 3.0 + 1.0
    assert not out.requires_grad and out._parents == ()


# --- gradient checks for every op at several random points ----------------------

POINTS = 5


def _check_unary(fn, shape, tol=1e-4, positive=False):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(POINTS):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        worst = max(worst, grad_check(lambda t: _scalarize(fn(t)), x))
    assert worst < tol, worst


OP_CASES = [
    ("add_broadcast", lambda t: t + Tensor(np.arange(3.0)), (2, 3), False),
    ("radd_rsub", lambda t: 2.0 - (1.0 + t), (4,), False),
    ("sub_row", lambda t: t - ad.index_select(t, 0), (3, 2), False),
    ("mul_broadcast", lambda t: t * ad.reshape(ad.sum_(t, axis=1), (3, 1)), (3, 2), False),
    ("div", lambda t: Tensor(np.arange(1.0, 5.0)) / t, (4,), True),
    ("neg", lambda t: -t, (3,), False),
    ("leaky_relu", lambda t: ad.leaky_relu(t, 0.2), (5,), False),
    ("swapaxes", lambda t: t.T, (2, 3), False),
    ("reshape", lambda t: ad.reshape(t, (3, 2)), (2, 3), False),
    ("index_basic", lambda t: t[1:, 0], (3, 2), False),
    ("index_fancy", lambda t: t[np.array([0, 2, 2])], (3, 2), False),
    ("take", lambda t: ad.take(t, [1, 1, 0], axis=-1), (2, 3), False),
    ("stack", lambda t: ad.stack([t, t * t]), (3,), False),
    ("sum_axis", lambda t: ad.sum_(t, axis=0), (3, 2), False),
    ("sum_keepdims", lambda t: ad.sum_(t, axis=1, keepdims=True) * t, (3, 2), False),
    ("mean", lambda t: ad.mean(t, axis=-1) * ad.mean(t), (2, 4), False),
    ("stats_mean", lambda t: ad.reduce_stats(t, axis=0)[0], (4, 3), False),
    ("stats_std", lambda t: ad.reduce_stats(t, axis=-1)[1], (3, 5), False),
    ("stats_keepdims", lambda t: t / ad.reduce_stats(t, axis=0, keepdims=True)[1], (4, 2), False),
    ("l2_norm", lambda t: ad.l2_norm(t), (6,), False),
    ("l2_norm_axis", lambda t: ad.l2_norm(t, axis=-1), (2, 4), False),
    ("softmax", lambda t: ad.softmax(t, axis=-1), (3, 4), False),
    ("softmax_axis0", lambda t: ad.softmax(t, axis=0), (3, 4), False),
    ("masked_softmax", lambda t: ad.masked_softmax(t, np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]])),
     (3, 3), False),
]


@pytest.mark.parametrize("name,fn,shape,positive", OP_CASES)
def test_op_gradients(name, fn, shape, positive):
    _check_unary(fn, shape, positive=positive)


def test_matmul_gradient_random():
    rng = np.random.default_rng(5)
    for _ in range(POINTS):
        point = {"a": rng.standard_normal((5, 4)), "b": rng.standard_normal((4, 3))}
        assert grad_check(lambda p: _scalarize(p["a"] @ p["b"]), point) < 1e-4


def test_batched_matmul_gradient():
    rng = np.random.default_rng(6)
    point = {"a": rng.standard_normal((2, 3, 4)), "w": rng.standard_normal((4, 2))}
    assert grad_check(lambda p: _scalarize(p["a"] @ p["w"]), point) < 1e-4


def test_concat_gradient():
    rng = np.random.default_rng(8)
    point = {"a": rng.standard_normal((3, 1)), "b": rng.standard_normal((3, 2))}
    fn = lambda p: _scalarize(ad.leaky_relu(ad.concat([p["a"], p["b"], p["a"]], axis=1), 0.1))
    assert grad_check(fn, point) < 1e-4


def test_grad_check_detects_a_wrong_adjoint():
    def wrong(x):
        x = ad.as_tensor(x)
        return ad._node(x.value * x.value, "bad", (x,), lambda g: x._accumulate(g * x.value))

    assert grad_check(lambda t: ad.sum_(wrong(t)), np.array([1.0, 2.0])) > 0.4


# --- properties ------------------------------------------------------------------

@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    a = ad.softmax(Tensor(x), axis=-1).value
    b = ad.softmax(Tensor(x + c), axis=-1).value
    assert np.max(np.abs(a - b)) < 1e-10


@given(arrays(np.float64, (4, 4), elements=finite),
       arrays(np.bool_, (4, 4)))
def test_masked_softmax_rows(x, mask):
    mask = mask | np.eye(4, dtype=bool)
    w = ad.masked_softmax(Tensor(x), mask).value
    assert np.all(w[~mask] == 0.0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-10


@given(arrays(np.float64, (6,), elements=finite))
def test_l2_norm_matches_numpy(x):
    assert ad.l2_norm(Tensor(x)).item() == pytest.approx(np.linalg.norm(x), rel=1e-12, abs=1e-12)
