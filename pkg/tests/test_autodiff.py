import numpy as np
import pytest

from amgdiff import autodiff as ad
from amgdiff.errors import ContractError, NumericFault, ShapeError

from gradcheck import check


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _weighted_sum(t):
    # a fixed random projection so every output element matters
    w = np.random.default_rng(123).standard_normal(t.shape)
    return ad.sum_(ad.mul(t, ad.Tensor(w, dtype=np.float64)))


OPS = {
    "matmul": (lambda a, b: _weighted_sum(ad.matmul(a, b)), [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: _weighted_sum(ad.matmul(a, b)), [(2, 3, 4), (2, 4, 3)]),
    "matmul_weight": (lambda a, b: _weighted_sum(ad.matmul(a, b)), [(2, 3, 4), (4, 2)]),
    "add_bias": (lambda a, b: _weighted_sum(ad.add(a, b)), [(2, 3, 4), (4,)]),
    "add_token_bias": (lambda a, b: _weighted_sum(ad.add(a, b)), [(2, 3, 4), (2, 1, 4)]),
    "mul": (lambda a, b: _weighted_sum(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: _weighted_sum(ad.scale(a, -2.5)), [(3, 4)]),
    "softmax": (lambda a: _weighted_sum(ad.softmax(a)), [(3, 5)]),
    "layer_norm": (lambda a: _weighted_sum(ad.layer_norm(a)), [(3, 6)]),
    "gelu": (lambda a: _weighted_sum(ad.gelu(a)), [(4, 5)]),
    "relu": (lambda a: _weighted_sum(ad.relu(a)), [(4, 5)]),
    "reshape": (lambda a: _weighted_sum(ad.reshape(a, (6, 2))), [(3, 4)]),
    "transpose": (lambda a: _weighted_sum(ad.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "concat": (lambda a, b: _weighted_sum(ad.concat([a, b], axis=1)), [(2, 3), (2, 4)]),
    "slice": (lambda a: _weighted_sum(ad.slice_(a, (slice(None), slice(1, 3)))), [(3, 4)]),
    "mean": (lambda a: ad.mean(ad.mul(a, a)), [(3, 4)]),
    "mse": (lambda a: ad.mse(a, np.ones((3, 4))), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name, rng):
    build, shapes = OPS[name]
    assert check(build, shapes, rng) < 1e-3


def test_embed_lookup_gradient(rng):
    ids = np.array([2, 0, 2, 1])
    assert check(lambda table: _weighted_sum(ad.embed_lookup(table, ids)), [(4, 3)], rng) < 1e-3


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_constant_row_is_uniform():
    out = ad.softmax(ad.Tensor(np.full((2, 5), 3.0)))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-7)


def test_layer_norm_moments():
    x = np.random.default_rng(0).standard_normal((8, 64)) * 5 + 3
    y = ad.layer_norm(ad.Tensor(x, dtype=np.float64), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-6)


def test_linear_loss_gradient_is_outer_product():
    x = np.array([[1.0, 2.0, 3.0]])
    W = ad.Tensor(np.zeros((3, 2)), requires_grad=True, dtype=np.float64)
    ad.backward(ad.sum_(ad.matmul(ad.Tensor(x, dtype=np.float64), W)))
    np.testing.assert_array_equal(W.grad, np.outer(x[0], np.ones(2)))


def test_unused_parameter_gets_no_gradient():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    unused = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.sum_(a))
    assert unused.grad is None
    np.testing.assert_array_equal(a.grad, 1.0)


def test_reused_node_accumulates():
    a = ad.Tensor(np.array([[2.0]]), requires_grad=True, dtype=np.float64)
    b = ad.mul(a, a)
    ad.backward(ad.sum_(ad.add(b, b)))
    np.testing.assert_allclose(a.grad, [[8.0]])


def test_backward_rejects_non_scalar():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.scale(a, 2.0))


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2,))))


def test_non_finite_output_raises():
    with pytest.raises(NumericFault):
        ad.scale(ad.Tensor(np.array([np.inf, 1.0])), 1.0)


def test_float32_storage_is_preserved():
    a = ad.Tensor(np.ones((2, 3), dtype=np.float32))
    w = ad.Tensor(np.ones((3, 3), dtype=np.float32))
    out = ad.gelu(ad.layer_norm(ad.scale(ad.matmul(a, w), 0.5)))
    assert out.dtype == np.float32


def test_no_grad_records_nothing():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(a, a)
    assert not out.requires_grad and out._parents == ()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        st = ad.AdamState(lr=0.1)
        ad.adam_step(p, {"w": np.zeros(2)}, st)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st.step == 1

    def test_first_step_moves_by_lr(self):
        # m_hat = g, v_hat = g^2 on the first step, so the update is lr * g / (|g| + eps)
        g = np.array([0.3, -4.0, 1e-2])
        p = {"w": np.zeros(3)}
        st = ad.AdamState(lr=1e-3)
        ad.adam_step(p, {"w": g}, st)
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"], expected, atol=1e-12)
        np.testing.assert_allclose(np.abs(p["w"]), 1e-3, atol=1e-6)

    def test_constant_positive_gradient_decreases_monotonically(self):
        p = {"w": np.array([5.0])}
        st = ad.AdamState(lr=0.01)
        trace = []
        for _ in range(200):
            ad.adam_step(p, {"w": np.array([0.7])}, st)
            trace.append(p["w"][0])
        assert np.all(np.diff(trace) < 0)

    def test_nan_gradient_raises(self):
        with pytest.raises(NumericFault, match="step 1"):
            ad.adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, ad.AdamState())

    def test_missing_gradient_treated_as_zero(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        ad.adam_step(p, {"a": np.ones(2)}, ad.AdamState(lr=0.1))
        np.testing.assert_array_equal(p["b"], 1.0)


def test_global_norm_clipping():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    pre = ad.clip_by_global_norm(grads, 1.0)
    assert pre == pytest.approx(5.0)
    assert ad.global_norm(grads.values()) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    ad.clip_by_global_norm(small, 1.0)
    assert small["a"][0] == pytest.approx(0.1)
