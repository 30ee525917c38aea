import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgtd.approximator import (
    LinearCdfModel,
    LinearValueModel,
    ScalarMlpModel,
    SoftmaxMlpModel,
    cdf_at,
    encode_cartpole,
    encode_input,
    grad_cdf,
    grad_cdf_at,
    hvp,
    mean_values,
    model_from_json,
    model_to_json,
    one_hot,
    target_cdf,
)
from dgtd.mdp_env import CartPoleState
from dgtd.value_distribution import SupportGrid, project_scalar_to_grid


def fd_grad(f, theta, eps):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def tanh_net(m=6, n_in=3, H=5, seed=0):
    model = SoftmaxMlpModel(n_in, H, m, "tanh")
    return model, model.init_params(np.random.default_rng(seed)) * 3


# -- linear model


def test_linear_cdf_is_feature_product():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(3, 4, 5))
    model = LinearCdfModel(feats)
    theta = rng.normal(size=5)
    np.testing.assert_allclose(model.cdf(theta, 1), feats[1] @ theta)
    assert not model.is_one_hot


def test_linear_grad_is_feature_row_and_hvp_zero():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 3, 4))
    model = LinearCdfModel(feats)
    for theta in rng.normal(size=(3, 4)):
        np.testing.assert_array_equal(grad_cdf(model, theta, 0, 2), feats[0, 2])
        np.testing.assert_array_equal(hvp(model, theta, 0, 2, rng.normal(size=4)), np.zeros(4))


def test_one_hot_fast_path_matches_dense():
    rng = np.random.default_rng(2)
    model = LinearCdfModel.one_hot(3, 4)
    dense = LinearCdfModel(model.features + 0.0)
    dense._cols = None
    assert model.is_one_hot
    theta, w, c = rng.normal(size=12), rng.normal(size=12), rng.normal(size=4)
    for x in range(3):
        np.testing.assert_array_equal(model.cdf(theta, x), dense.cdf(theta, x))
        np.testing.assert_array_equal(model.jvp(theta, x, w), dense.jvp(theta, x, w))
        np.testing.assert_array_equal(model.vjp(theta, x, c), dense.vjp(theta, x, c))


def test_linear_rejects_bad_shape():
    with pytest.raises(ValueError):
        LinearCdfModel(np.zeros((3, 4)))


# -- softmax network forward


def test_softmax_cdf_is_monotone_and_ends_at_one():
    model, theta = tanh_net()
    for x in range(3):
        F = model.cdf(theta, x)
        assert F[-1] == 1.0
        assert np.all(np.diff(F) >= 0) and np.all(F >= 0)


def test_zero_weights_give_uniform_cdf():
    model = SoftmaxMlpModel(3, 4, 5)
    np.testing.assert_allclose(model.cdf(np.zeros(model.n_params), 0), np.arange(1, 6) / 5)


def test_relu_and_bad_activation():
    model = SoftmaxMlpModel(3, 4, 5, "relu")
    theta = model.init_params(np.random.default_rng(0))
    assert model.cdf(theta, 1)[-1] == 1.0
    with pytest.raises(ValueError):
        SoftmaxMlpModel(3, 4, 5, "sigmoid")


def test_pack_unpack_roundtrip():
    model, theta = tanh_net()
    P = model.unpack(theta)
    np.testing.assert_array_equal(model.pack(P["V1"], P["b1"], P["V2"], P["b2"]), theta)
    with pytest.raises(ValueError):
        model.unpack(theta[:-1])


def test_input_table_lookup():
    table = [[-1.0], [0.4], [1.3]]
    model = SoftmaxMlpModel(1, 2, 4, input_table=table, hidden_bias=False, output_bias=False)
    theta = model.init_params(np.random.default_rng(0))
    np.testing.assert_array_equal(model.cdf(theta, 1), model.cdf(theta, np.array([0.4])))
    assert model.n_params == 2 + 2 * 3


# -- first derivatives


def test_last_atom_gradient_is_zero():
    model, theta = tanh_net()
    np.testing.assert_allclose(grad_cdf(model, theta, 1, model.m - 1), 0.0, atol=1e-15)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_softmax_gradient_matches_finite_difference(activation):
    rng = np.random.default_rng(3)
    model = SoftmaxMlpModel(3, 5, 6, activation)
    theta = model.init_params(rng) * 3
    for j in range(model.m - 1):
        g = grad_cdf(model, theta, 2, j)
        fd = fd_grad(lambda t: model.cdf(t, 2)[j], theta, 1e-6)
        assert rel_err(g, fd) <= 1e-6


def test_jacobian_vjp_jvp_consistency():
    rng = np.random.default_rng(4)
    model, theta = tanh_net(seed=4)
    x = rng.normal(size=3)
    J = model.jacobian(theta, x)
    w, c = rng.normal(size=model.n_params), rng.normal(size=model.m)
    np.testing.assert_allclose(model.jvp(theta, x, w), J @ w, atol=1e-14)
    np.testing.assert_allclose(model.vjp(theta, x, c), c @ J, atol=1e-14)


def test_variants_without_bias_or_reference_logit():
    rng = np.random.default_rng(5)
    for kw in [dict(hidden_bias=False), dict(output_bias=False), dict(reference_logit=False)]:
        model = SoftmaxMlpModel(2, 3, 4, **kw)
        theta = model.init_params(rng)
        x = rng.normal(size=2)
        fd = np.stack([fd_grad(lambda t: model.cdf(t, x)[j], theta, 1e-6) for j in range(4)])
        np.testing.assert_allclose(model.jacobian(theta, x), fd, atol=1e-8)


# -- Hessian-vector products


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_hvp_symmetry(seed, j):
    rng = np.random.default_rng(seed)
    model, theta = tanh_net(seed=seed)
    x = rng.normal(size=3)
    u, w = rng.normal(size=(2, model.n_params))
    assert abs(u @ hvp(model, theta, x, j, w) - w @ hvp(model, theta, x, j, u)) <= 1e-9


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_hvp_matches_finite_difference_of_gradient(activation):
    rng = np.random.default_rng(6)
    model = SoftmaxMlpModel(3, 5, 6, activation)
    eps = 1e-5
    for _ in range(10):
        theta = model.init_params(rng) * 3
        x, w = rng.normal(size=3), rng.normal(size=model.n_params)
        j = int(rng.integers(model.m - 1))
        fd = (grad_cdf(model, theta + eps * w, x, j) - grad_cdf(model, theta - eps * w, x, j)) / (2 * eps)
        assert rel_err(hvp(model, theta, x, j, w), fd) <= 1e-5


def test_hvp_combo_is_linear_in_coefficients():
    rng = np.random.default_rng(7)
    model, theta = tanh_net(seed=7)
    x, w, c = rng.normal(size=3), rng.normal(size=model.n_params), rng.normal(size=model.m)
    expected = sum(c[j] * hvp(model, theta, x, j, w) for j in range(model.m))
    np.testing.assert_allclose(model.hvp_combo(theta, x, c, w), expected, atol=1e-12)


# -- per-atom conveniences


def test_cdf_at_clamps_and_matches_index():
    rng = np.random.default_rng(8)
    model, theta = tanh_net()
    grid = SupportGrid(0, 10, 6)
    F = model.cdf(theta, 0)
    assert cdf_at(model, theta, 0, -5.0, grid) == F[0]
    np.testing.assert_array_equal(grad_cdf_at(model, theta, 0, -5.0, grid), grad_cdf(model, theta, 0, 0))
    assert cdf_at(model, theta, 0, 4.0, grid) == F[2]
    for v in rng.uniform(-2, 12, 20):
        k = int(np.clip(np.floor(v / 2 + 0.5), 0, 5))
        assert cdf_at(model, theta, 0, v, grid) == F[k]
        assert k == project_scalar_to_grid(v, grid)


def test_target_cdf_negative_index():
    model, theta = tanh_net()
    F, J = target_cdf(model, theta, 1, np.array([-1, 0, 3]))
    assert F[0] == 0.0 and np.all(J[0] == 0)
    np.testing.assert_array_equal(F[1:], model.cdf(theta, 1)[[0, 3]])


def test_mean_values_uniform():
    model = SoftmaxMlpModel(3, 4, 11)
    assert mean_values(model, np.zeros(model.n_params), 0, SupportGrid(0, 10, 11)) == pytest.approx(5.0)


def test_grad_cdf_index_check():
    model, theta = tanh_net()
    with pytest.raises(IndexError):
        grad_cdf(model, theta, 0, model.m)


# -- encodings


def test_encodings():
    np.testing.assert_array_equal(one_hot(2, 4), [0, 0, 1, 0])
    np.testing.assert_array_equal(encode_cartpole(CartPoleState(0, 0, 0, 0)), np.zeros(4))
    assert encode_cartpole(CartPoleState(0, 0, 0, 0), action=1, n_actions=2).size == 6
    np.testing.assert_array_equal(encode_input(1, n_inputs=3), [0, 1, 0])
    with pytest.raises(ValueError):
        encode_input(1)
    with pytest.raises(IndexError):
        one_hot(4, 4)


# -- checkpoints


def test_model_json_roundtrip():
    model = SoftmaxMlpModel(1, 2, 4, input_table=[[0.5], [1.0]], output_bias=False)
    theta = model.init_params(np.random.default_rng(0))
    back, t2 = model_from_json(model_to_json(model, theta))
    np.testing.assert_array_equal(t2, theta)
    np.testing.assert_array_equal(back.cdf(t2, 1), model.cdf(theta, 1))

    lin = LinearCdfModel.one_hot(2, 3)
    text = model_to_json(lin, np.arange(6.0))
    with pytest.raises(ValueError):
        model_from_json(text)
    back, t2 = model_from_json(text, lin.features)
    np.testing.assert_array_equal(back.cdf(t2, 1), [3, 4, 5])


# -- scalar value models


def test_scalar_models_derivatives():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(3, 4))
    lin = LinearValueModel(feats)
    np.testing.assert_array_equal(lin.grad(None, 2), feats[2])

    mlp = ScalarMlpModel(3, 4)
    theta = mlp.init_params(rng) * 2
    x, w = rng.normal(size=3), rng.normal(size=mlp.n_params)
    assert rel_err(mlp.grad(theta, x), fd_grad(lambda t: mlp.value(t, x), theta, 1e-6)) <= 1e-7
    fd = (mlp.grad(theta + 1e-5 * w, x) - mlp.grad(theta - 1e-5 * w, x)) / 2e-5
    assert rel_err(mlp.hvp(theta, x, w), fd) <= 1e-6
