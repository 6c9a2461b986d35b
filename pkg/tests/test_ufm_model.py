import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_spec
from errors import ArgumentError, ContractViolation, UnsupportedLossError
from ufm_model import (BiasMode, LossKind, NetworkState, end_to_end, forward, gradient, init_state, loss, make_state,
                       optimal_bias, optimal_features_given_weights, target_matrix, zero_state)


def random_state(spec, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    weights = [scale * rng.standard_normal(shape) for shape in spec.layer_shapes()]
    features = scale * rng.standard_normal((spec.widths[0], spec.N))
    bias = scale * rng.standard_normal(spec.K) if spec.has_bias else None
    return make_state(weights, features, bias)


def finite_difference(state, spec, h=1e-5):
    params = state.parameters()
    grads = []
    for index, param in enumerate(params):
        fd = np.zeros_like(param)
        for pos in itertools.product(*[range(n) for n in param.shape]):
            original = param[pos]
            param[pos] = original + h
            up = loss(state, spec)
            param[pos] = original - h
            down = loss(state, spec)
            param[pos] = original
            fd[pos] = (up - down) / (2 * h)
        grads.append(fd)
    return grads


# ===============================================================
#  PROBLEM SPEC
# ===============================================================

def test_spec_derived_sizes():
    spec = make_spec(K=3, counts=(4, 2, 1), widths=(5, 6))
    assert spec.M == 2 and spec.N == 7
    assert not spec.is_balanced
    assert spec.layer_shapes() == [(6, 5), (3, 6)]
    assert list(spec.labels) == [0, 0, 0, 0, 1, 1, 2]


@pytest.mark.parametrize("kwargs", [
    dict(K=1, counts=(3,)),
    dict(K=3, counts=(1, 2, 3)),
    dict(K=3, counts=(2, 2, 0)),
    dict(K=3, counts=(2, 2)),
    dict(K=3, lam=0.0),
    dict(K=3, bias="last_reg", lambda_b=0.0),
])
def test_spec_rejects_invalid(kwargs):
    with pytest.raises(ArgumentError):
        make_spec(**kwargs)


def test_target_matrix_is_block_one_hot():
    spec = make_spec(K=3, counts=(3, 2, 1))
    Y = target_matrix(spec)
    assert_allclose(Y.sum(axis=0), 1.0)
    assert_allclose(Y @ Y.T, np.diag([3.0, 2.0, 1.0]))
    assert_allclose(Y[:, :3], [[1, 1, 1], [0, 0, 0], [0, 0, 0]])


# ===============================================================
#  INIT / FORWARD / LOSS
# ===============================================================

def test_init_is_deterministic(small_spec):
    a, b = init_state(small_spec, 0), init_state(small_spec, 0)
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)
    c = init_state(small_spec, 1)
    assert not np.array_equal(a.features, c.features)


def test_init_statistics():
    spec = make_spec(K=2, counts=(500, 500), widths=(1000,))
    values = init_state(spec, 3).features.ravel()
    assert values.size == 10**6
    assert abs(values.mean()) < 3 * 0.1 / np.sqrt(values.size)
    assert abs(values.std() - 0.1) < 1e-3


def test_init_bias_starts_at_zero():
    spec = make_spec(bias="last_unreg")
    assert_allclose(init_state(spec, 0).bias, 0.0)


def test_forward_of_zero_state_is_zero(small_spec):
    assert_allclose(forward(zero_state(small_spec), small_spec), 0.0)


def test_forward_identity_classifier():
    spec = make_spec(K=3, counts=(1, 1, 1), widths=(3,))
    Y = target_matrix(spec)
    state = NetworkState(weights=(np.eye(3),), features=Y.copy())
    assert_allclose(forward(state, spec), Y)


def test_forward_is_associative(small_spec):
    state = random_state(small_spec, 0)
    right_to_left = state.weights[2] @ (state.weights[1] @ (state.weights[0] @ state.features))
    left_to_right = (state.weights[2] @ state.weights[1] @ state.weights[0]) @ state.features
    assert np.linalg.norm(right_to_left - left_to_right) < 1e-10
    assert np.linalg.norm(forward(state, small_spec) - left_to_right) < 1e-10


def test_forward_rejects_bad_shapes(small_spec):
    state = random_state(small_spec, 0)
    broken = NetworkState(weights=state.weights[:2], features=state.features)
    with pytest.raises(ContractViolation):
        forward(broken, small_spec)
    with pytest.raises(ContractViolation):
        forward(NetworkState(weights=state.weights, features=state.features, bias=np.zeros(3)), small_spec)


def test_mse_loss_at_zero(small_spec):
    assert loss(zero_state(small_spec), small_spec) == pytest.approx(0.5)
    heavy = make_spec(K=3, counts=(2, 2, 2), widths=(4, 4, 4), lam=3.0)
    assert loss(zero_state(heavy), heavy) == pytest.approx(0.5)


def test_ce_loss_at_zero():
    spec = make_spec(K=5, counts=(2,) * 5, widths=(3,), loss="ce")
    assert loss(zero_state(spec), spec) == pytest.approx(np.log(5))


def test_ce_loss_is_shift_invariant():
    spec = make_spec(K=3, counts=(2, 2, 2), widths=(4, 4), loss="ce", bias="last_unreg")
    state = random_state(spec, 4)
    shifted = NetworkState(weights=state.weights, features=state.features, bias=state.bias + 7.5)
    assert abs(loss(shifted, spec) - loss(state, spec)) < 1e-12


def test_regularized_bias_enters_loss():
    spec = make_spec(K=3, widths=(4,), bias="last_reg", lambda_b=0.5)
    state = NetworkState(weights=(np.zeros((3, 4)),), features=np.zeros((4, 6)), bias=np.ones(3) / 3)
    data = np.sum((target_matrix(spec) - 1 / 3) ** 2) / (2 * spec.N)
    assert loss(state, spec) == pytest.approx(data + 0.25 * np.sum(state.bias**2))


# ===============================================================
#  GRADIENT
# ===============================================================

@pytest.mark.parametrize("M", [1, 2, 3])
@pytest.mark.parametrize("loss_kind", ["mse", "ce"])
@pytest.mark.parametrize("bias", ["none", "last_unreg", "last_reg"])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(M, loss_kind, bias, seed):
    spec = make_spec(K=3, counts=(2, 2, 2), widths=(4,) * M, lam=0.05, loss=loss_kind, bias=bias,
                     lambda_b=0.3 if bias == "last_reg" else 0.0)
    state = random_state(spec, seed)
    analytic = gradient(state, spec).parameters()
    numeric = finite_difference(state, spec)
    flat_a = np.concatenate([g.ravel() for g in analytic])
    flat_n = np.concatenate([g.ravel() for g in numeric])
    assert np.linalg.norm(flat_n - flat_a) / np.linalg.norm(flat_a) < 1e-6


def test_feature_gradient_with_zero_weights(small_spec):
    state = random_state(small_spec, 1)
    frozen = NetworkState(weights=tuple(np.zeros_like(W) for W in state.weights), features=state.features)
    grad = gradient(frozen, small_spec)
    assert_allclose(grad.features, small_spec.lambda_h * state.features)


def test_small_step_decreases_loss(small_spec):
    state = init_state(small_spec, 2)
    grad = gradient(state, small_spec)
    stepped = state.map(lambda p, g: p - 1e-4 * g, grad)
    assert loss(stepped, small_spec) < loss(state, small_spec)


# ===============================================================
#  CLOSED-FORM BLOCKS
# ===============================================================

def test_optimal_features_of_zero_weights(small_spec):
    weights = [np.zeros(shape) for shape in small_spec.layer_shapes()]
    assert_allclose(optimal_features_given_weights(weights, small_spec), 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_optimal_features_are_stationary(seed):
    spec = make_spec(K=3, counts=(3, 2, 2), widths=(5, 4))
    weights = random_state(spec, seed).weights
    H = optimal_features_given_weights(weights, spec)
    grad = gradient(NetworkState(weights=weights, features=H), spec)
    assert np.linalg.norm(grad.features) < 1e-9


def test_optimal_features_identity_classifier():
    spec = make_spec(K=3, counts=(1, 1, 1), widths=(3,), lambda_h=1 / 3)
    H = optimal_features_given_weights([np.eye(3)], spec)
    assert_allclose(H, target_matrix(spec) / 2)


def test_optimal_features_with_bias_are_stationary():
    spec = make_spec(K=3, counts=(2, 2, 2), widths=(4, 4), bias="last_unreg")
    state = random_state(spec, 5)
    H = optimal_features_given_weights(state.weights, spec, bias=state.bias)
    grad = gradient(NetworkState(weights=state.weights, features=H, bias=state.bias), spec)
    assert np.linalg.norm(grad.features) < 1e-9


def test_optimal_features_need_mse():
    spec = make_spec(loss="ce")
    with pytest.raises(UnsupportedLossError):
        optimal_features_given_weights([np.eye(3, 4)], spec)


@pytest.mark.parametrize("bias", ["last_unreg", "last_reg"])
def test_optimal_bias_zeroes_its_gradient(bias):
    spec = make_spec(K=3, counts=(3, 2, 1), widths=(4,), bias=bias, lambda_b=0.2 if bias == "last_reg" else 0.0)
    state = random_state(spec, 6)
    best = NetworkState(weights=state.weights, features=state.features, bias=optimal_bias(state, spec))
    assert np.linalg.norm(gradient(best, spec).bias) < 1e-12


def test_end_to_end_chains_layers(small_spec):
    state = random_state(small_spec, 2)
    W1, W2, W3 = state.weights
    assert_allclose(end_to_end(state.weights), W3 @ W2 @ W1)


def test_enum_coercion():
    spec = make_spec(loss="ce", bias="last_unreg")
    assert spec.loss is LossKind.CE and spec.bias_mode is BiasMode.LAST_UNREGULARIZED
