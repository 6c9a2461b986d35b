"""
The unconstrained features objective for an M-layer deep linear classifier.

    f = data(W_M ... W_1 H_1 + b 1^T, Y)
        + sum_m lambda_Wm/2 ||W_m||^2 + lambda_H/2 ||H_1||^2 (+ lambda_b/2 ||b||^2)

with data = 1/(2N) ||Z - Y||_F^2 (MSE) or 1/N sum_i CE(z_i, y_i) (CE).
Columns of H_1 are grouped by class in label order.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from core_linalg import as_matrix
from errors import ArgumentError, ContractViolation, NumericalOverflowError, UnsupportedLossError

logger = logging.getLogger(__name__)

INIT_SCALE = 0.1


# ===============================================================
#  PROBLEM SPECIFICATION
# ===============================================================

class LossKind(str, Enum):
    MSE = "mse"
    CE = "ce"


class BiasMode(str, Enum):
    NONE = "none"
    LAST_UNREGULARIZED = "last_unreg"
    LAST_REGULARIZED = "last_reg"


@dataclass(frozen=True)
class ProblemSpec:
    K: int
    class_counts: tuple
    widths: tuple              # d_1 .. d_M
    lambda_w: tuple            # lambda_W1 .. lambda_WM
    lambda_h: float
    loss: LossKind = LossKind.MSE
    bias_mode: BiasMode = BiasMode.NONE
    lambda_b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(n) for n in self.class_counts))
        object.__setattr__(self, "widths", tuple(int(d) for d in self.widths))
        object.__setattr__(self, "lambda_w", tuple(float(v) for v in self.lambda_w))
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "bias_mode", BiasMode(self.bias_mode))

        if self.K < 2:
            raise ArgumentError(f"need at least 2 classes, got K={self.K}")
        if len(self.class_counts) != self.K:
            raise ArgumentError(f"class_counts has {len(self.class_counts)} entries, expected K={self.K}")
        if any(n < 1 for n in self.class_counts):
            raise ArgumentError("every class needs at least one sample")
        if any(a < b for a, b in zip(self.class_counts, self.class_counts[1:])):
            raise ArgumentError(f"class_counts must be non-increasing, got {self.class_counts}")
        if not self.widths or any(d < 1 for d in self.widths):
            raise ArgumentError(f"widths must be a nonempty list of positive ints, got {self.widths}")
        if len(self.lambda_w) != len(self.widths):
            raise ArgumentError(f"need one lambda_W per layer ({len(self.widths)}), got {len(self.lambda_w)}")
        if any(not v > 0 for v in self.lambda_w) or not self.lambda_h > 0:
            raise ArgumentError("all regularization weights must be > 0")
        if self.bias_mode is BiasMode.LAST_REGULARIZED and not self.lambda_b > 0:
            raise ArgumentError("last_reg bias needs lambda_b > 0")

    @property
    def M(self):
        return len(self.widths)

    @property
    def N(self):
        return sum(self.class_counts)

    @property
    def is_balanced(self):
        return len(set(self.class_counts)) == 1

    @property
    def has_bias(self):
        return self.bias_mode is not BiasMode.NONE

    @property
    def class_offsets(self):
        return np.concatenate([[0], np.cumsum(self.class_counts)])

    @property
    def labels(self):
        return np.repeat(np.arange(self.K), self.class_counts)

    def layer_shapes(self):
        """Shapes of W_1 .. W_M: W_m maps d_m -> d_{m+1}, W_M maps d_M -> K."""
        outs = list(self.widths[1:]) + [self.K]
        return [(outs[m], self.widths[m]) for m in range(self.M)]


@dataclass(frozen=True)
class NetworkState:
    weights: tuple          # W_1 .. W_M
    features: np.ndarray    # H_1, d_1 x N
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))

    def parameters(self):
        params = list(self.weights) + [self.features]
        if self.bias is not None:
            params.append(self.bias)
        return params

    def map(self, fn, other=None):
        """Apply fn leaf-wise (optionally zipped with a same-shaped state)."""
        if other is None:
            return NetworkState(
                weights=tuple(fn(w) for w in self.weights),
                features=fn(self.features),
                bias=None if self.bias is None else fn(self.bias),
            )
        return NetworkState(
            weights=tuple(fn(w, g) for w, g in zip(self.weights, other.weights)),
            features=fn(self.features, other.features),
            bias=None if self.bias is None else fn(self.bias, other.bias),
        )

    def norm(self):
        return float(np.sqrt(sum(np.sum(p**2) for p in self.parameters())))


# ===============================================================
#  TARGETS / SHAPES
# ===============================================================

def target_matrix(spec):
    """One-hot K x N block matrix, class blocks contiguous."""
    Y = np.zeros((spec.K, spec.N))
    Y[spec.labels, np.arange(spec.N)] = 1.0
    return Y


def check_state(state, spec):
    if len(state.weights) != spec.M:
        raise ContractViolation(f"state has {len(state.weights)} layers, spec has M={spec.M}")
    for m, (W, shape) in enumerate(zip(state.weights, spec.layer_shapes()), start=1):
        if W.shape != shape:
            raise ContractViolation(f"W_{m} has shape {W.shape}, expected {shape}")
    if state.features.shape != (spec.widths[0], spec.N):
        raise ContractViolation(f"H_1 has shape {state.features.shape}, expected {(spec.widths[0], spec.N)}")
    if spec.has_bias != (state.bias is not None):
        raise ContractViolation(f"bias presence does not match bias_mode={spec.bias_mode.value}")
    if state.bias is not None and state.bias.shape != (spec.K,):
        raise ContractViolation(f"bias has shape {state.bias.shape}, expected {(spec.K,)}")


def make_state(weights, features, bias=None):
    return NetworkState(
        weights=tuple(as_matrix(W, f"W_{m}") for m, W in enumerate(weights, start=1)),
        features=as_matrix(features, "H_1"),
        bias=None if bias is None else np.asarray(bias, dtype=np.float64).ravel(),
    )


def zero_state(spec):
    return NetworkState(
        weights=tuple(np.zeros(shape) for shape in spec.layer_shapes()),
        features=np.zeros((spec.widths[0], spec.N)),
        bias=np.zeros(spec.K) if spec.has_bias else None,
    )


# ===============================================================
#  OPERATIONS
# ===============================================================

def init_state(spec, seed):
    """
    Every entry i.i.d. N(0, 1) * 0.1 from numpy's PCG64 generator seeded
    with `seed`; drawn in the order W_1, ..., W_M, H_1. Bias starts at zero.
    """
    rng = np.random.default_rng(seed)
    weights = tuple(INIT_SCALE * rng.standard_normal(shape) for shape in spec.layer_shapes())
    features = INIT_SCALE * rng.standard_normal((spec.widths[0], spec.N))
    bias = np.zeros(spec.K) if spec.has_bias else None
    return NetworkState(weights=weights, features=features, bias=bias)


def end_to_end(weights):
    """W_M ... W_1."""
    product = weights[0]
    for W in weights[1:]:
        product = W @ product
    return product


def forward(state, spec):
    check_state(state, spec)
    Z = state.features
    for W in state.weights:
        Z = W @ Z
    if state.bias is not None:
        Z = Z + state.bias[:, None]
    return Z


def _data_term(Z, spec):
    if spec.loss is LossKind.MSE:
        return float(np.sum((Z - target_matrix(spec)) ** 2)) / (2 * spec.N)
    # CE, log-sum-exp stabilized
    picked = Z[spec.labels, np.arange(spec.N)]
    return float(np.sum(logsumexp(Z, axis=0) - picked)) / spec.N


def _residual(Z, spec):
    """d(data)/dZ."""
    if spec.loss is LossKind.MSE:
        return (Z - target_matrix(spec)) / spec.N
    return (softmax(Z, axis=0) - target_matrix(spec)) / spec.N


def regularization(state, spec):
    total = sum(lam / 2 * np.sum(W**2) for lam, W in zip(spec.lambda_w, state.weights))
    total += spec.lambda_h / 2 * np.sum(state.features**2)
    if spec.bias_mode is BiasMode.LAST_REGULARIZED:
        total += spec.lambda_b / 2 * np.sum(state.bias**2)
    return float(total)


def loss(state, spec):
    with np.errstate(over="ignore", invalid="ignore"):
        value = _data_term(forward(state, spec), spec) + regularization(state, spec)
    if not np.isfinite(value):
        raise NumericalOverflowError(f"loss is not finite ({value})")
    return value


def gradient(state, spec):
    """
    Backprop through the linear chain:
        dW_i = (W_{i+1}^T ... W_M^T) R (H_1^T W_1^T ... W_{i-1}^T) + lambda_Wi W_i
    with R the 1/N-scaled data residual.
    """
    check_state(state, spec)
    activations = [state.features]
    for W in state.weights:
        activations.append(W @ activations[-1])
    Z = activations[-1]
    if state.bias is not None:
        Z = Z + state.bias[:, None]

    delta = _residual(Z, spec)
    grad_bias = None
    if state.bias is not None:
        grad_bias = delta.sum(axis=1)
        if spec.bias_mode is BiasMode.LAST_REGULARIZED:
            grad_bias = grad_bias + spec.lambda_b * state.bias

    grad_weights = [None] * spec.M
    for i in reversed(range(spec.M)):
        W = state.weights[i]
        grad_weights[i] = delta @ activations[i].T + spec.lambda_w[i] * W
        delta = W.T @ delta
    grad_features = delta + spec.lambda_h * state.features

    return NetworkState(weights=tuple(grad_weights), features=grad_features, bias=grad_bias)


def optimal_features_given_weights(weights, spec, bias=None):
    """
    Stationary H_1 for fixed weights (MSE):
        H = (P^T P + N lambda_H I)^{-1} P^T (Y - b 1^T),   P = W_M ... W_1
    """
    if spec.loss is not LossKind.MSE:
        raise UnsupportedLossError("closed-form features exist only for the MSE loss")
    P = end_to_end(weights)
    if P.shape != (spec.K, spec.widths[0]):
        raise ContractViolation(f"weights chain to {P.shape}, expected {(spec.K, spec.widths[0])}")
    targets = target_matrix(spec)
    if bias is not None:
        targets = targets - np.asarray(bias)[:, None]
    gram = P.T @ P + spec.N * spec.lambda_h * np.eye(spec.widths[0])
    return scipy.linalg.solve(gram, P.T @ targets, assume_a="pos")


def alternative_features_given_weights(weights, spec):
    """
    Closed form valid at critical points only:
        H = (c (W_1^T W_1)^M + N lambda_H I)^{-1} W_1^T ... W_M^T Y
    """
    lam = spec.lambda_w
    c = lam[0] ** (spec.M - 1) / np.prod(lam[1:])
    W1 = weights[0]
    power = np.linalg.matrix_power(W1.T @ W1, spec.M)
    gram = c * power + spec.N * spec.lambda_h * np.eye(spec.widths[0])
    return scipy.linalg.solve(gram, end_to_end(weights).T @ target_matrix(spec), assume_a="pos")


def optimal_bias(state, spec):
    """Closed-form last-layer bias for the current weights and features (MSE)."""
    if spec.loss is not LossKind.MSE:
        raise UnsupportedLossError("closed-form bias exists only for the MSE loss")
    Z0 = end_to_end(state.weights) @ state.features
    total = (target_matrix(spec) - Z0).sum(axis=1)
    if spec.bias_mode is BiasMode.LAST_REGULARIZED:
        return total / (spec.N * (1.0 + spec.lambda_b))
    return total / spec.N


def balance_residuals(state, spec):
    """
    Critical-point balance identities, one Frobenius residual per layer:
        m < M : ||lambda_{m+1} W_{m+1}^T W_{m+1} - lambda_m W_m W_m^T||
        last  : ||lambda_1 W_1^T W_1 - lambda_H H_1 H_1^T||
    """
    check_state(state, spec)
    W, lam = state.weights, spec.lambda_w
    residuals = []
    for m in range(spec.M - 1):
        gap = lam[m + 1] * W[m + 1].T @ W[m + 1] - lam[m] * W[m] @ W[m].T
        residuals.append(float(np.linalg.norm(gap)))
    H = state.features
    gap = lam[0] * W[0].T @ W[0] - spec.lambda_h * H @ H.T
    residuals.append(float(np.linalg.norm(gap)))
    return np.array(residuals)
