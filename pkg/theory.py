"""
Closed-form global minimizers of the deep linear unconstrained features model.

Every MSE regime reduces to one scalar problem per active direction,

    g(x) = 1/(x^M + 1) + b x,    x >= 0,

whose minimizer x* fixes the shared singular value of that direction:

    s = (N lambda_H x*^M / c)^(1/(2M)),   c = lambda_W1^(M-1) / (lambda_WM ... lambda_W2)

The balanced, imbalanced and plain (M = 1) predictors differ only in how b is
formed and which directions are allowed to be active.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import bisect

from core_linalg import centered_basis, centering_matrix, random_orthonormal
from errors import ArgumentError, RegimeError, RegimeMismatchError, UnsupportedLossError
from ufm_model import BiasMode, LossKind, NetworkState, optimal_features_given_weights

logger = logging.getLogger(__name__)

# ===============================================================
#  CONFIGURATION
# ===============================================================

TIE_BAND = 1e-12       # |b - threshold| inside this band is a tie
ROOT_XTOL = 1e-13
ROOT_MAXITER = 500


class CaseKind(str, Enum):
    ZERO_ONLY = "zero_only"
    NONTRIVIAL_ONLY = "nontrivial_only"
    TIE = "tie"


class Regime(str, Enum):
    ALL_ACTIVE = "nontrivial"
    PARTIAL_COLLAPSE = "partial_collapse"
    FULL_COLLAPSE = "trivial"
    THRESHOLD_TIE = "threshold_tie"


class Geometry(str, Enum):
    OF = "OF"
    ETF = "ETF"
    GOF = "GOF"
    ZERO = "Zero"


# ===============================================================
#  THE SCALAR PROBLEM
# ===============================================================

@dataclass(frozen=True)
class GMinimizerCase:
    M: int
    b: float
    kind: CaseKind
    x_star: float = None    # None for ZERO_ONLY

    @property
    def active(self):
        return self.kind is not CaseKind.ZERO_ONLY


def scalar_objective(x, M, b):
    """g(x) = 1/(x^M + 1) + b x."""
    return 1.0 / (x**M + 1.0) + b * x


def scalar_derivative(x, M, b):
    """g'(x) = b - M x^(M-1) / (x^M + 1)^2."""
    return b - M * x ** (M - 1) / (x**M + 1.0) ** 2


def g_threshold(M):
    """Largest b for which g has a nontrivial global minimizer: (M-1)^((M-1)/M) / M."""
    if M < 2:
        raise ArgumentError(f"g_threshold needs M >= 2, got {M} (M=1 uses plain_minimize)")
    return (M - 1) ** ((M - 1) / M) / M


def g_minimize(M, b):
    """
    Global minimizer(s) of g on x >= 0 for M >= 2.

    Below the threshold the minimizer is the largest root of g'(x) = 0,
    which lies above (M-1)^(1/M). At the threshold x = 0 and x = (M-1)^(1/M)
    both reach g = 1.
    """
    if M < 2:
        raise ArgumentError(f"g_minimize needs M >= 2, got {M}")
    if not b > 0:
        raise ArgumentError(f"b must be > 0, got {b}")

    threshold = g_threshold(M)
    lo = (M - 1) ** (1.0 / M)

    if b > threshold + TIE_BAND:
        return GMinimizerCase(M=M, b=b, kind=CaseKind.ZERO_ONLY)
    if b >= threshold - TIE_BAND:
        return GMinimizerCase(M=M, b=b, kind=CaseKind.TIE, x_star=lo)

    hi = 2.0 * lo
    while scalar_derivative(hi, M, b) <= 0:
        hi *= 2.0

    x_star = bisect(scalar_derivative, lo, hi, args=(M, b), xtol=ROOT_XTOL, maxiter=ROOT_MAXITER)
    return GMinimizerCase(M=M, b=b, kind=CaseKind.NONTRIVIAL_ONLY, x_star=float(x_star))


def plain_minimize(a):
    """
    Minimizer of 1/(x+1) + a x on x >= 0: sqrt(1/a) - 1 for a < 1,
    zero for a > 1, and a tie at a = 1 where both give the value 1.
    """
    if not a > 0:
        raise ArgumentError(f"a must be > 0, got {a}")
    if a > 1.0 + TIE_BAND:
        return GMinimizerCase(M=1, b=a, kind=CaseKind.ZERO_ONLY)
    if a >= 1.0 - TIE_BAND:
        return GMinimizerCase(M=1, b=a, kind=CaseKind.TIE, x_star=0.0)
    return GMinimizerCase(M=1, b=a, kind=CaseKind.NONTRIVIAL_ONLY, x_star=float(np.sqrt(1.0 / a) - 1.0))


def scalar_case(M, b):
    return plain_minimize(b) if M == 1 else g_minimize(M, b)


def scalar_threshold(M):
    return 1.0 if M == 1 else g_threshold(M)


# ===============================================================
#  SHARED CONSTANTS
# ===============================================================

def depth_constant(spec):
    """c = lambda_W1^(M-1) / (lambda_WM ... lambda_W2); equals 1 for M = 1."""
    lam = spec.lambda_w
    return lam[0] ** (spec.M - 1) / float(np.prod(lam[1:]))


def singular_value_from_root(x, spec):
    return (spec.N * spec.lambda_h * x**spec.M / depth_constant(spec)) ** (1.0 / (2 * spec.M))


def loss_from_singular_values(spec, singular_values, counts=None):
    """
    Reduced objective at a critical point with the given per-direction
    singular values:

        sum_k (n_k/2N) N lambda_H / (c s_k^(2M) + N lambda_H) + (M lambda_W1 / 2) sum_k s_k^2

    `counts` are the sample weights of the directions (class counts when
    bias-free, n for each of the K-1 centered directions with a bias).
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if counts is None:
        counts = np.asarray(spec.class_counts[: len(s)], dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != s.shape:
        raise ArgumentError(f"{len(counts)} direction weights for {len(s)} singular values")

    c = depth_constant(spec)
    n_lam = spec.N * spec.lambda_h
    data = np.sum(counts / (2 * spec.N) * n_lam / (c * s ** (2 * spec.M) + n_lam))
    reg = spec.M * spec.lambda_w[0] / 2 * np.sum(s**2)
    return float(data + reg)


def rank_cap(spec):
    directions = spec.K - 1 if spec.has_bias else spec.K
    return min([directions] + list(spec.widths))


# ===============================================================
#  PREDICTION
# ===============================================================

@dataclass(frozen=True)
class TheoryPrediction:
    spec: object
    regime: Regime
    geometry: Geometry
    singular_values: np.ndarray     # per direction, zeros for collapsed ones
    rank_cap: int
    basis: np.ndarray               # K x D direction basis
    target_W_gram: np.ndarray       # W_M W_M^T
    target_product_gram: np.ndarray  # (W_M ... W_1)(W_M ... W_1)^T
    target_H_gram: np.ndarray       # Hbar^T Hbar
    target_WH: np.ndarray           # W_M ... W_1 Hbar
    predicted_loss: float = None
    predicted_bias: np.ndarray = None
    constant: float = None          # a
    thresholds: np.ndarray = None   # b per direction
    threshold: float = None
    x_star: np.ndarray = None
    tie_indices: tuple = ()
    spectral: bool = False
    duality_coefficients: np.ndarray = None
    notes: list = field(default_factory=list)

    @property
    def collapsed(self):
        return self.singular_values == 0


def _direction_targets(spec, basis, s):
    lam = spec.lambda_w
    c = depth_constant(spec)
    n_lam = spec.N * spec.lambda_h
    power = c * s ** (2 * spec.M)

    def project(diagonal):
        return (basis * diagonal) @ basis.T

    return dict(
        target_W_gram=project(lam[0] / lam[-1] * s**2),
        target_product_gram=project(power),
        target_H_gram=project(power / (power + n_lam) ** 2),
        target_WH=project(power / (power + n_lam)),
    )


def _classify(cases, active_mask, r_cap):
    ties = tuple(k for k, case in enumerate(cases[:r_cap]) if case.kind is CaseKind.TIE)
    active = int(np.count_nonzero(active_mask))
    if ties:
        return Regime.THRESHOLD_TIE, ties
    if active == 0:
        return Regime.FULL_COLLAPSE, ties
    if active == r_cap:
        return Regime.ALL_ACTIVE, ties
    return Regime.PARTIAL_COLLAPSE, ties


def _assemble(spec, b_values, basis, counts, active_geometry, constant, spectral_if_active):
    """Solve the scalar problem per direction and build the prediction."""
    R = rank_cap(spec)
    cases = [scalar_case(spec.M, b) for b in b_values]
    D = len(cases)

    # the plain tie sits at x = 0, so it never opens a direction
    active_mask = np.array([k < R and case.active and case.x_star > 0 for k, case in enumerate(cases)])
    x_star = np.array([case.x_star if active_mask[k] else 0.0 for k, case in enumerate(cases)])
    s = np.where(active_mask, singular_value_from_root(x_star, spec), 0.0)

    regime, ties = _classify(cases, active_mask, R)
    geometry = active_geometry if active_mask.any() else Geometry.ZERO
    predicted_loss = loss_from_singular_values(spec, s, counts)
    targets = _direction_targets(spec, basis, s)

    c = depth_constant(spec)
    power = c * s ** (2 * spec.M) + spec.N * spec.lambda_h
    if D == spec.K:
        duality = power
    else:
        duality = np.full(spec.K, power[0])

    bias = np.full(spec.K, 1.0 / spec.K) if spec.has_bias else None

    logger.debug(
        "prediction: regime=%s geometry=%s active=%d/%d loss=%.6g",
        regime.value, geometry.value, int(active_mask.sum()), D, predicted_loss,
    )
    return TheoryPrediction(
        spec=spec,
        regime=regime,
        geometry=geometry,
        singular_values=s,
        rank_cap=R,
        basis=basis,
        predicted_loss=predicted_loss,
        predicted_bias=bias,
        constant=constant,
        thresholds=np.asarray(b_values, dtype=np.float64),
        threshold=scalar_threshold(spec.M),
        x_star=x_star,
        tie_indices=ties,
        spectral=bool(spectral_if_active and active_mask.any()),
        duality_coefficients=duality,
        **targets,
    )


def _require_mse(spec):
    if spec.loss is not LossKind.MSE:
        raise UnsupportedLossError("closed-form minimizers exist only for the MSE loss; use predict_ce_balanced")


def predict_balanced(spec):
    """
    Balanced MSE, bias-free (OF) or with an unregularized last-layer bias (ETF).

        a = K (K n lambda_WM ... lambda_W1 lambda_H)^(1/M),   b = M a
    """
    _require_mse(spec)
    if not spec.is_balanced:
        raise RegimeMismatchError(f"predict_balanced needs equal class counts, got {spec.class_counts}")
    if spec.bias_mode is BiasMode.LAST_REGULARIZED:
        raise RegimeError("no closed form for a regularized last-layer bias")

    K, M, n = spec.K, spec.M, spec.class_counts[0]
    a = K * (K * n * float(np.prod(spec.lambda_w)) * spec.lambda_h) ** (1.0 / M)
    b = M * a
    R = rank_cap(spec)

    if spec.has_bias:
        D = K - 1
        basis = centered_basis(K, R)
        basis = np.hstack([basis, np.zeros((K, D - R))])
        geometry = Geometry.ETF
    else:
        D = K
        basis = np.eye(K)
        geometry = Geometry.OF

    return _assemble(
        spec,
        b_values=[b] * D,
        basis=basis,
        counts=[n] * D,
        active_geometry=geometry,
        constant=a,
        spectral_if_active=R < D,
    )


def _bottleneck_tie(spec):
    R = rank_cap(spec)
    n = spec.class_counts
    return R < spec.K and n[R - 1] == n[R]


def predict_imbalanced_plain(spec):
    """
    Plain UFM (M = 1), bias-free MSE, any class counts.

        a = N^2 lambda_W lambda_H,   s_k^2 = sqrt(n_k lambda_H / lambda_W) - N lambda_H  when a/n_k < 1
    """
    _require_mse(spec)
    if spec.M != 1:
        raise RegimeMismatchError(f"predict_imbalanced_plain needs M = 1, got M = {spec.M}")
    if spec.has_bias:
        raise RegimeError("imbalanced predictions are bias-free only")

    a = spec.N**2 * spec.lambda_w[0] * spec.lambda_h
    prediction = _assemble(
        spec,
        b_values=[a / n for n in spec.class_counts],
        basis=np.eye(spec.K),
        counts=spec.class_counts,
        active_geometry=Geometry.GOF,
        constant=a,
        spectral_if_active=_bottleneck_tie(spec),
    )
    return prediction


def predict_imbalanced_deep(spec):
    """
    Deep (M >= 2) bias-free MSE, any class counts.

        a = N (N lambda_WM ... lambda_W1 lambda_H)^(1/M),   b_k = M a / n_k
    """
    _require_mse(spec)
    if spec.M < 2:
        raise RegimeMismatchError("predict_imbalanced_deep needs M >= 2; use predict_imbalanced_plain")
    if spec.has_bias:
        raise RegimeError("imbalanced predictions are bias-free only")

    N, M = spec.N, spec.M
    a = N * (N * float(np.prod(spec.lambda_w)) * spec.lambda_h) ** (1.0 / M)
    return _assemble(
        spec,
        b_values=[M * a / n for n in spec.class_counts],
        basis=np.eye(spec.K),
        counts=spec.class_counts,
        active_geometry=Geometry.GOF,
        constant=a,
        spectral_if_active=_bottleneck_tie(spec),
    )


def predict_ce_balanced(spec):
    """
    Structural prediction for balanced cross-entropy: the end-to-end product,
    the class means and their product all form a simplex ETF up to scale,
    and the bias is a constant vector. The scale has no closed form.
    """
    if spec.loss is not LossKind.CE:
        raise RegimeMismatchError("predict_ce_balanced needs the CE loss")
    if not spec.is_balanced:
        raise RegimeMismatchError(f"CE prediction needs equal class counts, got {spec.class_counts}")
    if min(spec.widths) < spec.K - 1:
        raise RegimeError(f"CE prediction needs every width >= K-1 = {spec.K - 1}, got {spec.widths}")

    K = spec.K
    etf = centering_matrix(K) / np.sqrt(K - 1)

    if spec.bias_mode is BiasMode.LAST_UNREGULARIZED:
        bias = np.full(K, 1.0 / np.sqrt(K))
    elif spec.bias_mode is BiasMode.LAST_REGULARIZED:
        bias = np.zeros(K)
    else:
        bias = None

    return TheoryPrediction(
        spec=spec,
        regime=Regime.ALL_ACTIVE,
        geometry=Geometry.ETF,
        singular_values=np.zeros(0),
        rank_cap=K - 1,
        basis=centered_basis(K, K - 1),
        target_W_gram=etf,
        target_product_gram=etf,
        target_H_gram=etf,
        target_WH=etf,
        predicted_loss=None,
        predicted_bias=bias,
        notes=["scale of the CE minimizer is not available in closed form"],
    )


def predict(spec):
    """Pick the predictor that covers `spec`."""
    if spec.loss is LossKind.CE:
        return predict_ce_balanced(spec)
    if spec.is_balanced:
        return predict_balanced(spec)
    if spec.has_bias:
        raise RegimeError("no closed form for imbalanced data with a last-layer bias")
    if spec.M == 1:
        return predict_imbalanced_plain(spec)
    return predict_imbalanced_deep(spec)


# ===============================================================
#  PLAIN-UFM ANALYSIS
# ===============================================================

def minority_collapse_threshold(spec):
    """Per-class flags: class k collapses to zero iff N^2 lambda_W lambda_H / n_k > 1."""
    if spec.M != 1 or spec.loss is not LossKind.MSE:
        raise RegimeMismatchError("minority collapse threshold is defined for the plain MSE model (M = 1)")
    a = spec.N**2 * spec.lambda_w[0] * spec.lambda_h
    return np.array([a / n > 1.0 for n in spec.class_counts])


@dataclass(frozen=True)
class NormRatios:
    classifier: np.ndarray   # [i, j] = ||w_i||^2 / ||w_j||^2
    feature: np.ndarray      # [i, j] = ||h_i||^2 / ||h_j||^2


def norm_ratios(spec):
    """
    Closed-form squared-norm ratios of the plain model:

        ||w_i||^2/||w_j||^2 = (sqrt(n_i lambda_H/lambda_W) - N lambda_H) / (sqrt(n_j lambda_H/lambda_W) - N lambda_H)
        ||h_i||^2/||h_j||^2 = the same times n_j / n_i
    """
    if minority_collapse_threshold(spec).any():
        raise RegimeError("norm ratios need every class active (N^2 lambda_W lambda_H / n_K < 1)")
    if spec.has_bias:
        raise RegimeError("norm ratios are defined for the bias-free model")

    n = np.asarray(spec.class_counts, dtype=np.float64)
    s2 = np.sqrt(n * spec.lambda_h / spec.lambda_w[0]) - spec.N * spec.lambda_h
    classifier = s2[:, None] / s2[None, :]
    feature = classifier * n[None, :] / n[:, None]
    return NormRatios(classifier=classifier, feature=feature)


# ===============================================================
#  CANONICAL MINIMIZER
# ===============================================================

def construct_canonical_minimizer(spec, prediction, seed=0, trivial_at_tie=False):
    """
    Explicit global minimizer realizing `prediction`.

    W_j = sqrt(lambda_W1/lambda_Wj) U_j diag(s) U_{j-1}^T with U_0 .. U_{M-1}
    seeded random orthonormal frames and U_M the prediction's direction basis;
    the bias is the predicted one and H_1 is the stationarity solve for those
    weights.
    """
    if spec.loss is not LossKind.MSE or prediction.predicted_loss is None:
        raise UnsupportedLossError("no closed-form minimizer scale for the CE loss")
    if prediction.spec != spec:
        raise RegimeMismatchError("prediction was computed for a different problem")

    s = prediction.singular_values.copy()
    if trivial_at_tie:
        s[list(prediction.tie_indices)] = 0.0
    active = np.flatnonzero(s > 0)
    r = len(active)
    s_active = s[active]

    rng = np.random.default_rng(seed)
    dims = list(spec.widths) + [spec.K]
    frames = [random_orthonormal(dims[j], r, rng) for j in range(spec.M)]
    frames.append(prediction.basis[:, active])

    lam = spec.lambda_w
    weights = []
    for j in range(spec.M):
        scale = np.sqrt(lam[0] / lam[j])
        weights.append(scale * (frames[j + 1] * s_active) @ frames[j].T)

    bias = None if prediction.predicted_bias is None else prediction.predicted_bias.copy()
    features = optimal_features_given_weights(weights, spec, bias=bias)
    return NetworkState(weights=tuple(weights), features=features, bias=bias)
