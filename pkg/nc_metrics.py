import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from core_linalg import centering_matrix, frobenius, normalized, pseudo_inverse, sorted_spectrum, svd
from errors import ContractViolation, DegenerateInputError, RegimeMismatchError
from theory import Geometry, NormRatios, depth_constant
from ufm_model import LossKind, balance_residuals, check_state, end_to_end, loss

logger = logging.getLogger(__name__)


class Flavor(str, Enum):
    OF = "of"
    ETF = "etf"
    GOF = "gof"


GEOMETRY_FLAVOR = {
    Geometry.OF: Flavor.OF,
    Geometry.ETF: Flavor.ETF,
    Geometry.GOF: Flavor.GOF,
    Geometry.ZERO: None,
}


# ===============================================================
#  REPORT
# ===============================================================

@dataclass
class MetricReport:
    flavor: object                      # Flavor, or None for a zero-geometry comparison
    nc1: float
    nc2: np.ndarray
    nc3: float
    balance_residuals: np.ndarray
    nc1_degenerate: bool = False
    nc1_checked: bool = True            # False when the prediction is the zero state
    theory_deviation: dict = field(default_factory=dict)
    singular_value_deviation: np.ndarray = None
    duality_residuals: np.ndarray = None
    loss_gap: float = None
    bias_deviation: float = None

    @property
    def balance_max(self):
        return float(np.max(self.balance_residuals)) if len(self.balance_residuals) else 0.0

    def deviations(self):
        """Flat name -> value map of every quantity that should vanish at a minimizer."""
        values = {}
        if self.nc1_checked and not self.nc1_degenerate:
            values["nc1"] = self.nc1
        for m, value in enumerate(self.nc2, start=1):
            values[f"nc2_{m}"] = float(value)
        values["nc3"] = self.nc3
        for name, value in self.theory_deviation.items():
            values[name] = value
        if self.singular_value_deviation is not None:
            for k, value in enumerate(self.singular_value_deviation, start=1):
                values[f"singular_value_{k}"] = float(value)
        if self.duality_residuals is not None:
            for k, value in enumerate(self.duality_residuals, start=1):
                values[f"duality_{k}"] = float(value)
        if self.bias_deviation is not None:
            values["bias"] = self.bias_deviation
        return values

    def to_dict(self):
        def clean(value):
            if value is None:
                return None
            if isinstance(value, np.ndarray):
                return [clean(v) for v in value.tolist()]
            if isinstance(value, float) and not math.isfinite(value):
                return None
            return value

        return {
            "flavor": None if self.flavor is None else self.flavor.value,
            "nc1": clean(float(self.nc1)),
            "nc1_degenerate": self.nc1_degenerate,
            "nc1_checked": self.nc1_checked,
            "nc2": clean(np.asarray(self.nc2, dtype=np.float64)),
            "nc3": clean(float(self.nc3)),
            "balance_residuals": clean(np.asarray(self.balance_residuals, dtype=np.float64)),
            "balance_max": clean(self.balance_max),
            "theory_deviation": {k: clean(float(v)) for k, v in self.theory_deviation.items()},
            "singular_value_deviation": clean(self.singular_value_deviation),
            "duality_residuals": clean(self.duality_residuals),
            "loss_gap": clean(self.loss_gap),
            "bias_deviation": clean(self.bias_deviation),
        }


# ===============================================================
#  NC MEASUREMENTS
# ===============================================================

def class_means(H, spec):
    """Per-class mean columns (d x K) and the sample-weighted global mean."""
    if H.shape[1] != spec.N:
        raise ContractViolation(f"H has {H.shape[1]} columns, expected N={spec.N}")
    offsets = spec.class_offsets
    means = np.column_stack([H[:, offsets[k]:offsets[k + 1]].mean(axis=1) for k in range(spec.K)])
    global_mean = H.mean(axis=1)
    return means, global_mean


def scatter_matrices(H, spec):
    means, global_mean = class_means(H, spec)
    within = H - means[:, spec.labels]
    sigma_w = within @ within.T / spec.N
    between = means - global_mean[:, None]
    sigma_b = between @ between.T / spec.K
    return sigma_w, sigma_b


def nc1(H, spec):
    """
    trace(Sigma_W Sigma_B^+) / K. Returns +inf when every class mean
    coincides (Sigma_B identically zero).
    """
    sigma_w, sigma_b = scatter_matrices(H, spec)
    if not np.any(sigma_b):
        logger.debug("between-class scatter is zero, reporting nc1 = inf")
        return math.inf
    return float(np.trace(sigma_w @ pseudo_inverse(sigma_b))) / spec.K


def classifier_products(weights):
    """W^m = W_M W_{M-1} ... W_{M-m+1} for m = 1 .. M."""
    products = [weights[-1]]
    for W in reversed(weights[:-1]):
        products.append(products[-1] @ W)
    return products


def of_target(K):
    return np.eye(K) / np.sqrt(K)


def etf_target(K):
    return centering_matrix(K) / np.sqrt(K - 1)


def _normalized_or_raise(matrix, what):
    unit = normalized(matrix)
    if unit is None:
        raise DegenerateInputError(f"{what} is identically zero")
    return unit


def _gram_gaps(products, target, what):
    gaps = []
    for m, W in enumerate(products, start=1):
        gram = _normalized_or_raise(W @ W.T, f"{what} Gram of W^{m}")
        gaps.append(frobenius(gram - target))
    return np.array(gaps)


def nc2_of(products, K):
    return _gram_gaps(products, of_target(K), "OF")


def nc2_etf(products, K):
    return _gram_gaps(products, etf_target(K), "ETF")


def nc3(product_full, means, flavor, target=None):
    """
    Distance between the normalized product W_M ... W_1 Hbar and the
    flavor's target (I/sqrt(K), the centered ETF, or an explicit GOF target).
    """
    K = product_full.shape[0]
    if flavor is Flavor.OF:
        goal = of_target(K)
    elif flavor is Flavor.ETF:
        goal = etf_target(K)
    else:
        goal = _normalized_or_raise(target, "GOF target")
    measured = _normalized_or_raise(product_full @ means, "W_M ... W_1 Hbar")
    return frobenius(measured - goal)


def _distance_to_target(measured, target, spectral, symmetric):
    unit = _normalized_or_raise(measured, "measured matrix")
    goal = _normalized_or_raise(target, "target matrix")
    if spectral:
        return float(np.linalg.norm(sorted_spectrum(unit, symmetric) - sorted_spectrum(goal, symmetric)))
    return frobenius(unit - goal)


def nc2_gof(product_full, prediction):
    """Normalized end-to-end Gram against diag(c s_k^(2M)) (sorted spectra on a bottleneck tie)."""
    return _distance_to_target(product_full @ product_full.T, prediction.target_product_gram,
                               prediction.spectral, symmetric=True)


def nc3_gof(product_full, means, prediction):
    return _distance_to_target(product_full @ means, prediction.target_WH,
                               prediction.spectral, symmetric=False)


def measure(state, spec, flavor, prediction=None):
    """NC1, NC2 and NC3 of a state in one flavor, without comparing to theory."""
    check_state(state, spec)
    flavor = Flavor(flavor)
    product = end_to_end(state.weights)
    means, _ = class_means(state.features, spec)
    value_nc1 = nc1(state.features, spec)

    if flavor is Flavor.GOF:
        if prediction is None:
            raise RegimeMismatchError("GOF metrics need a prediction to supply the target")
        value_nc2 = np.array([nc2_gof(product, prediction)])
        value_nc3 = nc3_gof(product, means, prediction)
    else:
        products = classifier_products(state.weights)
        value_nc2 = nc2_of(products, spec.K) if flavor is Flavor.OF else nc2_etf(products, spec.K)
        value_nc3 = nc3(product, means, flavor)

    return MetricReport(
        flavor=flavor,
        nc1=value_nc1,
        nc1_degenerate=math.isinf(value_nc1),
        nc2=value_nc2,
        nc3=value_nc3,
        balance_residuals=balance_residuals(state, spec),
    )


# ===============================================================
#  THEORY COMPARISON
# ===============================================================

def duality_residuals(state, spec, prediction):
    """
    ||(W_M ... W_1)_k - (c s_k^(2M) + N lambda_H) h_k|| per class, with h_k
    centered by the global mean when a bias is present.
    """
    product = end_to_end(state.weights)
    means, global_mean = class_means(state.features, spec)
    if spec.has_bias:
        means = means - global_mean[:, None]
    scaled = means * prediction.duality_coefficients[None, :]
    return np.linalg.norm(product - scaled.T, axis=1)


def ce_duality(state, spec):
    """
    Least-squares coefficient alpha with h_k ~ alpha (W_M ... W_1)_k over all
    classes, and the per-class residuals relative to ||h_k||.
    """
    product = end_to_end(state.weights)
    means, global_mean = class_means(state.features, spec)
    rows = product.T
    denom = float(np.sum(rows**2))
    alpha = float(np.sum(rows * means)) / denom if denom > 0 else 0.0
    norms = np.linalg.norm(means, axis=0)
    gaps = np.linalg.norm(means - alpha * rows, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = np.where(norms > 0, gaps / norms, gaps)
    return alpha, relative


def measured_norm_ratios(state, spec):
    """Squared-norm ratio tables of the end-to-end classifier rows and class means."""
    product = end_to_end(state.weights)
    means, _ = class_means(state.features, spec)
    w = np.sum(product**2, axis=1)
    h = np.sum(means**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return NormRatios(classifier=w[:, None] / w[None, :], feature=h[:, None] / h[None, :])


def _zero_geometry_gaps(state, spec):
    products = classifier_products(state.weights)
    product = products[-1]
    means, _ = class_means(state.features, spec)
    nc2 = np.array([frobenius(W @ W.T) for W in products])
    return nc2, frobenius(product @ means)


def _spectral_nc2(products, prediction):
    """Per-depth Gram gaps against U diag(s^(2m)) U^T compared by sorted eigenvalues."""
    s, basis = prediction.singular_values, prediction.basis
    gaps = []
    for m, W in enumerate(products, start=1):
        target = (basis * s ** (2 * m)) @ basis.T
        gaps.append(_distance_to_target(W @ W.T, target, spectral=True, symmetric=True))
    return np.array(gaps)


def compare_to_theory(state, spec, prediction):
    """Full report of a state against the prediction for the same problem."""
    if prediction.spec != spec:
        raise RegimeMismatchError("prediction was computed for a different problem")
    check_state(state, spec)

    flavor = GEOMETRY_FLAVOR[prediction.geometry]
    products = classifier_products(state.weights)
    product = products[-1]
    means, _ = class_means(state.features, spec)
    value_nc1 = nc1(state.features, spec)

    if flavor is None:
        value_nc2, value_nc3 = _zero_geometry_gaps(state, spec)
    elif flavor is Flavor.GOF:
        value_nc2 = np.array([nc2_gof(product, prediction)])
        value_nc3 = nc3_gof(product, means, prediction)
    elif prediction.spectral:
        value_nc2 = _spectral_nc2(products, prediction)
        value_nc3 = _distance_to_target(product @ means, prediction.target_WH, True, symmetric=False)
    else:
        value_nc2 = nc2_of(products, spec.K) if flavor is Flavor.OF else nc2_etf(products, spec.K)
        value_nc3 = nc3(product, means, flavor)

    report = MetricReport(
        flavor=flavor,
        nc1=value_nc1,
        nc1_degenerate=math.isinf(value_nc1),
        nc2=value_nc2,
        nc3=value_nc3,
        balance_residuals=balance_residuals(state, spec),
        nc1_checked=flavor is not None,
    )
    if flavor is None:
        # NC1 is scale invariant: a uniformly shrinking H keeps its initial ratio
        report.theory_deviation["feature_norm"] = frobenius(state.features)

    if state.bias is not None and prediction.predicted_bias is not None:
        if spec.loss is LossKind.CE:
            # only the direction is predicted: distance to the constant vectors
            report.bias_deviation = float(np.linalg.norm(state.bias - state.bias.mean()))
        else:
            report.bias_deviation = float(np.linalg.norm(state.bias - prediction.predicted_bias))

    if spec.loss is LossKind.CE:
        alpha, relative = ce_duality(state, spec)
        report.theory_deviation["ce_duality_max"] = float(np.max(relative))
        logger.debug("CE duality coefficient %.6g", alpha)
        return report

    report.loss_gap = abs(loss(state, spec) - prediction.predicted_loss)
    report.theory_deviation["loss_gap"] = report.loss_gap

    c_scale = np.sqrt(depth_constant(spec))
    expected = c_scale * prediction.singular_values**spec.M
    measured = svd(product).S
    measured = np.concatenate([measured, np.zeros(max(0, len(expected) - len(measured)))])[: len(expected)]
    report.singular_value_deviation = np.abs(measured - expected)
    report.duality_residuals = duality_residuals(state, spec, prediction)
    return report


def deviation_table(report, prediction):
    """
    Every deviation as a row. The loss gap and the singular values are
    reported relative to their predicted values; everything else is absolute.
    """
    expected = None
    if prediction.predicted_loss is not None:
        expected = np.sqrt(depth_constant(prediction.spec)) * prediction.singular_values ** prediction.spec.M

    rows = []
    for name, value in report.deviations().items():
        relative = False
        if name == "loss_gap" and prediction.predicted_loss:
            value, relative = value / prediction.predicted_loss, True
        elif name.startswith("singular_value_") and expected is not None:
            target = expected[int(name.rsplit("_", 1)[1]) - 1]
            if target > 0:
                value, relative = value / target, True
        rows.append({"quantity": name, "value": float(value), "relative": relative})
    return pd.DataFrame(rows, columns=["quantity", "value", "relative"])
