import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_spec
from errors import ContractViolation, DegenerateInputError, RegimeMismatchError
from nc_metrics import (Flavor, class_means, classifier_products, compare_to_theory, deviation_table, measure,
                        measured_norm_ratios, nc1, nc2_etf, nc2_of, nc3)
from theory import construct_canonical_minimizer, norm_ratios, predict
from ufm_model import NetworkState, init_state, loss, zero_state


def canonical(spec, seed=0):
    prediction = predict(spec)
    return construct_canonical_minimizer(spec, prediction, seed=seed), prediction


# ===============================================================
#  NC1
# ===============================================================

def test_class_means():
    spec = make_spec(K=2, counts=(2, 2), widths=(1,))
    means, global_mean = class_means(np.array([[0.0, 2.0, 5.0, 7.0]]), spec)
    assert_allclose(means, [[1.0, 6.0]])
    assert_allclose(global_mean, [3.5])
    with pytest.raises(ContractViolation):
        class_means(np.zeros((1, 3)), spec)


def test_nc1_direct_evaluation():
    spec = make_spec(K=2, counts=(2, 2), widths=(1,))
    assert nc1(np.array([[0.0, 2.0, 5.0, 7.0]]), spec) == pytest.approx(0.08)


def test_nc1_is_zero_for_collapsed_features():
    spec = make_spec(K=3, counts=(3, 2, 2), widths=(3,))
    H = np.eye(3)[:, spec.labels] * np.array([1.0, 2.0, 3.0])[spec.labels]
    assert nc1(H, spec) == pytest.approx(0.0, abs=1e-12)


def test_nc1_is_inf_when_means_coincide():
    spec = make_spec(K=3, counts=(2, 2, 2), widths=(4,))
    assert math.isinf(nc1(np.zeros((4, 6)), spec))


def test_nc1_invariant_to_sample_duplication():
    spec = make_spec(K=3, counts=(3, 2, 2), widths=(4,))
    H = np.random.default_rng(0).standard_normal((4, spec.N))
    doubled = make_spec(K=3, counts=(6, 4, 4), widths=(4,))
    columns = np.concatenate([np.repeat(np.arange(a, b), 2) for a, b in
                              zip(spec.class_offsets[:-1], spec.class_offsets[1:])])
    assert nc1(H[:, columns], doubled) == pytest.approx(nc1(H, spec), rel=1e-10)


def test_nc1_invariant_to_rotation():
    spec = make_spec(K=3, counts=(3, 3, 2), widths=(5,))
    rng = np.random.default_rng(1)
    H = rng.standard_normal((5, spec.N))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert nc1(Q @ H, spec) == pytest.approx(nc1(H, spec), rel=1e-10)


# ===============================================================
#  NC2 / NC3
# ===============================================================

def test_nc2_of_examples():
    assert_allclose(nc2_of([np.eye(3)], 3), [0.0], atol=1e-15)
    expected = np.linalg.norm(np.diag([4.0, 1.0]) / np.sqrt(17) - np.eye(2) / np.sqrt(2))
    assert_allclose(nc2_of([np.diag([2.0, 1.0])], 2), [expected])


def test_nc2_etf_two_classes():
    assert_allclose(nc2_etf([np.array([[1.0], [-1.0]])], 2), [0.0], atol=1e-15)


def test_nc2_rejects_zero_classifier():
    with pytest.raises(DegenerateInputError):
        nc2_of([np.zeros((3, 3))], 3)


def test_classifier_products_order():
    rng = np.random.default_rng(2)
    W1, W2, W3 = (rng.standard_normal((3, 3)) for _ in range(3))
    products = classifier_products([W1, W2, W3])
    assert_allclose(products[0], W3)
    assert_allclose(products[1], W3 @ W2)
    assert_allclose(products[2], W3 @ W2 @ W1)


def test_nc3_of_identity():
    assert nc3(np.eye(4), np.eye(4) * 3.0, Flavor.OF) == pytest.approx(0.0, abs=1e-15)


def test_nc3_etf():
    centered = np.eye(3) - 1 / 3
    assert nc3(centered, centered, Flavor.ETF) == pytest.approx(0.0, abs=1e-15)


def test_measure_needs_prediction_for_gof(small_spec):
    with pytest.raises(RegimeMismatchError):
        measure(init_state(small_spec, 0), small_spec, "gof")


def test_measure_zero_state_is_degenerate(small_spec):
    with pytest.raises(DegenerateInputError):
        measure(zero_state(small_spec), small_spec, "of")


def test_measure_random_init_reports_all_metrics(small_spec):
    report = measure(init_state(small_spec, 0), small_spec, "of")
    assert report.flavor is Flavor.OF
    assert len(report.nc2) == small_spec.M
    assert report.nc1 > 0 and report.nc3 > 0
    assert set(report.to_dict()) >= {"nc1", "nc2", "nc3", "balance_max"}


# ===============================================================
#  THEORY COMPARISON
# ===============================================================

@pytest.mark.parametrize("kwargs", [
    dict(K=4, counts=(5,) * 4, widths=(6, 6, 6), lam=1e-2),
    dict(K=4, counts=(5,) * 4, widths=(6, 6, 6), lam=1e-2, bias="last_unreg"),
    dict(K=4, counts=(5,) * 4, widths=(3, 3), lam=1e-2),
    dict(K=4, counts=(8, 4, 2, 2), widths=(6,), lam=1e-2),
    dict(K=4, counts=(8, 4, 2, 2), widths=(6, 6), lam=1e-2),
    dict(K=4, counts=(8, 4, 2, 2), widths=(6, 6), lam=0.05),
    dict(K=4, counts=(8, 4, 4, 2), widths=(2,), lam=1e-2),
    dict(K=4, counts=(8, 4, 4, 2), widths=(2, 2), lam=1e-2),
])
def test_canonical_minimizer_has_vanishing_deviations(kwargs):
    spec = make_spec(**kwargs)
    state, prediction = canonical(spec, seed=5)
    report = compare_to_theory(state, spec, prediction)
    for name, value in report.deviations().items():
        assert value < 1e-8, name


def test_gof_metrics_on_minimizer(imbalanced_deep):
    state, prediction = canonical(imbalanced_deep)
    report = measure(state, imbalanced_deep, "gof", prediction=prediction)
    assert report.nc2[0] < 1e-10
    assert report.nc3 < 1e-10


def test_duality_on_minimizer(imbalanced_deep):
    state, prediction = canonical(imbalanced_deep, seed=1)
    report = compare_to_theory(state, imbalanced_deep, prediction)
    assert np.all(report.duality_residuals < 1e-9)
    assert np.all(report.singular_value_deviation < 1e-9)


def test_measured_norm_ratios_match_closed_form():
    spec = make_spec(K=4, counts=(8, 4, 2, 2), widths=(6,), lam=1e-2)
    state, _ = canonical(spec)
    measured = measured_norm_ratios(state, spec)
    expected = norm_ratios(spec)
    assert_allclose(measured.classifier, expected.classifier, rtol=1e-8)
    assert_allclose(measured.feature, expected.feature, rtol=1e-8)


def test_full_collapse_compares_against_zero():
    spec = make_spec(K=3, counts=(3,) * 3, widths=(4, 4), lam=1.0)
    state, prediction = canonical(spec)
    report = compare_to_theory(state, spec, prediction)
    assert report.flavor is None
    assert report.nc1_degenerate
    assert "nc1" not in report.deviations()
    assert report.loss_gap == pytest.approx(0.0, abs=1e-15)
    assert report.to_dict()["nc1"] is None
    assert report.theory_deviation["feature_norm"] == 0.0


def test_shrinking_features_pass_full_collapse_comparison():
    spec = make_spec(K=3, counts=(3,) * 3, widths=(4, 4), lam=1.0)
    prediction = predict(spec)
    rng = np.random.default_rng(0)
    state = zero_state(spec)
    state = NetworkState(weights=state.weights, features=1e-9 * rng.standard_normal(state.features.shape))
    report = compare_to_theory(state, spec, prediction)
    assert math.isfinite(report.nc1) and report.nc1 > 1e-3
    deviations = report.deviations()
    assert "nc1" not in deviations
    assert deviations["feature_norm"] < 1e-8
    assert max(deviations.values()) < 1e-3
    assert not report.to_dict()["nc1_checked"]


def test_random_init_has_positive_loss_gap(balanced_deep):
    prediction = predict(balanced_deep)
    state = init_state(balanced_deep, 0)
    report = compare_to_theory(state, balanced_deep, prediction)
    assert report.loss_gap == pytest.approx(loss(state, balanced_deep) - prediction.predicted_loss)
    assert report.loss_gap > 0


def test_zero_state_against_of_prediction_is_degenerate(balanced_deep):
    with pytest.raises(DegenerateInputError):
        compare_to_theory(zero_state(balanced_deep), balanced_deep, predict(balanced_deep))


def test_compare_rejects_foreign_prediction(balanced_deep, imbalanced_deep):
    with pytest.raises(RegimeMismatchError):
        compare_to_theory(init_state(balanced_deep, 0), balanced_deep, predict(imbalanced_deep))


def test_ce_comparison_uses_fitted_duality():
    spec = make_spec(K=3, counts=(2,) * 3, widths=(3,), loss="ce", bias="last_unreg")
    prediction = predict(spec)
    Y = np.eye(3)[:, spec.labels]
    state = NetworkState(weights=(np.eye(3) - 1 / 3,), features=(np.eye(3) - 1 / 3) @ Y, bias=np.full(3, 0.7))
    report = compare_to_theory(state, spec, prediction)
    assert report.theory_deviation["ce_duality_max"] < 1e-12
    assert report.bias_deviation == pytest.approx(0.0, abs=1e-15)
    assert report.loss_gap is None
    assert report.nc2[0] < 1e-12 and report.nc3 < 1e-12


def test_deviation_table_is_relative_for_loss_and_singular_values(balanced_deep):
    prediction = predict(balanced_deep)
    report = compare_to_theory(init_state(balanced_deep, 0), balanced_deep, prediction)
    table = deviation_table(report, prediction).set_index("quantity")
    assert table.loc["loss_gap", "relative"]
    assert table.loc["loss_gap", "value"] == pytest.approx(report.loss_gap / prediction.predicted_loss)
    assert table.loc["singular_value_1", "relative"]
    assert not table.loc["nc3", "relative"]
