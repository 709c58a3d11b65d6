import pytest

from services.checks import (
    CheckReport,
    check_algebra,
    check_equivariance,
    check_grad,
    check_universality,
    universality_trial,
)
from services.errors import PropertyViolation


def test_algebra_suite_passes():
    report = check_algebra(trials=50, seed=1)
    assert report.passed
    assert report.worst <= 1e-12
    assert report.details["associativity_failures"] == 0


def test_equivariance_suite_passes_and_gnn_fails_it():
    report = check_equivariance(trials=3, seed=2)
    assert report.passed, report.summary_line()
    assert float(report.details["gnn_counterexample"]) > 1e-3
    assert set(report.details) >= {"cgegnn_vector", "cgegnn_scalar", "egnn_vector", "egnn_scalar"}


def test_grad_suite_passes():
    report = check_grad(trials=10, seed=3)
    assert report.passed, report.summary_line()
    assert len(report.details) == 11
    assert {"fc_geom_product", "cgegnn_vector", "gnn_scalar"} <= set(report.details)


def test_universality_suite_passes():
    report = check_universality(trials=10, seed=4)
    assert report.passed, report.summary_line()
    assert report.details["cases"] == 12
    assert float(report.details["max_hausdorff_ratio"]) <= 1.0


def test_universality_trial_on_a_line(rng):
    res = universality_trial(rng, 4, 3, 1)
    assert res["coverage"] and res["recovery"]
    assert res["hausdorff"] <= 0.5 / 4


def test_threads_do_not_change_results():
    assert check_algebra(trials=8, seed=5).worst == check_algebra(trials=8, seed=5, threads=4).worst


def test_summary_line_and_failure():
    report = CheckReport("grad", 5, 1e-4, 2e-3, False, {"gnn_vector": "2.00e-03"})
    line = report.summary_line()
    assert line.startswith("check kind=grad status=FAIL trials=5 worst=2.000e-03 tol=0.0001")
    assert line.endswith("gnn_vector=2.00e-03")
    with pytest.raises(PropertyViolation):
        report.raise_on_failure()
    CheckReport("grad", 5, 1e-4, 0.0, True).raise_on_failure()
