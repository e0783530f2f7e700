import pytest

from scdm.verify import check_marginal, check_prop1, check_prop2, run_checks


def test_prop1_report():
    rep = check_prop1(products=(651.3,), T=50)
    assert rep["passed"] and rep["reports"][0]["small_eta_error"] < 1e-5


def test_prop2_report():
    rep = check_prop2(n_classifiers=20)
    assert rep["passed"] and rep["max_analytic_error"] < 1e-10


def test_marginal_report():
    rep = check_marginal()
    assert rep["passed"] and rep["max_abs_error"] < 1e-12


def test_run_checks_validation():
    with pytest.raises(ValueError):
        run_checks([])
    with pytest.raises(ValueError):
        run_checks(["prop1", "nope"])


@pytest.mark.slow
def test_all_targets_under_a_minute():
    rep = run_checks(["prop1", "prop2", "marginal", "trajectory", "oracle", "gradcheck"])
    assert rep["passed"]
    assert sum(c["seconds"] for c in rep["checks"].values()) < 60
