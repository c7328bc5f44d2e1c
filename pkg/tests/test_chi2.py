import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import chi2_quantile_by_quadrature
from unsyncse.chi2 import chi2_cdf, chi2_threshold, gammainc_lower

# published table values
TABLE = [(1, 0.95, 3.8415), (10, 0.95, 18.307), (100, 0.95, 124.342)]


@pytest.mark.parametrize("dof, p, value", TABLE)
def test_table_values(dof, p, value):
    assert abs(chi2_threshold(dof, p) - value) <= 1e-3


def test_quadrature_oracle_at_plan_sizes():
    for dof in (180, 195):
        assert abs(chi2_threshold(dof, 0.95) - chi2_quantile_by_quadrature(dof, 0.95)) <= 1e-3


def test_small_p_goes_to_zero():
    assert chi2_threshold(3, 1e-12) < 1e-6
    assert chi2_threshold(1, 1e-9) < chi2_threshold(1, 1e-6) < chi2_threshold(1, 1e-3)


@pytest.mark.parametrize("p", [0, 1, -0.1, 1.5])
def test_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        chi2_threshold(10, p)


@pytest.mark.parametrize("dof", [0, -3, 2.5])
def test_rejects_bad_dof(dof):
    with pytest.raises(ValueError):
        chi2_threshold(dof, 0.95)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2000), st.floats(1e-4, 1 - 1e-4))
def test_matches_reference_quantile(dof, p):
    assert chi2_threshold(dof, p) == pytest.approx(stats.chi2.ppf(p, dof), abs=1e-6, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 500), st.floats(0.0, 1500))
def test_incomplete_gamma(a, x):
    assert gammainc_lower(a, x) == pytest.approx(stats.gamma.cdf(x, a), abs=1e-10)


def test_cdf_inverts_threshold():
    for dof in (1, 7, 65, 195):
        assert chi2_cdf(chi2_threshold(dof, 0.95), dof) == pytest.approx(0.95, abs=1e-10)
