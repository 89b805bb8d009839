"""Unit tests for bivariate_lmm.inference module."""

import json
import math

import numpy as np
import pytest

from bivariate_lmm.errors import (
    ConfigError,
    InvalidArgumentError,
    InvalidBundleError,
    NestingViolationError,
)
from bivariate_lmm.inference import (
    aic,
    compare_models,
    cov_to_corr,
    likelihood_ratio_test,
    load_summaries,
    parameter_count,
    sas_bundle_from_natural,
    sas_translate,
    summary_from_dict,
    summary_to_dict,
    wald_interval,
    wald_test,
)
from bivariate_lmm.models import Method, ModelSummary, SasOutputBundle
from tests.conftest import MODEL_VARIANTS

# Log-likelihood and parameter count of the four models fitted to the HIV cohort
COHORT_ROWS = [
    ("univariate random slopes", -25307, 12, 50638),
    ("bivariate random slopes", -25194, 16, 50420),
    ("univariate AR(1)", -25313, 10, 50646),
    ("bivariate AR(1)", -25183, 10, 50386),
]

BUNDLE = SasOutputBundle(un_entries=(1.54, -7.00, 195.0), exp_var_delta=3.11,
                         residual_r=3.42, ar1_cov=3.11)


def chi2_upper_tail(statistic, df):
    """Regularized upper incomplete gamma Q(df/2, statistic/2) by series or continued fraction."""
    a, x = df / 2.0, statistic / 2.0
    if x <= 0:
        return 1.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        n = 0
        while abs(term) > 1e-17 * abs(total):
            n += 1
            term *= x / (a + n)
            total += term
        return 1.0 - total * math.exp(log_prefix)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(log_prefix) * h


def summary(name, logl, k, method=Method.ML, fixed=("a", "b")):
    return ModelSummary(name, logl, k, method, fixed)


class TestAic:
    """Tests for aic function."""

    @pytest.mark.parametrize("name, logl, k, expected", COHORT_ROWS)
    def test_cohort_rows(self, name, logl, k, expected):
        assert aic(logl, k) == expected

    def test_negative_parameter_count(self):
        with pytest.raises(InvalidArgumentError):
            aic(-10.0, -1)


class TestParameterCount:
    """Tests for parameter_count function."""

    @pytest.mark.parametrize("variant, expected", [
        ("random-slopes-masked", 12),
        ("random-slopes", 16),
        ("ar1-error-independent", 10),
        ("ar1-error", 10),
        ("ar1-only", 8),
        ("slopes-ar1", 20),
    ])
    def test_counts(self, variant, expected):
        assert parameter_count(MODEL_VARIANTS[variant]) == expected


class TestLikelihoodRatioTest:
    """Tests for likelihood_ratio_test function."""

    def test_random_slopes_pair(self):
        result = likelihood_ratio_test(-25307, -25194, 4, "univariate", "bivariate")
        assert result.statistic == 226
        assert result.df == 4
        assert result.p_value < 1e-4
        assert result.null == "univariate"

    def test_equal_likelihoods(self):
        result = likelihood_ratio_test(0.0, 0.0, 1)
        assert result.statistic == 0.0
        assert result.p_value == pytest.approx(1.0)

    def test_five_percent_critical_value(self):
        result = likelihood_ratio_test(0.0, 1.9207, 1)
        assert result.statistic == pytest.approx(3.8414)
        assert result.p_value == pytest.approx(0.05, abs=1e-4)

    def test_matches_independent_tail_oracle(self):
        for df in range(1, 11):
            for statistic in np.linspace(0.0, 400.0, 81):
                result = likelihood_ratio_test(0.0, statistic / 2.0, df)
                assert result.p_value == pytest.approx(chi2_upper_tail(statistic, df), abs=1e-8)

    def test_slack_is_clamped_to_zero(self):
        assert likelihood_ratio_test(-10.0, -10.0 - 1e-8, 1).statistic == 0.0

    def test_alternative_fitting_worse(self):
        with pytest.raises(NestingViolationError):
            likelihood_ratio_test(-10.0, -12.0, 1)

    @pytest.mark.parametrize("df", [0, -1, 1.5])
    def test_invalid_df(self, df):
        with pytest.raises(InvalidArgumentError):
            likelihood_ratio_test(-10.0, -9.0, df)


class TestWald:
    """Tests for wald_test and wald_interval."""

    def test_two_sided_p_value(self):
        z, p = wald_test(1.96, 1.0)
        assert z == pytest.approx(1.96)
        assert p == pytest.approx(0.05, abs=1e-4)

    def test_strong_effect(self):
        _, p = wald_test(-7.0, 1.0)
        assert p < 1e-4

    def test_non_positive_se(self):
        with pytest.raises(InvalidArgumentError):
            wald_test(1.0, 0.0)

    def test_identity_interval(self):
        lower, upper = wald_interval(1.0, 0.5)
        assert lower == pytest.approx(1.0 - 1.959964 * 0.5, rel=1e-6)
        assert upper == pytest.approx(1.0 + 1.959964 * 0.5, rel=1e-6)

    def test_log_interval_stays_positive(self):
        lower, upper = wald_interval(0.1, 0.2, "log")
        assert 0 < lower < 0.1 < upper
        assert lower * upper == pytest.approx(0.01)

    def test_atanh_interval_stays_inside(self):
        lower, upper = wald_interval(0.91, 0.1, "atanh")
        assert -1 < lower < 0.91 < upper < 1

    def test_missing_se(self):
        lower, upper = wald_interval(1.0, math.nan, "log")
        assert math.isnan(lower) and math.isnan(upper)

    def test_unknown_transform(self):
        with pytest.raises(InvalidArgumentError):
            wald_interval(1.0, 0.1, "logit")


class TestCovToCorr:
    """Tests for cov_to_corr function."""

    def test_unit_diagonal(self):
        corr = cov_to_corr(np.array([[1.54, -7.0], [-7.0, 195.0]]))
        np.testing.assert_allclose(np.diag(corr), 1.0)
        assert corr[0, 1] == pytest.approx(-7.0 / math.sqrt(1.54 * 195.0))

    def test_zero_variance(self):
        with pytest.raises(InvalidArgumentError):
            cov_to_corr(np.diag([1.0, 0.0]))


class TestSasTranslate:
    """Tests for sas_translate and sas_bundle_from_natural."""

    def test_cohort_values(self):
        result = sas_translate(BUNDLE)
        assert result.sigma2_eps1 == pytest.approx(3.42 * math.exp(3.11), rel=1e-12)
        # printed inputs are rounded to two decimals; 77.00 is within their rounding band
        assert abs(result.sigma2_eps1 - 77.00) <= 0.5
        assert result.sigma2_eps2 == pytest.approx(0.15, abs=0.005)
        assert result.rho == pytest.approx(0.91, abs=0.005)
        np.testing.assert_allclose(result.C, [[1.54, -7.0], [-7.0, 195.0]])

    def test_zero_delta_gives_equal_variances(self):
        result = sas_translate(BUNDLE._replace(exp_var_delta=0.0))
        assert result.sigma2_eps1 == result.sigma2_eps2 == 3.42

    def test_variance_product_is_r_squared(self):
        result = sas_translate(BUNDLE)
        assert result.sigma2_eps1 * result.sigma2_eps2 == pytest.approx(3.42 ** 2)

    @pytest.mark.parametrize("changes", [
        {"residual_r": 0.0},
        {"residual_r": -1.0},
        {"ar1_cov": 3.42},
        {"ar1_cov": -4.0},
    ])
    def test_invalid_bundle(self, changes):
        with pytest.raises(InvalidBundleError):
            sas_translate(BUNDLE._replace(**changes))

    def test_bundle_from_natural_inverts(self):
        C = np.array([[1.54, -7.0], [-7.0, 195.0]])
        bundle = sas_bundle_from_natural(77.0, 0.15, 0.91, C)
        result = sas_translate(bundle)
        assert result.sigma2_eps1 == pytest.approx(77.0)
        assert result.sigma2_eps2 == pytest.approx(0.15)
        assert result.rho == pytest.approx(0.91)
        np.testing.assert_allclose(result.C, C)

    def test_bundle_from_bad_values(self):
        with pytest.raises(InvalidArgumentError):
            sas_bundle_from_natural(0.0, 1.0, 0.5, np.eye(2))
        with pytest.raises(InvalidArgumentError):
            sas_bundle_from_natural(1.0, 1.0, 1.0, np.eye(2))


class TestCompareModels:
    """Tests for compare_models function."""

    def test_cohort_table(self):
        summaries = [summary(name, logl, k) for name, logl, k, _ in COHORT_ROWS]
        report = compare_models(summaries, [("univariate random slopes", "bivariate random slopes")])
        assert report.aic == tuple(expected for *_, expected in COHORT_ROWS)
        assert len(report.tests) == 1
        assert report.tests[0].statistic == 226
        assert report.tests[0].df == 4

    def test_duplicate_names(self):
        with pytest.raises(InvalidArgumentError):
            compare_models([summary("a", -1.0, 2), summary("a", -2.0, 3)])

    def test_unknown_name(self):
        with pytest.raises(InvalidArgumentError):
            compare_models([summary("a", -1.0, 2)], [("a", "b")])

    def test_different_methods(self):
        rows = [summary("a", -2.0, 2), summary("b", -1.0, 3, Method.REML)]
        with pytest.raises(NestingViolationError, match="different methods"):
            compare_models(rows, [("a", "b")])

    def test_reml_with_different_fixed_effects(self):
        rows = [
            summary("a", -2.0, 2, Method.REML, ("x",)),
            summary("b", -1.0, 3, Method.REML, ("x", "y")),
        ]
        with pytest.raises(NestingViolationError, match="ML"):
            compare_models(rows, [("a", "b")])

    def test_ml_allows_different_fixed_effects(self):
        rows = [summary("a", -2.0, 2, fixed=("x",)), summary("b", -1.0, 3, fixed=("x", "y"))]
        assert compare_models(rows, [("a", "b")]).tests[0].statistic == 2.0

    def test_no_extra_parameters(self):
        rows = [summary("a", -2.0, 10), summary("b", -1.0, 10)]
        with pytest.raises(NestingViolationError):
            compare_models(rows, [("a", "b")])


class TestSummaries:
    """Tests for summary serialization and load_summaries."""

    def test_dict_round_trip(self):
        original = summary("a", -25183.0, 10, Method.REML)
        assert summary_from_dict(summary_to_dict(original)) == original

    def test_missing_fields(self):
        with pytest.raises(ConfigError):
            summary_from_dict({"name": "a"})

    def test_bad_method(self):
        with pytest.raises(ConfigError):
            summary_from_dict({"name": "a", "log_likelihood": -1, "parameter_count": 2, "method": "OLS"})

    def test_load_single_object(self, tmp_path):
        path = tmp_path / "one.json"
        path.write_text(json.dumps({"name": "a", "log_likelihood": -1.5, "parameter_count": 3}))
        rows = load_summaries(path)
        assert [(r.name, r.method) for r in rows] == [("a", Method.REML)]

    def test_load_list(self, tmp_path):
        path = tmp_path / "many.json"
        path.write_text(json.dumps([
            {"name": "a", "log_likelihood": -1.5, "parameter_count": 3},
            {"name": "b", "log_likelihood": -1.0, "parameter_count": 4},
        ]))
        assert [r.name for r in load_summaries(path)] == ["a", "b"]

    def test_load_fit_sidecar(self, tmp_path):
        path = tmp_path / "fits.json"
        path.write_text(json.dumps({"models": [
            {"summary": {"name": "a", "log_likelihood": -1.5, "parameter_count": 3, "method": "ML"}},
        ]}))
        assert load_summaries(path)[0].method is Method.ML

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_summaries(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_summaries(tmp_path / "missing.json")
