"""Simulate-then-fit acceptance runs.

These fit hundreds of models; deselect them with ``pytest -m "not slow"``.
"""

import numpy as np
import pytest
from scipy import stats

from bivariate_lmm.models import (
    DesignSpec,
    Method,
    MissingnessPattern,
    ModelSpec,
    RandomEffects,
    ResidualVariant,
)
from bivariate_lmm.simulate import null_lrt_statistics, recovery, truth_from_preset

pytestmark = pytest.mark.slow

AR1_MODEL = ModelSpec(DesignSpec(), RandomEffects.NONE, ResidualVariant.AR1_ERROR, method=Method.ML)
SLOPES_MODEL = ModelSpec(DesignSpec(), RandomEffects.SLOPES, ResidualVariant.GROUPED_DIAGONAL,
                         method=Method.ML)


def assert_recovered(report):
    failed = [row.name for row in report.rows if not row.passed]
    assert report.converged >= report.replicates - 2
    assert not failed, f"parameters outside 3 MC SE of truth: {failed}"


class TestRecovery:
    """Every parameter is recovered within 3 Monte-Carlo standard errors."""

    def test_ar1_error_model(self):
        truth = truth_from_preset("ar1-error", n_subjects=300, seed=20240601)
        assert_recovered(recovery(truth, AR1_MODEL, 20))

    def test_random_slopes_model(self):
        truth = truth_from_preset("random-slopes", n_subjects=300, seed=20240602)
        assert_recovered(recovery(truth, SLOPES_MODEL, 20))

    def test_ar1_error_model_with_dropout(self):
        truth = truth_from_preset("ar1-error", n_subjects=300, seed=20240603)
        assert_recovered(recovery(truth, AR1_MODEL, 20, MissingnessPattern("dropout", 0.2)))

    def test_ar1_error_model_with_intermittent_gaps(self):
        truth = truth_from_preset("ar1-error", n_subjects=300, seed=20240604)
        assert_recovered(recovery(truth, AR1_MODEL, 20, MissingnessPattern("intermittent", 0.2)))


class TestNullLikelihoodRatio:
    """LRT of the cross-marker random-effects block when it is truly zero."""

    def test_median_is_consistent_with_chi_square(self):
        truth = truth_from_preset("random-slopes", n_subjects=150, seed=77)
        G = truth.G.copy()
        G[:2, 2:] = 0.0
        G[2:, :2] = 0.0
        statistics = null_lrt_statistics(truth._replace(G=G), DesignSpec(), 20)
        assert np.all(statistics >= 0)
        assert np.median(statistics) < stats.chi2.median(4) + 1.5
