"""Shared fixtures for the bivariate_lmm test suite."""

import numpy as np
import pytest

from bivariate_lmm.data import build_design, make_dataset
from bivariate_lmm.models import (
    DesignSpec,
    LongRecord,
    Marker,
    ModelSpec,
    RandomEffects,
    ResidualVariant,
)
from bivariate_lmm.simulate import simulate, truth_from_preset

SPACING = 4.0


def random_dataset(rng, n_subjects, n_occasions=4, keep=0.8):
    """Small dataset with random responses and random missing records (>= 1 row per subject)."""
    records = []
    for s in range(n_subjects):
        subject_rows = []
        for marker in Marker:
            for occasion in range(1, n_occasions + 1):
                if rng.uniform() < keep:
                    subject_rows.append(LongRecord(
                        f"s{s}", marker, occasion * SPACING, occasion,
                        float(rng.normal(loc=1.0 + int(marker) * 5.0, scale=2.0)),
                    ))
        if not subject_rows:
            subject_rows.append(LongRecord(f"s{s}", Marker.M1, SPACING, 1, float(rng.normal())))
        records.extend(subject_rows)
    return make_dataset(records, SPACING)


def full_rank_instance(rng, spec, max_subjects=4, n_occasions=4):
    """Random designs (<= 8 rows per subject) with a full-rank fixed-effects design."""
    while True:
        dataset = random_dataset(rng, int(rng.integers(2, max_subjects + 1)), n_occasions)
        designs = build_design(dataset, spec.design)
        X = np.vstack([d.X for d in designs])
        if np.linalg.matrix_rank(X) == X.shape[1] and X.shape[0] > X.shape[1] + 1:
            return designs


MODEL_VARIANTS = {
    "random-slopes": ModelSpec(DesignSpec(), RandomEffects.SLOPES, ResidualVariant.GROUPED_DIAGONAL),
    "random-slopes-masked": ModelSpec(
        DesignSpec(), RandomEffects.SLOPES, ResidualVariant.GROUPED_DIAGONAL, independent=True
    ),
    "ar1-error": ModelSpec(DesignSpec(), RandomEffects.NONE, ResidualVariant.AR1_ERROR),
    "ar1-error-independent": ModelSpec(
        DesignSpec(), RandomEffects.NONE, ResidualVariant.AR1_ERROR, independent=True
    ),
    "ar1-only": ModelSpec(DesignSpec(), RandomEffects.NONE, ResidualVariant.AR1),
    "slopes-ar1": ModelSpec(DesignSpec(), RandomEffects.SLOPES, ResidualVariant.AR1_ERROR),
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def ar1_spec():
    return MODEL_VARIANTS["ar1-error"]


@pytest.fixture
def slopes_spec():
    return MODEL_VARIANTS["random-slopes"]


@pytest.fixture(scope="session")
def ar1_dataset():
    """Simulated cohort at the reported AR(1) scale (120 subjects, 6 occasions)."""
    truth = truth_from_preset("ar1-error", n_subjects=120, seed=11)
    return simulate(truth, DesignSpec())


@pytest.fixture(scope="session")
def slopes_dataset():
    """Simulated cohort from the bivariate random-slopes preset (150 subjects)."""
    truth = truth_from_preset("random-slopes", n_subjects=150, seed=5)
    return simulate(truth, DesignSpec())
