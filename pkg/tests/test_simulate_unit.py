"""Unit tests for bivariate_lmm.simulate module."""

import numpy as np
import pytest

from bivariate_lmm.covariance import (
    GroupedDiagonalError,
    KroneckerAR1,
    RandomEffectsCov,
    ResidualStructure,
    build_marginal_cov,
)
from bivariate_lmm.data import build_design, make_dataset
from bivariate_lmm.errors import InvalidArgumentError
from bivariate_lmm.models import (
    DesignSpec,
    LongRecord,
    Marker,
    Method,
    MissingnessPattern,
    ModelSpec,
    RandomEffects,
    ResidualVariant,
)
from bivariate_lmm.simulate import (
    apply_mar_missingness,
    missingness_from_dict,
    recovery,
    simulate,
    standard_normals,
    subject_generators,
    summarize_recovery,
    true_parameters,
    truth_from_dict,
    truth_from_preset,
    truth_to_dict,
    validate_truth,
)
from tests.conftest import MODEL_VARIANTS, SPACING


def responses_by_subject(dataset):
    """Matrix of responses, one row per subject (complete data only)."""
    return np.array([[r.response for r in records] for records in dataset.by_subject().values()])


def grid_dataset(n_subjects, occasions):
    records = [
        LongRecord(f"s{s:04d}", marker, SPACING * o, o, 1.0)
        for s in range(n_subjects)
        for marker in Marker
        for o in occasions
    ]
    return make_dataset(records, SPACING)


class TestGenerators:
    """Tests for subject_generators and standard_normals."""

    def test_reproducible(self):
        first = [rng.uniform() for rng in subject_generators(3, 4)]
        second = [rng.uniform() for rng in subject_generators(3, 4)]
        assert first == second
        assert len(set(first)) == 4

    def test_standard_normal_moments(self):
        draws = standard_normals(np.random.default_rng(1), 200000)
        assert np.all(np.isfinite(draws))
        assert abs(draws.mean()) < 0.01
        assert abs(draws.std() - 1.0) < 0.01


class TestSimulate:
    """Tests for simulate function."""

    def test_pure_noise_has_identity_covariance(self):
        truth = truth_from_dict({"beta": [0, 0, 0, 0], "errors": [1, 1]},
                                n_subjects=5000, occasions=(1, 2, 3), seed=2)
        Y = responses_by_subject(simulate(truth, DesignSpec()))
        assert Y.shape == (5000, 6)
        np.testing.assert_allclose(np.cov(Y, rowvar=False), np.eye(6), atol=0.08)

    def test_serial_process_lag_one_correlation(self):
        truth = truth_from_dict(
            {"beta": [0, 0, 0, 0], "errors": [0, 0], "serial": {"C": [[1, 0.3], [0.3, 2]], "rho": 0.91}},
            n_subjects=2000, occasions=(1, 2, 3, 4), seed=3,
        )
        Y = responses_by_subject(simulate(truth, DesignSpec()))
        marker1 = Y[:, :4]
        lag_one = np.mean([np.corrcoef(marker1[:, j], marker1[:, j + 1])[0, 1] for j in range(3)])
        assert lag_one == pytest.approx(0.91, abs=0.03)
        assert np.var(Y[:, 4], ddof=1) == pytest.approx(2.0, rel=0.15)

    def test_covariance_matches_marginal_model(self):
        truth = truth_from_preset(
            "random-slopes", n_subjects=10000, occasions=(1, 2, 3), seed=6,
            serial={"C": [[0.5, -2.0], [-2.0, 60.0]], "rho": 0.7},
        )
        designs = build_design(simulate(truth, DesignSpec()), DesignSpec())
        Y = np.array([d.y for d in designs])
        residual = ResidualStructure(
            ResidualVariant.AR1_ERROR, truth.serial, GroupedDiagonalError(*truth.errors)
        )
        V = build_marginal_cov(designs[0], RandomEffectsCov(4, None, np.asarray(truth.G)), residual)
        scale = 1.0 / np.sqrt(np.diag(V))
        empirical = np.cov(Y, rowvar=False) * np.outer(scale, scale)
        np.testing.assert_allclose(empirical, V * np.outer(scale, scale), atol=0.06)

    def test_mean_follows_fixed_effects(self):
        truth = truth_from_preset("ar1-error", n_subjects=3000, seed=4)
        Y = responses_by_subject(simulate(truth, DesignSpec()))
        # occasion 6 is 24 months: T1 = 4, T2 = 20
        assert Y[:, 5].mean() == pytest.approx(-0.49 * 4 + 0.005 * 20, abs=0.1)
        assert Y[:, 11].mean() == pytest.approx(24.0 * 4 + 4.0 * 20, abs=1.5)

    def test_same_seed_same_data(self):
        truth = truth_from_preset("random-slopes", n_subjects=10, seed=9)
        assert simulate(truth, DesignSpec()) == simulate(truth, DesignSpec())
        other = simulate(truth._replace(seed=10), DesignSpec())
        assert other != simulate(truth, DesignSpec())

    def test_subject_ids_are_zero_padded(self):
        truth = truth_from_preset("ar1-error", n_subjects=120, seed=1)
        ids = simulate(truth, DesignSpec()).subject_ids
        assert ids[0] == "S001"
        assert ids[-1] == "S120"

    def test_complete_data(self):
        truth = truth_from_preset("ar1-error", n_subjects=5, seed=1)
        dataset = simulate(truth, DesignSpec())
        assert len(dataset) == 5 * 2 * 6

    def test_invalid_truth(self):
        truth = truth_from_preset("ar1-error", n_subjects=5)
        with pytest.raises(InvalidArgumentError):
            simulate(truth._replace(beta=np.zeros(3)), DesignSpec())
        with pytest.raises(InvalidArgumentError):
            simulate(truth._replace(errors=(-1.0, 1.0)), DesignSpec())
        with pytest.raises(InvalidArgumentError):
            simulate(truth._replace(occasions=(1, 1)), DesignSpec())
        with pytest.raises(InvalidArgumentError):
            simulate(truth._replace(n_subjects=0), DesignSpec())


class TestMissingness:
    """Tests for apply_mar_missingness function."""

    def test_intermittent_rate(self):
        dataset = grid_dataset(1000, [1, 2, 3, 4, 5])
        assert len(dataset) == 10000
        thinned = apply_mar_missingness(dataset, MissingnessPattern("intermittent", 0.2), seed=5)
        assert 1850 <= len(dataset) - len(thinned) <= 2150

    def test_baseline_is_never_removed(self):
        dataset = grid_dataset(200, [0, 1, 2])
        for kind in ("intermittent", "dropout"):
            thinned = apply_mar_missingness(dataset, MissingnessPattern(kind, 0.9), seed=6)
            baseline = [r for r in thinned.records if r.occasion == 0]
            assert len(baseline) == 400

    def test_dropout_is_monotone(self):
        dataset = grid_dataset(300, [1, 2, 3, 4, 5, 6])
        thinned = apply_mar_missingness(dataset, MissingnessPattern("dropout", 0.2), seed=7)
        assert len(thinned) < len(dataset)
        for records in thinned.by_subject().values():
            for marker in Marker:
                occasions = [r.occasion for r in records if r.marker == marker]
                assert occasions == list(range(1, len(occasions) + 1))

    def test_zero_rate_keeps_everything(self):
        dataset = grid_dataset(10, [1, 2])
        assert apply_mar_missingness(dataset, MissingnessPattern("dropout", 0.0), seed=1) == dataset

    def test_reproducible(self):
        dataset = grid_dataset(50, [1, 2, 3])
        pattern = MissingnessPattern("intermittent", 0.3)
        assert apply_mar_missingness(dataset, pattern, 8) == apply_mar_missingness(dataset, pattern, 8)

    @pytest.mark.parametrize("pattern", [
        MissingnessPattern("random", 0.1),
        MissingnessPattern("dropout", 1.0),
        MissingnessPattern("dropout", -0.1),
    ])
    def test_invalid(self, pattern):
        with pytest.raises(InvalidArgumentError):
            apply_mar_missingness(grid_dataset(2, [1]), pattern, seed=1)

    def test_from_dict(self):
        assert missingness_from_dict({"kind": "dropout", "rate": "0.2"}) == MissingnessPattern("dropout", 0.2)
        assert missingness_from_dict(None) is None
        with pytest.raises(InvalidArgumentError):
            missingness_from_dict({"kind": "dropout"})


class TestTruth:
    """Tests for truth presets and conversions."""

    def test_presets(self):
        ar1 = truth_from_preset("ar1-error")
        assert ar1.G is None
        assert ar1.serial.rho == 0.91
        assert ar1.errors == (0.15, 77.0)
        slopes = truth_from_preset("random-slopes")
        assert slopes.serial is None
        assert slopes.G.shape == (4, 4)

    def test_preset_overrides(self):
        truth = truth_from_preset("ar1-error", n_subjects=7, seed=3, occasions=[1, 2])
        assert (truth.n_subjects, truth.seed, truth.occasions) == (7, 3, (1, 2))

    def test_unknown_preset(self):
        with pytest.raises(InvalidArgumentError):
            truth_from_preset("ou-process")

    def test_dict_round_trip(self):
        truth = truth_from_preset("ar1-error", n_subjects=12, seed=4)
        again = truth_from_dict(truth_to_dict(truth))
        np.testing.assert_array_equal(again.beta, truth.beta)
        np.testing.assert_array_equal(again.serial.C, truth.serial.C)
        assert again.serial.rho == truth.serial.rho
        assert again._replace(beta=None, serial=None) == truth._replace(beta=None, serial=None)

    def test_per_marker_rho(self):
        truth = truth_from_dict({
            "beta": [0, 0, 0, 0], "errors": [1, 1],
            "serial": {"C": [[1, 0], [0, 2]], "rho": [0.5, 0.8]},
        })
        assert truth.serial.rho == (0.5, 0.8)
        assert truth_to_dict(truth)["serial"]["rho"] == [0.5, 0.8]

    def test_missing_fields(self):
        with pytest.raises(InvalidArgumentError):
            truth_from_dict({"beta": [0, 0, 0, 0]})

    def test_validate_rejects_indefinite_g(self):
        truth = truth_from_preset("random-slopes")
        with pytest.raises(InvalidArgumentError):
            validate_truth(truth._replace(G=-np.eye(4)), DesignSpec())

    def test_true_parameters(self):
        truth = truth_from_preset("ar1-error")
        names, values = true_parameters(truth, MODEL_VARIANTS["ar1-error"])
        assert names[:4] == ("M1:T1", "M1:T2", "M2:T1", "M2:T2")
        assert names[4:] == ("C(M1,M1)", "C(M2,M1)", "C(M2,M2)", "rho",
                             "sigma2_eps(M1)", "sigma2_eps(M2)")
        np.testing.assert_allclose(values, [-0.49, 0.005, 24.0, 4.0, 1.54, -7.0, 195.0, 0.91, 0.15, 77.0])


class TestRecovery:
    """Tests for summarize_recovery and recovery."""

    def test_summary_statistics(self):
        estimates = [[1.0, 10.0], [3.0, 10.0], [2.0, 13.0]]
        report = summarize_recovery(("a", "b"), [2.0, 10.0], estimates, 50, 4)
        a, b = report.rows
        assert a.mean == pytest.approx(2.0)
        assert a.bias == pytest.approx(0.0)
        assert a.mc_se == pytest.approx(1.0 / np.sqrt(3))
        assert a.passed
        assert b.bias == pytest.approx(1.0)
        assert b.mc_se == pytest.approx(np.sqrt(3.0) / np.sqrt(3))
        assert b.passed
        assert (report.replicates, report.converged, report.n_subjects) == (4, 3, 50)

    def test_large_bias_fails(self):
        report = summarize_recovery(("a",), [0.0], [[1.0], [1.1], [0.9]], 10, 3)
        assert not report.passed

    def test_no_converged_replicates(self):
        report = summarize_recovery(("a",), [0.0], [], 10, 3)
        assert report.converged == 0
        assert not report.passed

    def test_small_run(self):
        truth = truth_from_preset("ar1-error", n_subjects=40, seed=21)
        spec = ModelSpec(DesignSpec(), RandomEffects.NONE, ResidualVariant.AR1_ERROR, method=Method.ML)
        seen = []
        report = recovery(truth, spec, 3, MissingnessPattern("intermittent", 0.2), callback=seen.append)
        assert seen == [1, 2, 3]
        assert len(report.rows) == 10
        assert report.replicates == 3
        assert report.n_subjects == 40
        assert report.rows[0].name == "M1:T1"

    def test_invalid_replicates(self):
        with pytest.raises(InvalidArgumentError):
            recovery(truth_from_preset(), MODEL_VARIANTS["ar1-error"], 0)


class TestKroneckerTruth:
    """Truths with serial processes must satisfy the serial invariants."""

    def test_rho_out_of_range(self):
        truth = truth_from_preset("ar1-error")
        with pytest.raises(InvalidArgumentError):
            validate_truth(truth._replace(serial=KroneckerAR1(np.eye(2), 1.2)), DesignSpec())
