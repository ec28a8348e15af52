"""Solver behavior: grouping, recovery on clean data, exact shift equivariance."""

import numpy as np
import pytest

from pkgee import (
    DEFAULT_INTERCEPTS,
    EvalFailure,
    Genotype,
    InfusionSpec,
    NotConverged,
    ScenarioConfig,
    SingularInformation,
    SolverConfig,
    SubjectRecord,
    WorkingModel,
    generate_dataset,
    initialize,
    score_and_info,
    solve,
    true_beta,
)
from conftest import STUDY_INF, make_dataset

TIMES = np.array([0.1, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 4.5])


class TestSubjectRecord:
    def test_time_zero_rejected(self):
        with pytest.raises(ValueError, match="> 0"):
            SubjectRecord("A", STUDY_INF, [0.0, 1.0], [1.0, 1.0], Genotype.aa)

    def test_non_increasing_times_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            SubjectRecord("A", STUDY_INF, [1.0, 1.0], [1.0, 1.0], Genotype.aa)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="lengths"):
            SubjectRecord("A", STUDY_INF, [1.0, 2.0], [1.0], Genotype.aa)

    def test_non_finite_response_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            SubjectRecord("A", STUDY_INF, [1.0], [np.nan], Genotype.aa)

    def test_arrays_frozen(self, scenario1_data):
        rec = scenario1_data[0]
        with pytest.raises(ValueError):
            rec.times[0] = 9.0


class TestWorkingModel:
    def test_defaults_accepted(self):
        wm = WorkingModel()
        assert wm.scale_phi == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"variance_function": "poisson"},
            {"working_correlation": "exchangeable"},
            {"scale_phi": 2.0},
            {"xi": 1.0},
            {"alpha": 0.3},
        ],
    )
    def test_other_structures_rejected(self, kwargs):
        with pytest.raises(ValueError):
            WorkingModel(**kwargs)


class TestInitialize:
    def test_default_intercepts(self, scenario1_data):
        beta = initialize(scenario1_data)
        assert tuple(beta[[0, 3, 6, 9]]) == DEFAULT_INTERCEPTS
        assert np.all(beta[[1, 2, 4, 5, 7, 8, 10, 11]] == 0)

    def test_four_intercepts(self, scenario1_data):
        beta = initialize(scenario1_data, (1.0, 2.0, 3.0, 4.0))
        assert tuple(beta[[0, 3, 6, 9]]) == (1.0, 2.0, 3.0, 4.0)

    def test_full_vector_verbatim(self, scenario1_data):
        full = np.arange(12.0)
        np.testing.assert_array_equal(initialize(scenario1_data, full), full)

    def test_bad_shape_rejected(self, scenario1_data):
        with pytest.raises(ValueError):
            initialize(scenario1_data, (1.0, 2.0))

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError):
            initialize([])


class TestGroupingAndScore:
    def test_one_group_per_genotype_on_shared_grid(self, scenario1_fit):
        assert len(scenario1_fit.groups) == 3
        assert sum(g.m for g in scenario1_fit.groups) == 100

    def test_subjects_with_distinct_grids_split(self, scenario1_data):
        custom = SubjectRecord(
            "X", STUDY_INF, TIMES + 0.01, np.zeros(TIMES.size), Genotype.aa
        )
        fit = solve(list(scenario1_data) + [custom], WorkingModel())
        assert len(fit.groups) == 4

    def test_score_zero_at_solution(self, scenario1_data, scenario1_fit):
        u, info = score_and_info(
            scenario1_data, scenario1_fit.beta_hat, WorkingModel()
        )
        scale = 1.0 + np.max(np.abs(scenario1_fit.beta_hat))
        assert np.max(np.abs(u)) <= 1e-8 * scale
        np.testing.assert_allclose(info, info.T, atol=1e-9)
        assert np.all(np.linalg.eigvalsh(info) > 0)

    def test_info_zero_on_dropped_columns(self):
        data = make_dataset()
        aa_only = [r for r in data if r.genotype is Genotype.aa]
        fit = solve(aa_only, WorkingModel())
        assert fit.dropped_columns == frozenset({1, 2, 4, 5, 7, 8, 10, 11})
        assert np.all(np.isnan(fit.beta_hat[[1, 2]]))
        dropped = sorted(fit.dropped_columns)
        assert np.all(fit.info0[dropped, :] == 0)

    @pytest.mark.parametrize(
        "intercepts",
        [
            (3.72, 1.38, -1.89, 800.0),    # exp() overflow
            (3.72, 1.38, -1.89, -800.0),   # exp() underflow to 0.0
            (3.72, 1.38, -1.89, -380.0),   # squared root products underflow
            (-720.0, 1.38, -1.89, -0.35),  # k0/vd overflows the curve
        ],
    )
    def test_float_range_overrun_surfaces_as_eval_failure(
        self, scenario1_data, intercepts
    ):
        # log-parameters that push any part of the evaluation out of float
        # range must fail like any other non-evaluable point, not leak
        # OverflowError/ZeroDivisionError past the solver
        beta = np.zeros(12)
        beta[[0, 3, 6, 9]] = intercepts
        with pytest.raises(EvalFailure):
            score_and_info(scenario1_data, beta, WorkingModel())


class TestSolve:
    def test_recovers_noise_free_null_coefficients(self):
        cfg = ScenarioConfig(
            scenario_id=1, n_replicates=1, seed=0, sigma=0.0, tau=(0.0, 0.0, 0.0)
        )
        data = generate_dataset(cfg, 0)
        fit = solve(data, WorkingModel())
        assert fit.converged
        np.testing.assert_allclose(fit.beta_hat, true_beta(cfg), atol=1e-8)
        assert fit.final_score_norm <= 1e-8

    def test_recovers_noise_free_effects(self):
        cfg = ScenarioConfig(
            scenario_id=6, n_replicates=1, seed=0, sigma=0.0, tau=(0.0, 0.0, 0.0)
        )
        data = generate_dataset(cfg, 0)
        fit = solve(data, WorkingModel())
        np.testing.assert_allclose(fit.beta_hat, true_beta(cfg), atol=1e-8)

    def test_converged_fit_reports_score_norm(self, scenario1_fit):
        assert scenario1_fit.converged
        assert scenario1_fit.final_score_norm <= 1e-8 * (
            1.0 + np.max(np.abs(scenario1_fit.beta_hat))
        )
        assert scenario1_fit.iterations >= 1

    def test_warm_start_converges_immediately(self, scenario1_data, scenario1_fit):
        cfg = SolverConfig(init=scenario1_fit.beta_hat)
        refit = solve(scenario1_data, WorkingModel(), cfg)
        assert refit.iterations == 0
        np.testing.assert_array_equal(refit.beta_hat, scenario1_fit.beta_hat)

    def test_iteration_budget_enforced(self, scenario1_data):
        cfg = SolverConfig(max_iterations=1, init=(5.0, 3.0, -4.0, -2.0))
        with pytest.raises(NotConverged):
            solve(scenario1_data, WorkingModel(), cfg)

    def test_single_observation_fit_is_singular(self):
        recs = [
            SubjectRecord(f"S{i}", STUDY_INF, [1.0], [3.0], Genotype.aa)
            for i in range(3)
        ]
        with pytest.raises(SingularInformation):
            solve(recs, WorkingModel())

    def test_overflowing_start_raises_eval_failure(self, scenario1_data):
        cfg = SolverConfig(init=(3.72, 1.38, -1.89, 800.0))
        with pytest.raises(EvalFailure):
            solve(scenario1_data, WorkingModel(), cfg)

    def test_subject_order_does_not_change_solution(self, scenario1_data):
        fit = solve(scenario1_data, WorkingModel())
        shuffled = list(scenario1_data)
        rng = np.random.default_rng(0)
        rng.shuffle(shuffled)
        refit = solve(shuffled, WorkingModel())
        np.testing.assert_allclose(refit.beta_hat, fit.beta_hat, atol=1e-12)


class TestShiftEquivariance:
    """The log-V_d column of the working model is linear with constant
    gradient, so adding a constant to the generator's log-V_d for a genotype
    moves the fitted V_d effect by exactly that constant and nothing else."""

    @pytest.mark.parametrize("replicate", [0, 1, 2])
    def test_vd_effect_scenario_shifts_estimates_only(self, replicate):
        null_fit = solve(make_dataset(1, replicate=replicate), WorkingModel())
        effect_fit = solve(make_dataset(4, replicate=replicate), WorkingModel())
        delta = 0.05 * 3.72
        diff = effect_fit.beta_hat - null_fit.beta_hat
        assert diff[1] == pytest.approx(delta, abs=1e-9)
        assert diff[2] == pytest.approx(delta, abs=1e-9)
        others = [j for j in range(12) if j not in (1, 2)]
        np.testing.assert_allclose(diff[others], 0.0, atol=1e-9)

    def test_residuals_and_information_invariant(self):
        null_fit = solve(make_dataset(1), WorkingModel())
        effect_fit = solve(make_dataset(4), WorkingModel())
        np.testing.assert_allclose(
            effect_fit.info0, null_fit.info0, rtol=1e-6, atol=1e-9
        )
        for a, b in zip(effect_fit.s_hat, null_fit.s_hat):
            np.testing.assert_allclose(a, b, atol=1e-9)
