"""Dataset generation, scenario configuration, and study aggregation."""

import csv

import numpy as np
import pytest

from pkgee import (
    EvalFailure,
    Genotype,
    InfusionSpec,
    PkParams,
    ScenarioConfig,
    STUDY_INTERCEPTS,
    STUDY_TIMES,
    UnsupportedGrid,
    format_summary,
    generate_dataset,
    genotype_counts,
    log_concentration,
    run_study,
    true_beta,
    write_summary_csv,
)
from pkgee.sim_harness import draw_random_effects, _replicate_rng


class TestGenotypeCounts:
    def test_study_grid_values(self):
        assert genotype_counts(0.25, 100) == (56, 37, 7)
        assert genotype_counts(0.50, 100) == (25, 50, 25)

    def test_off_grid_requires_opt_in(self):
        with pytest.raises(UnsupportedGrid):
            genotype_counts(0.25, 2000)
        with pytest.raises(UnsupportedGrid):
            genotype_counts(0.30, 100)

    def test_exact_hardy_weinberg_needs_no_rounding(self):
        assert genotype_counts(0.25, 2000, allow_rounding=True) == (1125, 750, 125)

    def test_largest_remainder_rounding(self):
        # 0.1: expected (8.1, 1.8, 0.1) -> leftover seat goes to Aa
        assert genotype_counts(0.10, 10, allow_rounding=True) == (8, 2, 0)
        # 0.3: expected (4.9, 4.2, 0.9) -> remainder tie broken toward aa
        assert genotype_counts(0.30, 10, allow_rounding=True) == (5, 4, 1)

    def test_counts_partition_sample(self):
        for maf in (0.05, 0.17, 0.25, 0.33, 0.5):
            for n in (17, 100, 1003):
                counts = genotype_counts(maf, n, allow_rounding=True)
                assert sum(counts) == n
                assert all(c >= 0 for c in counts)


class TestRandomEffects:
    def draws(self, scenario_id, n=200_000, tau=(0.12, 0.68, 0.89)):
        cfg = ScenarioConfig(scenario_id=scenario_id, tau=tau)
        return cfg, draw_random_effects(cfg, np.random.default_rng(7), size=n)

    def test_shapes(self):
        cfg = ScenarioConfig(scenario_id=1)
        rng = np.random.default_rng(0)
        assert draw_random_effects(cfg, rng).shape == (3,)
        assert draw_random_effects(cfg, rng, size=5).shape == (5, 3)

    def test_normal_moments(self):
        cfg, g = self.draws(1)
        np.testing.assert_allclose(g.mean(axis=0), 0.0, atol=0.01)
        np.testing.assert_allclose(g.std(axis=0), cfg.tau, rtol=0.02)

    def test_uniform_moments_and_support(self):
        cfg, g = self.draws(2)
        half = np.sqrt(3.0) * np.asarray(cfg.tau)
        np.testing.assert_allclose(g.mean(axis=0), 0.0, atol=0.01)
        np.testing.assert_allclose(g.var(axis=0), np.square(cfg.tau), rtol=0.03)
        assert np.all(np.abs(g) <= half)
        np.testing.assert_allclose(np.abs(g).max(axis=0), half, rtol=0.001)

    def test_gamma_moments_uncentered(self):
        # mean and variance both tau^2; the nonzero mean is intentional
        cfg, g = self.draws(3, n=1_000_000)
        tau_sq = np.square(cfg.tau)
        assert np.all(g >= 0.0)
        np.testing.assert_allclose(g.mean(axis=0), tau_sq, rtol=0.05)
        np.testing.assert_allclose(g.var(axis=0), tau_sq, rtol=0.08)

    def test_gamma_zero_component_stays_zero(self):
        cfg = ScenarioConfig(scenario_id=3, tau=(0.0, 0.5, 0.0))
        g = draw_random_effects(cfg, np.random.default_rng(3), size=100)
        assert np.all(g[:, 0] == 0.0) and np.all(g[:, 2] == 0.0)
        assert np.all(g[:, 1] > 0.0)

    def test_replicate_streams_are_independent_jumps(self):
        cfg = ScenarioConfig(scenario_id=1, seed=99)
        a = _replicate_rng(cfg, 0).normal(size=4)
        b = _replicate_rng(cfg, 1).normal(size=4)
        a_again = _replicate_rng(cfg, 0).normal(size=4)
        np.testing.assert_array_equal(a, a_again)
        assert not np.array_equal(a, b)


class TestTrueBeta:
    def test_null_scenarios(self):
        for sid in (1, 2, 3):
            beta = true_beta(ScenarioConfig(scenario_id=sid))
            np.testing.assert_array_equal(beta[[0, 3, 6, 9]], STUDY_INTERCEPTS)
            assert np.all(beta[[1, 2, 4, 5, 7, 8, 10, 11]] == 0.0)

    @pytest.mark.parametrize(
        "sid,slots,value",
        [
            (4, (1, 2), 0.05 * 3.72),
            (5, (4, 5), 0.05 * 1.38),
            (6, (7, 8), 0.30 * -1.89),
            (7, (10, 11), 0.50 * -0.35),
        ],
    )
    def test_effect_scenarios(self, sid, slots, value):
        beta = true_beta(ScenarioConfig(scenario_id=sid))
        for j in slots:
            assert beta[j] == pytest.approx(value, rel=1e-12)
        others = [j for j in (1, 2, 4, 5, 7, 8, 10, 11) if j not in slots]
        assert np.all(beta[others] == 0.0)


class TestScenarioConfig:
    def test_family_defaults(self):
        assert ScenarioConfig(scenario_id=1).random_effect_family == "normal"
        assert ScenarioConfig(scenario_id=2).random_effect_family == "uniform"
        assert ScenarioConfig(scenario_id=3).random_effect_family == "gamma"
        for sid in (4, 5, 6, 7):
            assert ScenarioConfig(scenario_id=sid).random_effect_family == "normal"

    def test_null_scenarios_have_zero_multipliers(self):
        assert np.all(ScenarioConfig(scenario_id=2).effect_multipliers == 0.0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"scenario_id": 0},
            {"scenario_id": 8},
            {"scenario_id": 1, "maf": 0.6},
            {"scenario_id": 1, "maf": 0.0},
            {"scenario_id": 1, "sigma": -0.1},
            {"scenario_id": 1, "tau": (0.1, 0.2)},
            {"scenario_id": 1, "tau": (0.1, -0.2, 0.3)},
            {"scenario_id": 1, "times": (1.0, 1.0, 2.0)},
            {"scenario_id": 1, "times": (0.0, 1.0)},
            {"scenario_id": 1, "n_replicates": 0},
            {"scenario_id": 1, "random_effect_family": "cauchy"},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ScenarioConfig(**kwargs)


class TestGenerateDataset:
    def test_deterministic_per_replicate(self):
        cfg = ScenarioConfig(scenario_id=2, n_replicates=3, seed=11)
        first = generate_dataset(cfg, 1)
        again = generate_dataset(cfg, 1)
        other = generate_dataset(cfg, 2)
        for a, b in zip(first, again):
            assert a.subject_id == b.subject_id
            np.testing.assert_array_equal(a.log_conc, b.log_conc)
        assert not np.array_equal(first[0].log_conc, other[0].log_conc)

    def test_block_layout_and_ids(self):
        data = generate_dataset(ScenarioConfig(scenario_id=1), 0)
        assert len(data) == 100
        assert [r.genotype for r in data[:56]] == [Genotype.aa] * 56
        assert [r.genotype for r in data[56:93]] == [Genotype.Aa] * 37
        assert [r.genotype for r in data[93:]] == [Genotype.AA] * 7
        assert data[0].subject_id == "S001"
        assert data[99].subject_id == "S100"
        np.testing.assert_array_equal(data[0].times, STUDY_TIMES)
        assert data[0].inf == InfusionSpec(1400.0, 0.5)

    def test_realized_params_reported(self):
        stats = {}
        cfg = ScenarioConfig(scenario_id=1, seed=5)
        generate_dataset(cfg, 0, stats)
        params = stats["params"]
        assert params.shape == (100, 4)
        # no random effect touches log K_el: column is the intercept exactly
        assert np.all(params[:, 1] == 1.38)
        assert params[:, 0].std() > 0.0

    def test_noiseless_records_match_reported_params(self):
        stats = {}
        cfg = ScenarioConfig(scenario_id=1, seed=5, sigma=0.0)
        data = generate_dataset(cfg, 0, stats)
        for i in (0, 60, 99):
            want = log_concentration(
                PkParams(*stats["params"][i]), data[i].inf, data[i].times
            )
            np.testing.assert_array_equal(data[i].log_conc, want)

    def test_effect_scenario_shifts_realized_params(self):
        s1, s4 = {}, {}
        generate_dataset(ScenarioConfig(scenario_id=1, seed=17), 0, s1)
        generate_dataset(ScenarioConfig(scenario_id=4, seed=17), 0, s4)
        shift = true_beta(ScenarioConfig(scenario_id=4))[1]
        np.testing.assert_array_equal(s4["params"][:56], s1["params"][:56])
        np.testing.assert_allclose(
            s4["params"][56:, 0] - s1["params"][56:, 0], shift, atol=1e-12
        )
        np.testing.assert_array_equal(s4["params"][56:, 1:], s1["params"][56:, 1:])

    def test_degenerate_draws_are_resampled(self):
        # log K_12 straddles the float-visibility edge of the root gap, so a
        # draw is degenerate roughly half the time and gets redrawn
        cfg = ScenarioConfig(
            scenario_id=1, seed=40, intercepts=(3.72, 0.0, -35.5, 0.0),
            sigma=0.0, tau=(0.0, 0.5, 0.0), n_subjects=20,
            allow_count_rounding=True,
        )
        stats = {}
        data = generate_dataset(cfg, 0, stats)
        assert len(data) == 20
        assert stats["resamples"] >= 1
        assert stats["params"].shape == (20, 4)

    def test_unrecoverable_degeneracy_raises(self):
        # coincident roots for every possible draw: resampling cannot help
        cfg = ScenarioConfig(
            scenario_id=1, seed=40, intercepts=(3.72, 0.0, -46.0, 0.0),
            sigma=0.0, tau=(0.0, 0.5, 0.0), n_subjects=2,
            allow_count_rounding=True,
        )
        with pytest.raises(EvalFailure):
            generate_dataset(cfg, 0)

    def test_negative_replicate_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset(ScenarioConfig(scenario_id=1), -1)


@pytest.fixture(scope="module")
def effect_summary():
    return run_study(ScenarioConfig(scenario_id=4, n_replicates=20, seed=2))


@pytest.fixture(scope="module")
def null_summary():
    return run_study(ScenarioConfig(scenario_id=1, n_replicates=20, seed=2))


class TestRunStudy:
    def test_convergence_and_counters(self, effect_summary):
        assert effect_summary.convergence == 1.0
        assert effect_summary.n_test_failures == 0
        assert effect_summary.seconds_per_1000 > 0.0
        assert effect_summary.n_replicates == 20

    def test_effect_scenario_rejects_often(self, effect_summary):
        for kind in ("plain", "bias_corrected"):
            assert effect_summary.wald_rates[kind]["vd_Aa"] >= 0.35
            assert effect_summary.f_rates[kind]["vd"] >= 0.35

    def test_null_scenario_rejects_rarely(self, null_summary):
        for kind in ("plain", "bias_corrected"):
            for rate in null_summary.wald_rates[kind].values():
                assert rate <= 0.35
            for rate in null_summary.f_rates[kind].values():
                assert rate <= 0.35

    def test_bias_and_mse_cover_all_coefficients(self, effect_summary):
        assert len(effect_summary.bias) == 12
        assert len(effect_summary.mse) == 12
        assert all(v >= 0.0 for v in effect_summary.mse.values())
        # effect estimates center on the generating value
        assert abs(effect_summary.bias["vd_Aa"]) < 0.05

    def test_thread_count_does_not_change_statistics(self, effect_summary):
        threaded = run_study(
            ScenarioConfig(scenario_id=4, n_replicates=20, seed=2), threads=4
        )
        assert threaded.wald_rates == effect_summary.wald_rates
        assert threaded.f_rates == effect_summary.f_rates
        assert threaded.bias == effect_summary.bias
        assert threaded.mse == effect_summary.mse
        assert threaded.convergence == effect_summary.convergence

    def test_summary_csv_round_trip(self, effect_summary, tmp_path):
        path = tmp_path / "summary.csv"
        write_summary_csv(effect_summary, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "scenario", "hypothesis", "method", "rate", "bias", "mse",
            "convergence", "seconds_per_1000",
        ]
        assert len(rows) == 1 + 2 * (8 + 4)
        by_key = {(r[1], r[2]): r for r in rows[1:]}
        row = by_key[("vd_Aa", "wald_plain")]
        assert float(row[3]) == effect_summary.wald_rates["plain"]["vd_Aa"]
        assert float(row[4]) == effect_summary.bias["vd_Aa"]
        assert float(row[6]) == effect_summary.convergence

    def test_format_summary_block(self, effect_summary):
        text = format_summary(effect_summary)
        assert "Scenario 4" in text
        assert "convergence 100.0%" in text
        assert "vd_Aa" in text and "k21" in text
