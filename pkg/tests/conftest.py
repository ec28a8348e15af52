"""Shared fixtures: study-shaped datasets and solved fits, cached per session."""

from __future__ import annotations

import numpy as np
import pytest

from pkgee import (
    Genotype,
    InfusionSpec,
    PkParams,
    ScenarioConfig,
    SubjectRecord,
    WorkingModel,
    generate_dataset,
    log_concentration,
    solve,
)

STUDY_INF = InfusionSpec(dose=1400.0, t_in=0.5)


def make_dataset(scenario_id=1, maf=0.25, replicate=0, seed=314159, **overrides):
    """One study-shaped replicate with a frozen default seed."""
    cfg = ScenarioConfig(
        scenario_id=scenario_id, maf=maf, n_replicates=1, seed=seed, **overrides
    )
    return generate_dataset(cfg, replicate)


def small_dataset(n_per_genotype=(3, 2, 2), seed=6021):
    """A K<=20 dataset with all genotypes present (dense-oracle scale)."""
    cfg = ScenarioConfig(
        scenario_id=1,
        n_subjects=sum(n_per_genotype),
        n_replicates=1,
        seed=seed,
        allow_count_rounding=True,
    )
    rng = np.random.default_rng(seed)
    times = np.asarray(cfg.times)
    records = []
    i = 0
    for g, m in zip(Genotype, n_per_genotype):
        for _ in range(m):
            base = np.array(cfg.intercepts)
            base[[0, 2, 3]] += rng.normal(0.0, cfg.tau)
            y = log_concentration(PkParams(*base), STUDY_INF, times)
            y = y + rng.normal(0.0, cfg.sigma, size=times.size)
            records.append(
                SubjectRecord(f"T{i:02d}", STUDY_INF, times, y, g)
            )
            i += 1
    return records


@pytest.fixture(scope="session")
def scenario1_data():
    return make_dataset()

@pytest.fixture(scope="session")
def scenario1_fit(scenario1_data):
    fit = solve(scenario1_data, WorkingModel())
    assert fit.converged
    return fit


@pytest.fixture(scope="session")
def small_data():
    return small_dataset()


@pytest.fixture(scope="session")
def small_fit(small_data):
    fit = solve(small_data, WorkingModel())
    assert fit.converged
    return fit
