"""Estimating-equation solver for the misspecified fixed-effects working model.

The working model deliberately replaces per-subject parameter vectors with one
shared coefficient vector; estimation solves U(beta) = sum_i D_i' V_i^-1 S_i = 0
by Gauss-Newton (equivalently Fisher scoring; the working information I0 is the
expected negative Jacobian of U) with step-halving on the score norm.

Subjects sharing (genotype, time grid, infusion) have identical model curves
and Jacobians, so they are grouped and each iteration evaluates the curve once
per group; with the paper-scale designs (three genotype groups, one grid) a fit
costs three curve evaluations per iteration regardless of sample size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateRoots,
    EvalFailure,
    NonPositiveConcentration,
    NotConverged,
    SingularInformation,
)
from .pk_model import (
    N_COEF,
    DesignMatrix,
    Genotype,
    InfusionSpec,
    log_curve_and_gradient,
)

__all__ = [
    "DEFAULT_INTERCEPTS",
    "SubjectRecord",
    "WorkingModel",
    "SolverConfig",
    "FitGroup",
    "GeeFit",
    "initialize",
    "score_and_info",
    "solve",
]

#: Built-in starting intercepts (log V_d, log K_el, log K_12, log K_21) for
#: gemcitabine-scale curves; SNP-effect coefficients always start at zero.
DEFAULT_INTERCEPTS = (3.72, 1.38, -1.89, -0.35)

_INTERCEPT_COLS = (0, 3, 6, 9)
_STALL_LIMIT = 5  # consecutive sub-rel_step_tol steps tolerated before aborting
_AA_HET_COLS = (1, 4, 7, 10)   # heterozygote (Aa) effect columns
_AA_HOM_COLS = (2, 5, 8, 11)   # minor-homozygote (AA) effect columns


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's infusion, sampling times, log-responses, and genotype."""

    subject_id: str
    inf: InfusionSpec
    times: np.ndarray
    log_conc: np.ndarray
    genotype: Genotype

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.log_conc, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a non-empty 1-D array")
        if np.any(times <= 0):
            raise ValueError("all sampling times must be > 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if y.shape != times.shape:
            raise ValueError("log_conc and times lengths differ")
        if not np.all(np.isfinite(y)):
            raise ValueError("log_conc must be finite")
        times.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "log_conc", y)

    @property
    def n_obs(self):
        return self.times.size


@dataclass(frozen=True)
class WorkingModel:
    """Fixed working specification: unit variance, identity correlation, phi = 1.

    The scale parameter cancels from the estimator and from both covariance
    estimators under this structure, so none of the knobs are estimable or
    settable; the type exists to pin the contract and reject anything else.
    """

    variance_function: str = "unit"
    working_correlation: str = "identity"
    scale_phi: float = 1.0
    xi: None = None
    alpha: None = None

    def __post_init__(self):
        if self.variance_function != "unit":
            raise ValueError("only the unit variance function is supported")
        if self.working_correlation != "identity":
            raise ValueError("only working independence is supported")
        if self.scale_phi != 1.0:
            raise ValueError("scale_phi is fixed at 1 (it cancels everywhere)")
        if self.xi is not None or self.alpha is not None:
            raise ValueError("xi and alpha are unused and must be None")


@dataclass(frozen=True)
class SolverConfig:
    """Gauss-Newton controls. init accepts None (built-in intercepts), four
    intercepts, or a full 12-vector."""

    max_iterations: int = 100
    rel_step_tol: float = 1e-8
    score_tol: float = 1e-8
    max_halvings: int = 20
    init: object = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rel_step_tol <= 0 or self.score_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")


@dataclass(frozen=True)
class FitGroup:
    """Subjects sharing one model curve: common design, infusion, and grid.

    jac is the shared (n x 12) Jacobian at beta_hat; resid stacks the
    subjects' residual vectors as rows (m x n).
    """

    subject_indices: tuple
    subject_ids: tuple
    design: DesignMatrix
    inf: InfusionSpec
    times: np.ndarray
    y: np.ndarray
    jac: np.ndarray = field(default=None, compare=False)
    resid: np.ndarray = field(default=None, compare=False)

    @property
    def m(self):
        return self.y.shape[0]

    @property
    def n_obs(self):
        return self.times.size


@dataclass(frozen=True)
class GeeFit:
    """Converged estimate with the per-subject byproducts inference needs.

    beta_hat entries for dropped columns are NaN; info0 is the full 12x12
    working information (zero on dropped rows/columns, positive definite on
    the retained block). d_hat[i] rows for subjects in the same group share
    storage. final_score_norm is the max-norm of U at beta_hat over retained
    columns.
    """

    beta_hat: np.ndarray
    info0: np.ndarray
    d_hat: tuple
    s_hat: tuple
    converged: bool
    iterations: int
    final_score_norm: float
    dropped_columns: frozenset
    groups: tuple
    subject_ids: tuple

    @property
    def n_subjects(self):
        return len(self.subject_ids)

    @property
    def retained(self):
        """Sorted retained coefficient indices."""
        return np.array([j for j in range(N_COEF) if j not in self.dropped_columns])


def initialize(data, strategy=None):
    """Starting coefficient vector.

    None uses the built-in intercepts; a length-4 sequence supplies intercepts
    (SNP effects start at zero); a length-12 sequence is used verbatim (e.g.
    warm-starting from a previous fit).
    """
    if len(data) == 0:
        raise ValueError("cannot initialize from an empty dataset")
    if strategy is None:
        strategy = DEFAULT_INTERCEPTS
    values = np.asarray(strategy, dtype=float)
    if values.shape == (4,):
        beta = np.zeros(N_COEF)
        beta[list(_INTERCEPT_COLS)] = values
        return beta
    if values.shape == (N_COEF,):
        return values.copy()
    raise ValueError("init must be None, four intercepts, or a 12-vector")


def _group_subjects(data):
    """Group subjects by (genotype, grid, infusion); deterministic order."""
    buckets = {}
    for idx, rec in enumerate(data):
        key = (
            rec.genotype.value,
            rec.inf.dose,
            rec.inf.t_in,
            rec.times.tobytes(),
        )
        buckets.setdefault(key, []).append(idx)
    groups = []
    for key in sorted(buckets):
        idxs = buckets[key]
        first = data[idxs[0]]
        groups.append(
            FitGroup(
                subject_indices=tuple(idxs),
                subject_ids=tuple(data[i].subject_id for i in idxs),
                design=DesignMatrix(first.genotype),
                inf=first.inf,
                times=first.times,
                y=np.vstack([data[i].log_conc for i in idxs]),
            )
        )
    return groups


def _eval_groups(groups, beta):
    """Per-group Jacobian and residuals at beta; EvalFailure names a subject.

    OverflowError covers exp() on a log-parameter beyond float range, which
    a wild trial step can produce; it must halve like any failed evaluation.
    Evaluations that reach inf without an exception (e.g. k0/vd overflowing)
    fail the same way via the finiteness check.
    """
    out = []
    for g in groups:
        psi = g.design.matrix @ beta
        try:
            fstar, grad = log_curve_and_gradient(
                _params_from(psi), g.inf, g.times
            )
        except (DegenerateRoots, NonPositiveConcentration, OverflowError) as exc:
            raise EvalFailure(g.subject_ids[0], exc) from exc
        jac = grad @ g.design.matrix
        resid = g.y - fstar
        if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(resid))):
            raise EvalFailure(g.subject_ids[0], "non-finite model evaluation")
        out.append((jac, resid))
    return out


def _params_from(psi):
    from .pk_model import PkParams

    return PkParams(*psi)


def _accumulate(groups, evaluated):
    """U = sum_i D_i' S_i and I0 = sum_i D_i' D_i from grouped pieces."""
    u = np.zeros(N_COEF)
    info0 = np.zeros((N_COEF, N_COEF))
    for g, (jac, resid) in zip(groups, evaluated):
        u += jac.T @ resid.sum(axis=0)
        info0 += g.m * (jac.T @ jac)
    return u, info0


def score_and_info(data, beta, wm: WorkingModel):
    """Estimating function U(beta) and working information I0(beta).

    Under the fixed working model V_i is the identity, so
    U = sum_i D_i' S_i and I0 = sum_i D_i' D_i. An empty dataset gives
    exact zeros (empty sums).
    """
    beta = np.asarray(beta, dtype=float)
    groups = _group_subjects(data)
    return _accumulate(groups, _eval_groups(groups, beta))


def _dropped_for(groups):
    present = {g.design.genotype for g in groups}
    dropped = set()
    if Genotype.Aa not in present:
        dropped.update(_AA_HET_COLS)
    if Genotype.AA not in present:
        dropped.update(_AA_HOM_COLS)
    return frozenset(dropped)


def _solve_retained(info0, u, retained):
    """Gauss-Newton step on the retained block; SingularInformation on failure."""
    block = info0[np.ix_(retained, retained)]
    try:
        chol = np.linalg.cholesky(block)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(
            "working information is not positive definite on retained columns"
        ) from exc
    step_r = np.linalg.solve(chol.T, np.linalg.solve(chol, u[retained]))
    step = np.zeros(N_COEF)
    step[retained] = step_r
    return step


def solve(data, wm: WorkingModel, cfg: SolverConfig = SolverConfig()) -> GeeFit:
    """Solve U(beta) = 0 and package the fit for inference.

    Gauss-Newton with step-halving: a candidate step is accepted only if it
    strictly decreases ||U||_2 and the model evaluates everywhere; otherwise
    the step is halved, up to cfg.max_halvings. Iteration ends when the
    score criterion ||U||_inf <= score_tol * (1 + ||beta||_inf) holds;
    rel_step_tol acts as a stall detector -- several consecutive accepted
    steps that small without reaching the score criterion abort the fit
    rather than polishing noise. The result is independent of subject
    ordering (contributions are reduced in a deterministic group order).

    Raises
    ------
    NotConverged
        Iteration or step-halving budget exhausted, or iteration stalled.
    SingularInformation
        I0 not positive definite on retained columns.
    EvalFailure
        Model not evaluable at the starting point.
    """
    groups = _group_subjects(data)
    if not groups:
        raise ValueError("cannot fit an empty dataset")
    dropped = _dropped_for(groups)
    retained = np.array([j for j in range(N_COEF) if j not in dropped])

    beta = initialize(data, cfg.init)
    beta[list(dropped)] = 0.0

    evaluated = _eval_groups(groups, beta)  # EvalFailure here propagates
    u, info0 = _accumulate(groups, evaluated)
    score_norm2 = np.linalg.norm(u[retained])

    iterations = 0
    stalls = 0
    while np.max(np.abs(u[retained])) > cfg.score_tol * (1 + np.max(np.abs(beta))):
        if iterations >= cfg.max_iterations:
            raise NotConverged(
                f"score norm {score_norm2:.3e} after {iterations} iterations"
            )
        step = _solve_retained(info0, u, retained)

        accepted = False
        for _ in range(cfg.max_halvings + 1):
            candidate = beta + step
            try:
                cand_eval = _eval_groups(groups, candidate)
            except EvalFailure:
                step = 0.5 * step
                continue
            cand_u, cand_info0 = _accumulate(groups, cand_eval)
            if np.linalg.norm(cand_u[retained]) < score_norm2:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            raise NotConverged(
                f"step-halving exhausted at iteration {iterations} "
                f"(score norm {score_norm2:.3e})"
            )

        if np.max(np.abs(step)) <= cfg.rel_step_tol * (1 + np.max(np.abs(beta))):
            stalls += 1
            if stalls >= _STALL_LIMIT:
                raise NotConverged(
                    f"{stalls} consecutive steps below rel_step_tol with "
                    f"score norm {score_norm2:.3e} still above tolerance"
                )
        else:
            stalls = 0
        beta = candidate
        evaluated = cand_eval
        u, info0 = cand_u, cand_info0
        score_norm2 = np.linalg.norm(u[retained])
        iterations += 1

    final_norm = float(np.max(np.abs(u[retained])))
    converged = True

    beta_out = beta.copy()
    if dropped:
        beta_out[list(dropped)] = np.nan
    fitted_groups = tuple(
        FitGroup(
            subject_indices=g.subject_indices,
            subject_ids=g.subject_ids,
            design=g.design,
            inf=g.inf,
            times=g.times,
            y=g.y,
            jac=jac,
            resid=resid,
        )
        for g, (jac, resid) in zip(groups, evaluated)
    )

    n = sum(len(g.subject_indices) for g in groups)
    d_hat = [None] * n
    s_hat = [None] * n
    ids = [None] * n
    for g in fitted_groups:
        for row, idx in enumerate(g.subject_indices):
            d_hat[idx] = g.jac
            s_hat[idx] = g.resid[row]
            ids[idx] = g.subject_ids[row]

    return GeeFit(
        beta_hat=beta_out,
        info0=info0,
        d_hat=tuple(d_hat),
        s_hat=tuple(s_hat),
        converged=converged,
        iterations=iterations,
        final_score_norm=final_norm,
        dropped_columns=dropped,
        groups=fitted_groups,
        subject_ids=tuple(ids),
    )
