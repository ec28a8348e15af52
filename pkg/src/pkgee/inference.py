"""Robust covariance estimation and small-sample tests for fitted coefficients.

Covariances are sandwich estimators built from the per-subject score
contributions; the bias-corrected variant inflates each subject's residual by
the inverse of (I - H_i) with H_i the subject's leverage. Degrees of freedom
come from moment matching of the contrast variance estimator (a chi-square
approximation), and F denominators from matching the average reciprocal.

Convention: the covariance matrices returned here estimate Var(beta_hat)
directly, i.e. inv(I0) @ I1 @ inv(I0) with no sample-size normalization, so
test statistics are plain ratios c'beta / sqrt(c'Vc). Any K-normalized
presentation of the same quantities differs only by factors that cancel in
every statistic.

All trace computations exploit the block structure (one block per subject,
subjects in a shared-curve group sharing their Jacobian), so nothing larger
than p x p or n_i x n_i is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import (
    LeverageSingular,
    NotEstimable,
    SingularContrastCovariance,
    SingularInformation,
    ZeroTrace,
)
from .gee_engine import GeeFit
from .pk_model import N_COEF, log_curve_and_gradient

__all__ = [
    "CovarianceEstimate",
    "Contrast",
    "TestResult",
    "VD_EFFECTS",
    "KEL_EFFECTS",
    "K12_EFFECTS",
    "K21_EFFECTS",
    "EFFECT_CONTRASTS",
    "coefficient_contrast",
    "sandwich",
    "leverage",
    "bias_corrected_sandwich",
    "fay_graubard_df",
    "wald_test",
    "fai_cornelius_denominator_df",
    "f_test",
    "weighted_average_target",
    "t_two_sided_pvalue",
    "f_pvalue",
]

#: Minimum admissible per-contrast d.f. in the denominator-d.f. moment
#: estimator; values at or below 2 are clamped here (the limit gives 2).
DF_CLAMP = 2.001

_PSD_TOL = 1e-10
_COND_LIMIT = 1e12


def t_two_sided_pvalue(statistic, df):
    """Two-sided tail of Student's t via the regularized incomplete beta.

    2*(1 - T_df(|t|)) = I_x(df/2, 1/2) at x = df/(df + t^2); a single
    incomplete-beta evaluation, with no cancellation near p = 0.
    """
    if df <= 0:
        raise ValueError("df must be > 0")
    x = df / (df + statistic * statistic)
    return float(betainc(0.5 * df, 0.5, x))


def f_pvalue(statistic, df_num, df_den):
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if df_num <= 0 or df_den <= 0:
        raise ValueError("degrees of freedom must be > 0")
    if statistic < 0:
        raise ValueError("F statistic must be >= 0")
    x = df_den / (df_den + df_num * statistic)
    return float(betainc(0.5 * df_den, 0.5 * df_num, x))


@dataclass(frozen=True)
class CovarianceEstimate:
    """Covariance of the retained coefficients.

    matrix is p x p over fit.retained (p = 12 minus dropped columns),
    symmetric PSD up to a relative tolerance of 1e-10 on the smallest
    eigenvalue.
    """

    matrix: np.ndarray
    kind: str
    retained: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if self.kind not in ("plain", "bias_corrected"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance matrix must be square")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("covariance matrix must be symmetric")
        m = 0.5 * (m + m.T)
        eigs = np.linalg.eigvalsh(m)
        if eigs[0] < -_PSD_TOL * max(eigs[-1], 0.0):
            raise ValueError(
                f"covariance not PSD: min eigenvalue {eigs[0]:.3e} "
                f"vs largest {eigs[-1]:.3e}"
            )
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "retained", np.asarray(self.retained, dtype=int))


@dataclass(frozen=True)
class Contrast:
    """A contrast over the 12 coefficients: one vector, or a 12 x L matrix."""

    matrix: np.ndarray
    name: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim not in (1, 2) or m.shape[0] != N_COEF:
            raise ValueError("contrast must be a 12-vector or a 12 x L matrix")
        if not np.any(m):
            raise ValueError("contrast must be nonzero")
        cols = m.reshape(N_COEF, -1)
        if np.linalg.matrix_rank(cols) < cols.shape[1]:
            raise ValueError("contrast columns must be linearly independent")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def is_single(self):
        return self.matrix.ndim == 1

    @property
    def columns(self):
        """Always 2-D: (12, L)."""
        return self.matrix.reshape(N_COEF, -1)

    @property
    def n_columns(self):
        return self.columns.shape[1]

    @property
    def support(self):
        """Coefficient indices the contrast touches."""
        return frozenset(np.flatnonzero(np.any(self.columns != 0.0, axis=1)))


def coefficient_contrast(index, name=""):
    """Unit contrast selecting one coefficient."""
    c = np.zeros(N_COEF)
    c[index] = 1.0
    return Contrast(c, name=name)


def _joint_effects(het_col, name):
    m = np.zeros((N_COEF, 2))
    m[het_col, 0] = 1.0
    m[het_col + 1, 1] = 1.0
    return Contrast(m, name=name)


#: Joint nullity of both genotype effects on one log-parameter.
VD_EFFECTS = _joint_effects(1, "vd_effects")
KEL_EFFECTS = _joint_effects(4, "kel_effects")
K12_EFFECTS = _joint_effects(7, "k12_effects")
K21_EFFECTS = _joint_effects(10, "k21_effects")

EFFECT_CONTRASTS = {
    "vd": VD_EFFECTS,
    "kel": KEL_EFFECTS,
    "k12": K12_EFFECTS,
    "k21": K21_EFFECTS,
}


@dataclass(frozen=True)
class TestResult:
    """Outcome of a Wald or F test.

    low_df marks Wald results whose moment d.f. came out at or below 2 (the
    t reference still has a valid CDF there; the p-value is reported as-is).
    Non-estimable placeholders carry NaN statistic and p_value.
    """

    statistic: float
    df_numerator: int
    df_denominator: float
    p_value: float
    estimable: bool
    variance_kind: str
    low_df: bool = False

    def __post_init__(self):
        if self.estimable:
            if not 0.0 <= self.p_value <= 1.0:
                raise ValueError("p_value outside [0, 1]")
            if self.df_numerator < 1 or self.df_denominator <= 0:
                raise ValueError("degrees of freedom must be positive")


def not_estimable_result(variance_kind, df_numerator=1):
    """Placeholder result for a contrast touching dropped columns."""
    return TestResult(
        statistic=float("nan"),
        df_numerator=df_numerator,
        df_denominator=float("nan"),
        p_value=float("nan"),
        estimable=False,
        variance_kind=variance_kind,
    )


def _require_converged(fit: GeeFit):
    if not fit.converged:
        raise ValueError("inference requires a converged fit")


def _chol_info0(fit: GeeFit):
    retained = fit.retained
    block = fit.info0[np.ix_(retained, retained)]
    try:
        return np.linalg.cholesky(block), retained
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(
            "working information is not positive definite on retained columns"
        ) from exc


def _chol_solve(chol, b):
    return np.linalg.solve(chol.T, np.linalg.solve(chol, b))


def sandwich(fit: GeeFit) -> CovarianceEstimate:
    """Robust covariance inv(I0) @ (sum_i U_i U_i') @ inv(I0), retained block.

    U_i = D_i' S_i; subjects in a shared-curve group contribute through one
    matrix product B_g = R_g @ J_g.
    """
    _require_converged(fit)
    chol, retained = _chol_info0(fit)
    meat = np.zeros((retained.size, retained.size))
    for g in fit.groups:
        b = g.resid @ g.jac[:, retained]
        meat += b.T @ b
    cov = _chol_solve(chol, _chol_solve(chol, meat).T)
    return CovarianceEstimate(matrix=cov, kind="plain", retained=retained)


def leverage(fit: GeeFit, i) -> np.ndarray:
    """Leverage H_i = D_i inv(I0) D_i' of one subject (n_i x n_i)."""
    _require_converged(fit)
    chol, retained = _chol_info0(fit)
    jac = fit.d_hat[i][:, retained]
    return jac @ _chol_solve(chol, jac.T)


def _group_leverage(g, chol, retained):
    jac = g.jac[:, retained]
    return jac @ _chol_solve(chol, jac.T)


def _corrected_resid(g, chol, retained):
    """Rows S~_i' = S_i' (I - H_g)^-T for every subject in the group."""
    h = _group_leverage(g, chol, retained)
    eye_h = np.eye(h.shape[0]) - h
    if np.linalg.cond(eye_h) > _COND_LIMIT:
        raise LeverageSingular(g.subject_ids[0])
    return np.linalg.solve(eye_h, g.resid.T).T


def bias_corrected_sandwich(fit: GeeFit) -> CovarianceEstimate:
    """Sandwich with residuals inflated by (I - H_i)^-1 per subject."""
    _require_converged(fit)
    chol, retained = _chol_info0(fit)
    meat = np.zeros((retained.size, retained.size))
    for g in fit.groups:
        b = _corrected_resid(g, chol, retained) @ g.jac[:, retained]
        meat += b.T @ b
    cov = _chol_solve(chol, _chol_solve(chol, meat).T)
    return CovarianceEstimate(matrix=cov, kind="bias_corrected", retained=retained)


def _check_support(contrast: Contrast, fit: GeeFit):
    touched = contrast.support & fit.dropped_columns
    if touched:
        raise NotEstimable(
            f"contrast {contrast.name or contrast.support} touches dropped "
            f"columns {sorted(touched)}"
        )


def _contrast_scores(fit, c_vec, kind, chol, retained):
    """Per-subject scalars z_i = c' inv(I0) D_i' S~_i (S~ per kind)."""
    a_full = np.zeros(N_COEF)
    a_full[retained] = _chol_solve(chol, c_vec[retained])
    zs = []
    for g in fit.groups:
        direction = g.jac @ a_full
        if kind == "bias_corrected":
            h = _group_leverage(g, chol, retained)
            eye_h = np.eye(h.shape[0]) - h
            if np.linalg.cond(eye_h) > _COND_LIMIT:
                raise LeverageSingular(g.subject_ids[0])
            direction = np.linalg.solve(eye_h.T, direction)
        zs.append(g.resid @ direction)
    return np.concatenate(zs)


def fay_graubard_df(fit: GeeFit, c: Contrast, kind="plain") -> float:
    """Moment d.f. of the contrast variance: trace(Psi M)^2 / trace(Psi M Psi M).

    Both block-diagonal factors reduce to per-subject scalars
    z_i = c' inv(I0) D_i' S_i (corrected kind replaces S_i by (I-H_i)^-1 S_i),
    giving (sum z_i^2)^2 / sum z_i^4 without forming any block matrix.
    """
    _require_converged(fit)
    if not c.is_single:
        raise ValueError("d.f. estimation takes a single contrast vector")
    _check_support(c, fit)
    if kind not in ("plain", "bias_corrected"):
        raise ValueError(f"unknown covariance kind {kind!r}")
    chol, retained = _chol_info0(fit)
    z = _contrast_scores(fit, c.matrix, kind, chol, retained)
    z2 = z * z
    total = z2.sum()
    if total == 0.0:
        raise ZeroTrace(
            f"all residual scores orthogonal to contrast {c.name or c.support}"
        )
    return float(total * total / np.dot(z2, z2))


def wald_test(fit: GeeFit, cov: CovarianceEstimate, c: Contrast) -> TestResult:
    """Wald t-ratio of a single contrast with moment d.f. matching cov.kind."""
    _require_converged(fit)
    if not c.is_single:
        raise ValueError("wald_test takes a single contrast vector")
    _check_support(c, fit)
    try:
        df = fay_graubard_df(fit, c, kind=cov.kind)
    except ZeroTrace as exc:
        raise NotEstimable(str(exc)) from exc
    retained = cov.retained
    c_r = c.matrix[retained]
    variance = float(c_r @ cov.matrix @ c_r)
    if variance <= 0.0:
        raise NotEstimable(
            f"contrast variance {variance:.3e} is not positive"
        )
    statistic = float(c_r @ fit.beta_hat[retained]) / np.sqrt(variance)
    return TestResult(
        statistic=statistic,
        df_numerator=1,
        df_denominator=df,
        p_value=t_two_sided_pvalue(statistic, df),
        estimable=True,
        variance_kind=cov.kind,
        low_df=df <= 2.0,
    )


def fai_cornelius_denominator_df(d_list) -> float:
    """Denominator d.f. for the F reference from per-contrast moment d.f.

    nu = 2*s / (s - L) with s = sum d_l/(d_l - 2), each d_l clamped below at
    DF_CLAMP; equal d.f. across contrasts reproduce that common value.
    """
    d = np.asarray(d_list, dtype=float)
    if d.ndim != 1 or d.size < 1:
        raise ValueError("d_list must be a non-empty 1-D sequence")
    d = np.maximum(d, DF_CLAMP)
    s = np.sum(d / (d - 2.0))
    return float(2.0 * s / (s - d.size))


def f_test(fit: GeeFit, cov: CovarianceEstimate, contrast: Contrast) -> TestResult:
    """Joint F test of L contrast columns against F(L, nu).

    Per-column moment d.f. feed the denominator-d.f. estimator; the quadratic
    form uses the same covariance estimate throughout.
    """
    _require_converged(fit)
    _check_support(contrast, fit)
    cols = contrast.columns
    n_cols = cols.shape[1]
    try:
        d_list = [
            fay_graubard_df(fit, Contrast(cols[:, j]), kind=cov.kind)
            for j in range(n_cols)
        ]
    except ZeroTrace as exc:
        raise NotEstimable(str(exc)) from exc
    nu = fai_cornelius_denominator_df(d_list)

    retained = cov.retained
    c_r = cols[retained, :]
    gram = c_r.T @ cov.matrix @ c_r
    estimate = c_r.T @ fit.beta_hat[retained]
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularContrastCovariance(
            f"contrast covariance singular for {contrast.name or 'contrast'}"
        ) from exc
    half = np.linalg.solve(chol, estimate)
    statistic = float(half @ half) / n_cols
    return TestResult(
        statistic=statistic,
        df_numerator=n_cols,
        df_denominator=nu,
        p_value=f_pvalue(statistic, n_cols, nu),
        estimable=True,
        variance_kind=cov.kind,
        low_df=min(d_list) <= 2.0,
    )


def weighted_average_target(subjects, betas) -> np.ndarray:
    """Population target of the misspecified fit: information-weighted average.

    subjects is a sequence of (DesignMatrix, InfusionSpec, times) triples;
    betas the matching individual coefficient vectors. Returns
    inv(sum_i I0_i(beta_i)) @ sum_i I0_i(beta_i) beta_i, where I0_i is the
    subject's working information at its own coefficients.
    """
    from .pk_model import PkParams

    total = np.zeros((N_COEF, N_COEF))
    weighted = np.zeros(N_COEF)
    for (design, inf, times), beta in zip(subjects, betas, strict=True):
        beta = np.asarray(beta, dtype=float)
        psi = design.matrix @ beta
        _, grad = log_curve_and_gradient(PkParams(*psi), inf, times)
        jac = grad @ design.matrix
        info = jac.T @ jac
        total += info
        weighted += info @ beta
    try:
        chol = np.linalg.cholesky(total)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(
            "summed individual information is not positive definite"
        ) from exc
    return np.linalg.solve(chol.T, np.linalg.solve(chol, weighted))
