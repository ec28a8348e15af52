"""Two-compartment constant intravenous-infusion model.

Closed-form concentration curve, its log transform, and the analytic gradient
of the log curve with respect to the working-model coefficients. Parameters
live on the log scale (positivity by construction); rates are h^-1, volumes
liters, doses mg, times hours.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRoots, NonPositiveConcentration

__all__ = [
    "N_COEF",
    "COEF_NAMES",
    "PARAM_NAMES",
    "PkParams",
    "InfusionSpec",
    "Genotype",
    "DesignMatrix",
    "hybrid_rate_constants",
    "concentration",
    "log_concentration",
    "log_curve_and_gradient",
    "jacobian_row",
    "individual_params",
]

#: Length of the coefficient vector: 4 PK parameters x (intercept, Aa, AA).
N_COEF = 12

PARAM_NAMES = ("vd", "kel", "k12", "k21")

COEF_NAMES = (
    "vd", "vd_Aa", "vd_AA",
    "kel", "kel_Aa", "kel_AA",
    "k12", "k12_Aa", "k12_AA",
    "k21", "k21_Aa", "k21_AA",
)

_REL_ROOT_GAP = 1e-10  # (a - b) <= gap * (a + b) is treated as degenerate


@dataclass(frozen=True)
class PkParams:
    """Log-scale PK parameters for one curve evaluation.

    Attributes
    ----------
    log_vd : float
        Log volume of the central compartment (log-liters).
    log_kel : float
        Log first-order elimination rate (log h^-1).
    log_k12, log_k21 : float
        Log inter-compartmental transfer rates (log h^-1).
    """

    log_vd: float
    log_kel: float
    log_k12: float
    log_k21: float

    def __post_init__(self):
        for name in ("log_vd", "log_kel", "log_k12", "log_k21"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")

    def natural(self):
        """Natural-scale (V_d, K_el, K_12, K_21); strictly positive.

        Raises OverflowError when a log-parameter leaves float's exp range
        in either direction (exp() raises above ~709; below ~-746 it
        underflows to an unusable 0.0, converted here to the same error).
        """
        values = (
            math.exp(self.log_vd),
            math.exp(self.log_kel),
            math.exp(self.log_k12),
            math.exp(self.log_k21),
        )
        if 0.0 in values:
            raise OverflowError("log-parameter underflowed to 0 on the natural scale")
        return values


@dataclass(frozen=True)
class InfusionSpec:
    """Constant-rate infusion: total dose (mg) over t_in hours."""

    dose: float
    t_in: float

    def __post_init__(self):
        if not (math.isfinite(self.dose) and self.dose > 0):
            raise ValueError(f"dose must be > 0, got {self.dose!r}")
        if not (math.isfinite(self.t_in) and self.t_in > 0):
            raise ValueError(f"t_in must be > 0, got {self.t_in!r}")

    @property
    def k0(self):
        """Infusion rate constant, dose / t_in (mg/h)."""
        return self.dose / self.t_in


class Genotype(enum.Enum):
    """SNP genotype: major homozygote, heterozygote, minor homozygote."""

    aa = "aa"
    Aa = "Aa"
    AA = "AA"

    @property
    def dummies(self):
        """Dummy coding (x_Aa, x_AA): aa->(0,0), Aa->(1,0), AA->(0,1)."""
        if self is Genotype.aa:
            return (0.0, 0.0)
        if self is Genotype.Aa:
            return (1.0, 0.0)
        return (0.0, 1.0)


class DesignMatrix:
    """4x12 block design mapping the coefficient vector to one subject's params.

    Row r selects (intercept, Aa effect, AA effect) for parameter r from
    columns 3r..3r+2 via the genotype dummies.
    """

    __slots__ = ("matrix", "genotype")

    def __init__(self, genotype: Genotype):
        x_aa, x_AA = genotype.dummies
        m = np.zeros((4, N_COEF))
        for r in range(4):
            m[r, 3 * r] = 1.0
            m[r, 3 * r + 1] = x_aa
            m[r, 3 * r + 2] = x_AA
        m.flags.writeable = False
        self.matrix = m
        self.genotype = genotype

    def __repr__(self):
        return f"DesignMatrix(genotype={self.genotype.value!r})"


def hybrid_rate_constants(kel, k12, k21):
    """Roots (a, b) of the quadratic with sum kel+k12+k21 and product kel*k21.

    Returns a >= b > 0. The larger root is computed from the quadratic
    formula; the smaller as product/a, which avoids the cancellation the
    direct (s - sqrt) form suffers when the product is small.

    Raises
    ------
    DegenerateRoots
        When (a - b) <= 1e-10 * (a + b), or when kel*k21 leaves float range
        (b underflows to 0, or the sum overflows); the curve's (a - b)
        denominators are unusable there and the caller must treat the point
        as failed.
    """
    if not (math.isfinite(kel) and math.isfinite(k12) and math.isfinite(k21)):
        raise ValueError("rate constants must be finite")
    if kel <= 0 or k21 <= 0 or k12 < 0:
        raise ValueError("rate constants must be positive")
    s = kel + k12 + k21
    prod = kel * k21
    disc = s * s - 4.0 * prod
    if disc < 0.0:  # only reachable through rounding; roots are always real
        disc = 0.0
    a = 0.5 * (s + math.sqrt(disc))
    b = prod / a
    if not (math.isfinite(a) and b > 0.0):
        raise DegenerateRoots(f"roots left float range: a={a!r}, b={b!r}")
    if (a - b) <= _REL_ROOT_GAP * (a + b):
        raise DegenerateRoots(f"a={a!r} and b={b!r} coincide")
    return a, b


def _curve_terms(p: PkParams, inf: InfusionSpec, t):
    """Shared closed-form pieces for the curve and its gradient.

    The two branches are unified by splitting t into infusion-phase
    exposure u = min(t, t_in) and washout w = max(t - t_in, 0); the
    identity expm1(-a u) * exp(-a w) reproduces both printed branches
    bit-exactly (w = 0 during infusion, u = t_in after).
    """
    vd, kel, k12, k21 = p.natural()
    a, b = hybrid_rate_constants(kel, k12, k21)
    k0 = inf.k0
    t = np.asarray(t, dtype=float)
    u = np.minimum(t, inf.t_in)
    w = t - u  # equals max(t - t_in, 0) without a second clamp
    scale = k0 / vd
    den_a = a * (a - b)
    den_b = b * (a - b)
    if den_b == 0.0:  # b <= a, so den_b is the first product to underflow
        raise DegenerateRoots(f"root products underflowed: a={a!r}, b={b!r}")
    ca = scale * (k21 - a) / den_a
    cb = scale * (b - k21) / den_b
    ea = np.expm1(-a * u)
    eb = np.expm1(-b * u)
    xa = np.exp(-a * w)
    xb = np.exp(-b * w)
    ga = ea * xa
    gb = eb * xb
    f = ca * ga + cb * gb
    return vd, kel, k12, k21, a, b, scale, ca, cb, u, w, ea, eb, xa, xb, ga, gb, f


def concentration(p: PkParams, inf: InfusionSpec, t):
    """Drug concentration (mg/L) at time t (hours, scalar or array).

    Zero at t = 0; strictly positive for t > 0.

    Raises
    ------
    DegenerateRoots
        Propagated from the hybrid-root computation.
    NonPositiveConcentration
        If a t > 0 evaluation underflows to <= 0 (log-transform downstream
        would be undefined).
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    f = _curve_terms(p, inf, t_arr)[-1]
    bad = ~(f > 0) & (t_arr > 0)  # ~(f > 0) also flags NaN from inf - inf
    if np.any(bad):
        t_bad = np.atleast_1d(t_arr)[np.atleast_1d(bad)].min()
        raise NonPositiveConcentration(f"curve not strictly positive at t={t_bad!r}")
    return f if f.ndim else float(f)


def log_concentration(p: PkParams, inf: InfusionSpec, t):
    """Natural log of concentration(p, inf, t); requires t > 0."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise NonPositiveConcentration("log-concentration undefined at t <= 0")
    out = np.log(concentration(p, inf, t_arr))
    return out if out.ndim else float(out)


def log_curve_and_gradient(p: PkParams, inf: InfusionSpec, times):
    """Log curve and its gradient in the log-scale parameters.

    Parameters
    ----------
    times : (n,) array of hours, all > 0.

    Returns
    -------
    fstar : (n,) array
        log f at each time.
    grad : (n, 4) array
        d(log f)/d(log_vd, log_kel, log_k12, log_k21) rows. The log_vd
        column is exactly -1 (the curve is proportional to 1/V_d).
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0):
        raise NonPositiveConcentration("gradient undefined at t <= 0")
    (vd, kel, k12, k21, a, b, scale, ca, cb,
     u, w, ea, eb, xa, xb, ga, gb, f) = _curve_terms(p, inf, times)
    if not np.all(f > 0):  # also catches NaN from overflowing coefficients
        raise NonPositiveConcentration("curve not strictly positive")
    if not np.all(np.isfinite(f)):
        raise OverflowError("curve overflowed past float range")

    gap = a - b
    if (b * gap) ** 2 == 0.0:  # (a*gap)**2 >= (b*gap)**2: one check covers both
        raise DegenerateRoots(f"squared root products underflowed: b={b!r}, gap={gap!r}")
    # coefficient partials (quotient rule on c_a, c_b; scale = k0/vd)
    dca_da = -scale * (a * gap + (k21 - a) * (2 * a - b)) / (a * gap) ** 2
    dca_db = ca / gap
    dca_dk21 = scale / (a * gap)
    dcb_db = scale * (b * gap - (b - k21) * (a - 2 * b)) / (b * gap) ** 2
    dcb_da = -cb / gap
    dcb_dk21 = -scale / (b * gap)

    # exponential-term partials: G = expm1(-a u) exp(-a w)
    dga_da = -xa * (u * np.exp(-a * u) + w * ea)
    dgb_db = -xb * (u * np.exp(-b * u) + w * eb)

    df_da = dca_da * ga + ca * dga_da + dcb_da * gb
    df_db = dca_db * ga + dcb_db * gb + cb * dgb_db
    df_dk21_direct = dca_dk21 * ga + dcb_dk21 * gb

    # implicit root partials from a+b = kel+k12+k21, a*b = kel*k21
    da_dkel = (a - k21) / gap
    db_dkel = (k21 - b) / gap
    da_dk12 = a / gap
    db_dk12 = -b / gap
    da_dk21 = (a - kel) / gap
    db_dk21 = (kel - b) / gap

    df_dkel = df_da * da_dkel + df_db * db_dkel
    df_dk12 = df_da * da_dk12 + df_db * db_dk12
    df_dk21 = df_da * da_dk21 + df_db * db_dk21 + df_dk21_direct

    grad = np.empty((times.size, 4))
    grad[:, 0] = -1.0
    grad[:, 1] = kel * df_dkel / f
    grad[:, 2] = k12 * df_dk12 / f
    grad[:, 3] = k21 * df_dk21 / f
    return np.log(f), grad


def jacobian_row(p: PkParams, inf: InfusionSpec, t, design: DesignMatrix):
    """Row of the working-model Jacobian: d(log f)/d(beta), a 12-vector.

    Chain rule through the design block: (d log f / d psi) X, so columns
    whose genotype dummy is zero are exactly zero.
    """
    _, grad = log_curve_and_gradient(p, inf, np.atleast_1d(np.asarray(t, dtype=float)))
    return grad[0] @ design.matrix


def individual_params(design: DesignMatrix, beta) -> PkParams:
    """Working-model parameters psi = X beta for one subject."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (N_COEF,):
        raise ValueError(f"beta must have shape ({N_COEF},), got {beta.shape}")
    psi = design.matrix @ beta
    return PkParams(*psi)
