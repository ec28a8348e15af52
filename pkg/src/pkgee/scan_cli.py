"""Batch SNP scan and command-line entry points.

The scan joins one concentration table against a wide genotype matrix and
runs an independent fit per SNP: subjects with a missing call are excluded
for that SNP only, estimates and per-coefficient Wald tests cover the eight
genotype-effect coefficients, and the four per-parameter F tests carry the
multiplicity policy (default Bonferroni 0.05 / (M * 4)).

SNP work items are pure functions of loaded data, so they parallelize over a
thread pool; rows are assembled in sorted snp_id order and floats are written
with 17 significant digits, which makes output files byte-identical for any
worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .errors import (
    EvalFailure,
    JoinError,
    LeverageSingular,
    NotConverged,
    NotEstimable,
    ParseError,
    PkGeeError,
    SchemaError,
    SingularContrastCovariance,
    SingularInformation,
)
from .gee_engine import GeeFit, SolverConfig, SubjectRecord, WorkingModel, solve
from .inference import (
    EFFECT_CONTRASTS,
    CovarianceEstimate,
    bias_corrected_sandwich,
    coefficient_contrast,
    f_test,
    sandwich,
    wald_test,
)
from .pk_model import COEF_NAMES, N_COEF, PARAM_NAMES, Genotype, InfusionSpec
from .sim_harness import (
    EFFECT_COEF_INDICES,
    ScenarioConfig,
    format_summary,
    run_study,
    write_summary_csv,
)

__all__ = [
    "CONC_COLUMNS",
    "GenotypeMatrix",
    "ScanPolicy",
    "ScanRow",
    "load_tables",
    "scan",
    "write_scan_csv",
    "format_fit_block",
    "cli",
    "main",
]

CONC_COLUMNS = ("subject_id", "time_h", "conc_mg_per_l", "dose_mg", "t_in_h")

_GENOTYPE_BY_CODE = (Genotype.aa, Genotype.Aa, Genotype.AA)
_MISSING = -1

_EFFECT_NAMES = tuple(COEF_NAMES[j] for j in EFFECT_COEF_INDICES)
_NAN8 = (math.nan,) * len(EFFECT_COEF_INDICES)
_NAN4 = (math.nan,) * len(PARAM_NAMES)
_FALSE8 = (False,) * len(EFFECT_COEF_INDICES)
_FALSE4 = (False,) * len(PARAM_NAMES)


def _fmt(x) -> str:
    return f"{x:.17g}"


@dataclass(frozen=True)
class GenotypeMatrix:
    """Wide genotype table: one row per subject, one column per SNP.

    codes is an int8 array with 0/1/2 coding aa/Aa/AA and -1 for a missing
    call; shape is (len(subject_ids), len(snp_ids)).
    """

    subject_ids: tuple
    snp_ids: tuple
    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int8)
        if codes.shape != (len(self.subject_ids), len(self.snp_ids)):
            raise ValueError("codes shape does not match subject/SNP ids")
        if not np.all(np.isin(codes, (-1, 0, 1, 2))):
            raise ValueError("genotype codes must be -1 (missing), 0, 1, or 2")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def n_snps(self):
        return len(self.snp_ids)

    def column(self, j) -> np.ndarray:
        return self.codes[:, j]


@dataclass(frozen=True)
class ScanPolicy:
    """Variance kind, significance rule, and worker count for one scan.

    alpha = None applies the Bonferroni default 0.05 / (M * 4), M the panel
    size; threads = None defers to PKGEE_THREADS (then 1).
    """

    variance_kind: str = "plain"
    alpha: float | None = None
    threads: int | None = None
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.variance_kind not in ("plain", "bias_corrected"):
            raise ValueError(f"unknown variance kind {self.variance_kind!r}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    def resolved_alpha(self, n_snps) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.05 / (n_snps * len(PARAM_NAMES))


@dataclass(frozen=True)
class ScanRow:
    """Per-SNP results: estimates, Wald tests, and per-parameter F tests.

    Coefficient-indexed tuples follow the effect order (vd_Aa, vd_AA, kel_Aa,
    kel_AA, k12_Aa, k12_AA, k21_Aa, k21_AA); parameter-indexed tuples follow
    (vd, kel, k12, k21). Entries are NaN with estimable=False where a test
    could not be run (dropped column, failed correction, failed fit).
    """

    snp_id: str
    converged: bool
    n_excluded: int
    estimates: tuple
    std_errors: tuple
    wald_df: tuple
    wald_p: tuple
    wald_estimable: tuple
    f_df_den: tuple
    f_p: tuple
    f_estimable: tuple
    f_significant: tuple

    def __post_init__(self):
        for p in (*self.wald_p, *self.f_p):
            if not (math.isnan(p) or 0.0 <= p <= 1.0):
                raise ValueError(f"p-value {p!r} outside [0, 1]")


def _failed_row(snp_id, n_excluded) -> ScanRow:
    return ScanRow(
        snp_id=snp_id, converged=False, n_excluded=n_excluded,
        estimates=_NAN8, std_errors=_NAN8, wald_df=_NAN8, wald_p=_NAN8,
        wald_estimable=_FALSE8, f_df_den=_NAN4, f_p=_NAN4,
        f_estimable=_FALSE4, f_significant=_FALSE4,
    )


# ---------------------------------------------------------------------------
# loading


def _parse_float(path, line, column, text):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"{column}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"{column}: not finite: {text!r}")
    return value


def _load_concentrations(path):
    """Ordered {subject_id: [(time, log_conc, dose, t_in, line), ...]}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(path, CONC_COLUMNS[0], "empty file, header required")
        for want in CONC_COLUMNS:
            if want not in header:
                raise SchemaError(path, want, "missing required column")
        for got in header:
            if got not in CONC_COLUMNS:
                raise SchemaError(path, got, "unexpected column")
        index = {name: header.index(name) for name in CONC_COLUMNS}

        rows = {}
        for line, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(
                    path, line, f"expected {len(header)} fields, got {len(record)}"
                )
            subject = record[index["subject_id"]].strip()
            if not subject:
                raise ParseError(path, line, "empty subject_id")
            time = _parse_float(path, line, "time_h", record[index["time_h"]])
            conc = _parse_float(
                path, line, "conc_mg_per_l", record[index["conc_mg_per_l"]]
            )
            dose = _parse_float(path, line, "dose_mg", record[index["dose_mg"]])
            t_in = _parse_float(path, line, "t_in_h", record[index["t_in_h"]])
            if time <= 0.0:
                raise ParseError(
                    path, line,
                    "time_h must be > 0: responses are modeled on the log scale "
                    "and the concentration at the start of infusion is zero",
                )
            if conc <= 0.0:
                raise ParseError(
                    path, line,
                    "conc_mg_per_l must be > 0: responses are log-transformed "
                    "at ingestion",
                )
            if dose <= 0.0 or t_in <= 0.0:
                raise ParseError(path, line, "dose_mg and t_in_h must be > 0")
            rows.setdefault(subject, []).append(
                (time, math.log(conc), dose, t_in, line)
            )
    return rows


def _build_records(path, rows):
    records = []
    for subject, entries in rows.items():
        dose, t_in = entries[0][2], entries[0][3]
        for time, _, d, t, line in entries:
            if d != dose or t != t_in:
                raise ParseError(
                    path, line,
                    f"dose_mg/t_in_h differ from subject {subject!r}'s earlier rows",
                )
        entries = sorted(entries)
        for (t0, _, _, _, _), (t1, _, _, _, line) in zip(entries, entries[1:]):
            if t1 == t0:
                raise ParseError(path, line, f"duplicate time_h {t1!r}")
        times = np.array([e[0] for e in entries])
        log_conc = np.array([e[1] for e in entries])
        records.append(
            SubjectRecord(subject, InfusionSpec(dose, t_in), times, log_conc,
                          Genotype.aa)
        )
    return records


def _load_genotypes(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(path, "subject_id", "empty file, header required")
        if header[0] != "subject_id":
            raise SchemaError(
                path, header[0], "first column must be 'subject_id'"
            )
        snp_ids = tuple(header[1:])
        if not snp_ids:
            raise SchemaError(path, "subject_id", "no SNP columns after subject_id")
        seen = set()
        for snp in snp_ids:
            if snp in seen:
                raise SchemaError(path, snp, "duplicated SNP column")
            seen.add(snp)

        ids, code_rows = [], []
        for line, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(
                    path, line, f"expected {len(header)} fields, got {len(record)}"
                )
            subject = record[0].strip()
            if not subject:
                raise ParseError(path, line, "empty subject_id")
            if subject in ids:
                raise ParseError(path, line, f"duplicate subject_id {subject!r}")
            codes = []
            for snp, text in zip(snp_ids, record[1:]):
                text = text.strip()
                if text in ("NA", ""):
                    codes.append(_MISSING)
                elif text in ("0", "1", "2"):
                    codes.append(int(text))
                else:
                    raise ParseError(
                        path, line, f"{snp}: genotype must be 0/1/2/NA, got {text!r}"
                    )
            ids.append(subject)
            code_rows.append(codes)
    return ids, snp_ids, np.array(code_rows, dtype=np.int8).reshape(len(ids), -1)


def load_tables(conc_path, geno_path):
    """Load and join the two input tables.

    Returns (records, genotypes) with one SubjectRecord per subject in the
    concentration file's order (carrying a placeholder reference genotype;
    per-SNP genotypes are attached during the scan) and the genotype matrix
    row-aligned to the same order.

    Raises
    ------
    ParseError, SchemaError
        A malformed row or header in either file.
    JoinError
        The two files do not cover the same subjects.
    """
    records = _build_records(conc_path, _load_concentrations(conc_path))
    geno_ids, snp_ids, codes = _load_genotypes(geno_path)

    conc_set = {r.subject_id for r in records}
    geno_set = set(geno_ids)
    if conc_set - geno_set:
        raise JoinError(conc_set - geno_set, "subjects missing from the genotype table")
    if geno_set - conc_set:
        raise JoinError(geno_set - conc_set, "genotype rows without concentration data")

    order = [geno_ids.index(r.subject_id) for r in records]
    matrix = GenotypeMatrix(
        tuple(r.subject_id for r in records), snp_ids, codes[order]
    )
    return tuple(records), matrix


# ---------------------------------------------------------------------------
# scanning


def _covariance(fit: GeeFit, kind) -> CovarianceEstimate:
    return sandwich(fit) if kind == "plain" else bias_corrected_sandwich(fit)


def _scan_one(snp_id, records, codes, policy, alpha) -> ScanRow:
    mask = codes != _MISSING
    n_excluded = int(len(records) - mask.sum())
    used = [
        dataclasses.replace(rec, genotype=_GENOTYPE_BY_CODE[code])
        for rec, code in zip(records, codes) if code != _MISSING
    ]
    if not used:
        return _failed_row(snp_id, n_excluded)
    try:
        fit = solve(used, WorkingModel(), policy.solver)
        cov = _covariance(fit, policy.variance_kind)
    except (NotConverged, SingularInformation, EvalFailure, LeverageSingular):
        return _failed_row(snp_id, n_excluded)

    retained = list(cov.retained)
    est, se, wdf, wp, west = [], [], [], [], []
    for j in EFFECT_COEF_INDICES:
        est.append(float(fit.beta_hat[j]))
        if j in retained:
            pos = retained.index(j)
            se.append(float(np.sqrt(cov.matrix[pos, pos])))
        else:
            se.append(math.nan)
        try:
            result = wald_test(fit, cov, coefficient_contrast(j, COEF_NAMES[j]))
            wdf.append(result.df_denominator)
            wp.append(result.p_value)
            west.append(True)
        except (NotEstimable, LeverageSingular):
            wdf.append(math.nan)
            wp.append(math.nan)
            west.append(False)

    fdf, fp, fest, fsig = [], [], [], []
    for name in PARAM_NAMES:
        try:
            result = f_test(fit, cov, EFFECT_CONTRASTS[name])
            fdf.append(result.df_denominator)
            fp.append(result.p_value)
            fest.append(True)
            fsig.append(result.p_value < alpha)
        except (NotEstimable, LeverageSingular, SingularContrastCovariance):
            fdf.append(math.nan)
            fp.append(math.nan)
            fest.append(False)
            fsig.append(False)

    return ScanRow(
        snp_id=snp_id, converged=True, n_excluded=n_excluded,
        estimates=tuple(est), std_errors=tuple(se), wald_df=tuple(wdf),
        wald_p=tuple(wp), wald_estimable=tuple(west), f_df_den=tuple(fdf),
        f_p=tuple(fp), f_estimable=tuple(fest), f_significant=tuple(fsig),
    )


def _worker_count(requested):
    if requested is not None:
        return max(1, int(requested))
    try:
        return max(1, int(os.environ.get("PKGEE_THREADS", "1")))
    except ValueError:
        return 1


def scan(subjects, genotypes: GenotypeMatrix, policy: ScanPolicy = ScanPolicy()):
    """Fit and test every SNP column; returns ScanRows sorted by snp_id.

    Subjects with a missing call are excluded per SNP, counted in the row.
    Fits are independent pure functions, so the rows are identical for any
    worker count; per-SNP failures yield a converged=False row rather than
    aborting the panel.
    """
    subjects = tuple(subjects)
    if tuple(r.subject_id for r in subjects) != tuple(genotypes.subject_ids):
        raise JoinError(
            set(r.subject_id for r in subjects) ^ set(genotypes.subject_ids),
            "subject order of records and genotype matrix differ",
        )
    alpha = policy.resolved_alpha(genotypes.n_snps)
    order = sorted(range(genotypes.n_snps), key=genotypes.snp_ids.__getitem__)

    def task(j):
        return _scan_one(
            genotypes.snp_ids[j], subjects, genotypes.codes[:, j], policy, alpha
        )

    threads = _worker_count(policy.threads)
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(task, order))
    else:
        rows = [task(j) for j in order]
    return tuple(rows)


def write_scan_csv(rows, path):
    """One CSV row per ScanRow; fixed column order, 17-significant-digit floats."""
    header = ["snp_id", "converged", "n_excluded"]
    for name in _EFFECT_NAMES:
        header += [f"{name}_estimate", f"{name}_se", f"{name}_df", f"{name}_p",
                   f"{name}_estimable"]
    for name in PARAM_NAMES:
        header += [f"f_{name}_df_den", f"f_{name}_p", f"f_{name}_estimable",
                   f"f_{name}_significant"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            record = [row.snp_id, int(row.converged), row.n_excluded]
            for k in range(len(_EFFECT_NAMES)):
                record += [
                    _fmt(row.estimates[k]), _fmt(row.std_errors[k]),
                    _fmt(row.wald_df[k]), _fmt(row.wald_p[k]),
                    int(row.wald_estimable[k]),
                ]
            for k in range(len(PARAM_NAMES)):
                record += [
                    _fmt(row.f_df_den[k]), _fmt(row.f_p[k]),
                    int(row.f_estimable[k]), int(row.f_significant[k]),
                ]
            writer.writerow(record)


# ---------------------------------------------------------------------------
# fit report


def format_fit_block(fit: GeeFit, cov: CovarianceEstimate) -> str:
    """Per-coefficient report: estimate, S.E., d.f., Wald p; F block per parameter.

    Twelve rows grouped by parameter; the joint F result (denominator d.f.
    and p-value over the parameter's Aa/AA pair) is printed on the Aa row.
    """
    retained = list(cov.retained)

    def wald_cells(j):
        estimate = fit.beta_hat[j]
        if j in retained:
            pos = retained.index(j)
            se = float(np.sqrt(cov.matrix[pos, pos]))
        else:
            se = math.nan
        try:
            result = wald_test(fit, cov, coefficient_contrast(j, COEF_NAMES[j]))
            return estimate, se, result.df_denominator, result.p_value
        except (NotEstimable, LeverageSingular):
            return estimate, se, math.nan, math.nan

    lines = [
        f"covariance: {cov.kind}",
        f"{'parameter':<10} {'estimate':>24} {'s.e.':>24} {'d.f. (Wald)':>24} "
        f"{'p (Wald)':>24} {'denom d.f. (F)':>24} {'p (F)':>24}",
    ]
    for p_idx, param in enumerate(PARAM_NAMES):
        try:
            f_result = f_test(fit, cov, EFFECT_CONTRASTS[param])
            f_cells = (_fmt(f_result.df_denominator), _fmt(f_result.p_value))
        except (NotEstimable, LeverageSingular, SingularContrastCovariance):
            f_cells = ("nan", "nan")
        for offset, suffix in enumerate(("", "_Aa", "_AA")):
            j = 3 * p_idx + offset
            estimate, se, df, p = wald_cells(j)
            f_df, f_p = f_cells if offset == 1 else ("--", "--")
            lines.append(
                f"{COEF_NAMES[j]:<10} {_fmt(estimate):>24} {_fmt(se):>24} "
                f"{_fmt(df):>24} {_fmt(p):>24} {f_df:>24} {f_p:>24}"
            )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# command line


def _load_config(path):
    """Flat key=value file mirroring the CLI flags (kebab- or snake-case keys)."""
    values = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(path, line_no, "expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


# (dest, type, default, help) per subcommand; None defaults mean "required
# unless supplied via --config".
_OPTIONS = {
    "fit": (
        ("conc", str, None, "concentration CSV (subject_id,time_h,conc_mg_per_l,dose_mg,t_in_h)"),
        ("geno", str, None, "genotype CSV (subject_id, one 0/1/2/NA column per SNP)"),
        ("snp", str, "", "SNP column to fit (default: the only column)"),
        ("variance_kind", str, "plain", "plain or bias_corrected"),
    ),
    "scan": (
        ("conc", str, None, "concentration CSV"),
        ("geno", str, None, "genotype CSV"),
        ("out", str, None, "output CSV path"),
        ("variance_kind", str, "plain", "plain or bias_corrected"),
        ("alpha", float, 0.0, "per-test significance level (default 0.05/(M*4))"),
        ("threads", int, 0, "worker threads (default PKGEE_THREADS, then 1)"),
    ),
    "simulate": (
        ("scenario", int, None, "scenario id, 1-7"),
        ("maf", float, 0.25, "minor-allele frequency (0.25 or 0.50)"),
        ("replicates", int, 1000, "number of Monte-Carlo replicates"),
        ("seed", int, 0, "root seed for the replicate streams"),
        ("out", str, "", "summary CSV path (default simulate_s<scenario>_maf<maf>.csv)"),
        ("threads", int, 0, "worker threads (default PKGEE_THREADS, then 1)"),
    ),
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pkgee",
        description="Infusion-model GEE fits with per-SNP robust tests",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None,
                       help="key=value file supplying any of the flags below")
        for dest, typ, _, help_text in options:
            p.add_argument(f"--{dest.replace('_', '-')}", dest=dest, type=typ,
                           default=None, help=help_text)
    return parser


def _merge_options(args):
    """Flags take precedence over --config values, which beat the defaults."""
    config = _load_config(args.config) if args.config else {}
    known = {dest for dest, *_ in _OPTIONS[args.command]}
    unknown = set(config) - known
    if unknown:
        raise SchemaError(args.config, sorted(unknown)[0],
                          f"unknown config key for {args.command!r}")
    merged = {}
    for dest, typ, default, _ in _OPTIONS[args.command]:
        value = getattr(args, dest)
        if value is None and dest in config:
            try:
                value = typ(config[dest])
            except ValueError:
                raise ParseError(args.config, 0,
                                 f"{dest}: not a {typ.__name__}: {config[dest]!r}") from None
        if value is None:
            value = default
        if value is None:
            raise SchemaError(args.config or "<cli>", dest,
                              f"--{dest.replace('_', '-')} is required")
        merged[dest] = value
    return merged


def _cmd_fit(opts) -> int:
    records, genotypes = load_tables(opts["conc"], opts["geno"])
    snp = opts["snp"]
    if not snp:
        if genotypes.n_snps != 1:
            print(f"error: --snp required, file has {genotypes.n_snps} SNP columns",
                  file=sys.stderr)
            return 2
        snp = genotypes.snp_ids[0]
    if snp not in genotypes.snp_ids:
        raise SchemaError(opts["geno"], snp, "SNP column not found")
    j = genotypes.snp_ids.index(snp)
    used = [
        dataclasses.replace(rec, genotype=_GENOTYPE_BY_CODE[code])
        for rec, code in zip(records, genotypes.codes[:, j]) if code != _MISSING
    ]
    fit = solve(used, WorkingModel())
    cov = _covariance(fit, opts["variance_kind"])
    print(f"snp: {snp}  subjects: {len(used)}  excluded: {len(records) - len(used)}")
    print(format_fit_block(fit, cov))
    return 0


def _cmd_scan(opts) -> int:
    records, genotypes = load_tables(opts["conc"], opts["geno"])
    policy = ScanPolicy(
        variance_kind=opts["variance_kind"],
        alpha=opts["alpha"] or None,
        threads=opts["threads"] or None,
    )
    rows = scan(records, genotypes, policy)
    write_scan_csv(rows, opts["out"])
    n_failed = sum(not row.converged for row in rows)
    print(f"scanned {len(rows)} SNPs -> {opts['out']}"
          + (f" ({n_failed} failed fits)" if n_failed else ""))
    return 0


def _cmd_simulate(opts) -> int:
    cfg = ScenarioConfig(
        scenario_id=opts["scenario"], maf=opts["maf"],
        n_replicates=opts["replicates"], seed=opts["seed"],
    )
    summary = run_study(cfg, threads=opts["threads"] or None)
    out = opts["out"] or f"simulate_s{cfg.scenario_id}_maf{cfg.maf:.2f}.csv"
    write_summary_csv(summary, out)
    print(format_summary(summary))
    print(f"\nsummary written to {out}")
    return 0


_COMMANDS = {"fit": _cmd_fit, "scan": _cmd_scan, "simulate": _cmd_simulate}


def cli(argv=None) -> int:
    """Run one subcommand; returns a process exit code (0 on success)."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        opts = _merge_options(args)
        return _COMMANDS[args.command](opts)
    except PkGeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli())
