"""Data-generating processes and Monte Carlo drivers.

Four longitudinal error designs around a fixed piecewise-linear signal
with a change point at x = 5, plus three study drivers: estimator
comparison (bias/SD/ESE/MSE/ECP), kink-test size and power, and
confidence-interval coverage/length/runtime.  Replicates are seeded
individually so any thread count reproduces the same report.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from ._parallel import par_map
from .covariance import assemble_sandwich
from .data import LongitudinalDataset, Subject, kink_design_matrix
from .errors import EstimationFailedError, InvalidInputError, KinkQrError
from .estimator import SearchSpec, estimate
from .rankscore import invert_ci, subject_bootstrap_ci, wald_ci
from .slr import slr_test

__all__ = [
    "DgpSpec",
    "generate",
    "LsKinkFit",
    "ls_kink_fit",
    "McReport",
    "run_table1",
    "run_power",
    "run_table2",
    "CQR_TAUS",
]

TRUE_T = 5.0
TRUE_ALPHA = 3.0
TRUE_BETA1 = 1.0
TRUE_BETA2 = -1.0
TRUE_GAMMA = 0.2
AR1_COEF = 0.5
CQR_TAUS = (0.3, 0.4, 0.5, 0.6, 0.7)
MAX_REP_FAILURES = 0.05


@dataclass(frozen=True)
class DgpSpec:
    """One simulated scenario.

    ``delta_beta`` overrides the right slope as beta2 = beta1 +
    delta_beta (used by the power study); None keeps the default
    beta2 = -1.
    """

    case: int
    N: int = 200
    delta_beta: float | None = None
    seed: int | tuple = 0

    def __post_init__(self):
        if self.case not in (1, 2, 3, 4):
            raise InvalidInputError(f"case must be 1..4, got {self.case}")
        if self.N < 10:
            raise InvalidInputError("N must be >= 10")

    @property
    def beta2(self) -> float:
        if self.delta_beta is None:
            return TRUE_BETA2
        return TRUE_BETA1 + float(self.delta_beta)


def _counts(N: int) -> np.ndarray:
    c = np.full(N, 5, dtype=int)
    c[N - 2] = 4
    c[N - 1] = 6
    return c


def generate(spec: DgpSpec) -> LongitudinalDataset:
    """Simulate one longitudinal dataset from the given case."""
    rng = np.random.default_rng(spec.seed)
    counts = _counts(spec.N)
    b2 = spec.beta2
    subjects = []
    for i in range(spec.N):
        ni = int(counts[i])
        if spec.case == 2:
            x = rng.uniform(0.5, 7.5) + 0.5 * np.arange(ni)
        else:
            x = rng.uniform(0.0, 10.0, ni)
        z = rng.uniform(0.0, 10.0, ni)
        if spec.case == 1:
            e = rng.normal() + rng.normal(size=ni)
        elif spec.case == 2:
            # AR(1) noise started from its stationary law
            u = np.empty(ni)
            u[0] = rng.normal(scale=np.sqrt(1.0 / (1.0 - AR1_COEF ** 2)))
            for j in range(1, ni):
                u[j] = AR1_COEF * u[j - 1] + rng.normal()
            e = (3.2 - 0.2 * x) * u
        elif spec.case == 3:
            g = np.sqrt((3.2 - 0.2 * x) ** 2 - 1.0)
            e = rng.normal() + g * rng.normal(size=ni)
        else:
            e = rng.normal() + rng.standard_t(3, size=ni)
        y = (
            TRUE_ALPHA
            + TRUE_BETA1 * np.minimum(x - TRUE_T, 0.0)
            + b2 * np.maximum(x - TRUE_T, 0.0)
            - TRUE_GAMMA * z
            + e
        )
        subjects.append(
            Subject(id=f"s{i + 1:04d}", y=_ro(y), x=_ro(x), z=_ro(z[:, None]))
        )
    return LongitudinalDataset(subjects)


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# Least-squares kink baseline (same two-stage profiling, squared loss)

@dataclass
class LsKinkFit:
    t_hat: float
    coef: np.ndarray  # (q+3,)
    objective: float  # mean squared error at the optimum
    se_t: float
    search_interval: tuple[float, float]


def ls_kink_fit(dataset: LongitudinalDataset, spec: SearchSpec | None = None) -> LsKinkFit:
    """Profile least squares over the change point with cluster-robust
    (by subject) standard errors."""
    if spec is None:
        spec = SearchSpec.from_dataset(dataset)
    y = dataset.y

    def sse(t: float) -> float:
        X = kink_design_matrix(dataset.x, dataset.z, float(t))
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ coef
        return float(r @ r)

    ts = np.linspace(spec.lower, spec.upper, spec.grid_points)
    vals = np.array([sse(t) for t in ts])
    i = int(np.argmin(vals))
    t_best, v_best = float(ts[i]), float(vals[i])
    if spec.refine:
        lo, hi = float(ts[max(i - 1, 0)]), float(ts[min(i + 1, len(ts) - 1)])
        res = minimize_scalar(
            sse, bounds=(lo, hi), method="bounded",
            options={"xatol": max(1e-7 * (spec.upper - spec.lower), 1e-12)},
        )
        if res.fun < v_best:
            t_best, v_best = float(res.x), float(res.fun)

    X = kink_design_matrix(dataset.x, dataset.z, t_best)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    left = dataset.x <= t_best
    d = np.column_stack([X, np.where(left, -coef[1], -coef[2])])
    n = dataset.n
    lam = d.T @ d / n
    S = np.add.reduceat(d * r[:, None], dataset.starts[:-1], axis=0)
    H = S.T @ S / n
    sigma = np.linalg.solve(lam, np.linalg.solve(lam, H).T).T
    se_t = float(np.sqrt(max(sigma[-1, -1], 0.0) / n))
    return LsKinkFit(
        t_hat=t_best,
        coef=coef,
        objective=v_best / n,
        se_t=se_t,
        search_interval=(spec.lower, spec.upper),
    )


# ---------------------------------------------------------------------------
# Report container

@dataclass
class McReport:
    """Rows of one Monte Carlo study plus the configuration that made it."""

    kind: str  # table1 | power | table2
    rows: list[dict]
    config: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            for c in r:
                if c not in cols:
                    cols.append(c)
        return cols


# ---------------------------------------------------------------------------
# Table 1: estimator comparison

def _rep_seed(seed: int, *parts: int) -> list[int]:
    return [int(seed)] + [int(p) for p in parts]


def _table1_rep(args) -> dict:
    case, N, rep, seed, estimators, taus, kind, grid_points = args
    ds = generate(DgpSpec(case=case, N=N, seed=_rep_seed(seed, case, N, rep)))
    spec = SearchSpec.from_dataset(ds, grid_points=grid_points)
    out: dict = {}
    for est in estimators:
        try:
            if est == "ls":
                f = ls_kink_fit(ds, spec)
                out[est] = (f.t_hat, f.se_t)
            elif est == "lad":
                f = estimate(ds, [0.5], spec)
                cov = assemble_sandwich(f, ds, kind=kind)
                out[est] = (f.t_hat, cov.se_t)
            elif est == "cqr":
                f = estimate(ds, taus, spec)
                cov = assemble_sandwich(f, ds, kind=kind)
                out[est] = (f.t_hat, cov.se_t)
            else:
                raise InvalidInputError(f"unknown estimator {est!r}")
        except KinkQrError as exc:
            out[est] = ("failed", str(exc))
    return out


def run_table1(
    reps: int = 200,
    cases=(1,),
    N_list=(200,),
    estimators=("lad", "ls", "cqr"),
    taus=CQR_TAUS,
    kind: str = "exchangeable",
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
    grid_points: int = 50,
) -> McReport:
    """Bias / SD / ESE / MSE / Wald-ECP of the change-point estimators."""
    if reps < 50:
        warnings.warn("fewer than 50 replicates gives large Monte Carlo error",
                      stacklevel=2)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    rows = []
    for case in cases:
        for N in N_list:
            items = [
                (case, N, rep, seed, tuple(estimators), tuple(taus), kind, grid_points)
                for rep in range(reps)
            ]
            results = par_map(_table1_rep, items, threads)
            for est in estimators:
                t_hats, ses, failures = [], [], 0
                for r in results:
                    v = r[est]
                    if v[0] == "failed":
                        failures += 1
                        continue
                    t_hats.append(v[0])
                    ses.append(v[1])
                if failures > MAX_REP_FAILURES * reps:
                    raise EstimationFailedError(
                        f"{failures}/{reps} replicates failed for {est} "
                        f"(case {case}, N={N})"
                    )
                t_arr = np.asarray(t_hats)
                se_arr = np.asarray(ses)
                err = t_arr - TRUE_T
                rows.append(
                    {
                        "case": case,
                        "N": N,
                        "estimator": est,
                        "reps": len(t_arr),
                        "failures": failures,
                        "bias": float(np.mean(err)),
                        "sd": float(np.std(t_arr, ddof=1)),
                        "ese": float(np.mean(se_arr)),
                        "mse": float(np.mean(err ** 2)),
                        "ecp": float(np.mean(np.abs(err) <= z * se_arr)),
                    }
                )
    return McReport(
        kind="table1",
        rows=rows,
        config={
            "reps": reps,
            "cases": list(cases),
            "N_list": list(N_list),
            "estimators": list(estimators),
            "taus": list(taus),
            "kind": kind,
            "alpha": alpha,
            "seed": seed,
            "true_t": TRUE_T,
            "grid_points": grid_points,
        },
    )


# ---------------------------------------------------------------------------
# Power of the kink-existence test

def _power_rep(args) -> dict:
    case, N, rep, seed, db_idx, db, taus, B, alpha, grid_points = args
    ds = generate(
        DgpSpec(case=case, N=N, delta_beta=db, seed=_rep_seed(seed, case, db_idx, rep))
    )
    spec = SearchSpec.from_dataset(ds, grid_points=grid_points)
    out = {}
    for tau in taus:
        try:
            res = slr_test(ds, tau, spec, B=B, seed=int(1_000_000 * rep + db_idx))
            out[tau] = bool(res.p_value < alpha)
        except KinkQrError:
            out[tau] = None
    return out


def run_power(
    reps: int = 200,
    cases=(1,),
    delta_betas=(0.0, -0.5, -1.0, -1.5, -2.0),
    taus=(0.1, 0.3, 0.5, 0.7, 0.9),
    N: int = 200,
    B: int = 300,
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
    grid_points: int = 50,
) -> McReport:
    """Rejection frequency of the bootstrap kink test per (case, tau,
    delta_beta); delta_beta = 0 rows are the empirical size."""
    rows = []
    for case in cases:
        for db_idx, db in enumerate(delta_betas):
            items = [
                (case, N, rep, seed, db_idx, float(db), tuple(taus), B, alpha,
                 grid_points)
                for rep in range(reps)
            ]
            results = par_map(_power_rep, items, threads)
            for tau in taus:
                flags = [r[tau] for r in results if r[tau] is not None]
                failures = reps - len(flags)
                if failures > MAX_REP_FAILURES * reps:
                    raise EstimationFailedError(
                        f"{failures}/{reps} test replicates failed "
                        f"(case {case}, tau {tau}, delta_beta {db})"
                    )
                rows.append(
                    {
                        "case": case,
                        "tau": tau,
                        "delta_beta": float(db),
                        "reps": len(flags),
                        "failures": failures,
                        "rejection_rate": float(np.mean(flags)),
                    }
                )
    notes = _power_monotonicity_notes(rows)
    return McReport(
        kind="power",
        rows=rows,
        config={
            "reps": reps,
            "cases": list(cases),
            "delta_betas": [float(d) for d in delta_betas],
            "taus": list(taus),
            "N": N,
            "B": B,
            "alpha": alpha,
            "seed": seed,
            "grid_points": grid_points,
            "monotonicity_notes": notes,
        },
    )


def _power_monotonicity_notes(rows) -> list[str]:
    """Soft check: rejection rate nondecreasing in the kink magnitude
    within 2 Monte Carlo standard errors (reported, never asserted)."""
    notes = []
    keys = sorted({(r["case"], r["tau"]) for r in rows})
    for case, tau in keys:
        cells = sorted(
            (r for r in rows if r["case"] == case and r["tau"] == tau),
            key=lambda r: abs(r["delta_beta"]),
        )
        for a, b in zip(cells, cells[1:]):
            se = np.sqrt(
                a["rejection_rate"] * (1 - a["rejection_rate"])
                / max(a["reps"], 1)
            ) + np.sqrt(
                b["rejection_rate"] * (1 - b["rejection_rate"])
                / max(b["reps"], 1)
            )
            if b["rejection_rate"] < a["rejection_rate"] - 2 * se:
                notes.append(
                    f"case {case} tau {tau}: power at delta_beta="
                    f"{b['delta_beta']} ({b['rejection_rate']:.3f}) below "
                    f"delta_beta={a['delta_beta']} ({a['rejection_rate']:.3f}) "
                    "by more than 2 MC SEs"
                )
    return notes


# ---------------------------------------------------------------------------
# Table 2: confidence interval comparison

def _table2_rep(args) -> dict:
    (case, N, rep, seed, methods, taus, kind, alpha, B_boot, run_boot,
     grid_points) = args
    ds = generate(DgpSpec(case=case, N=N, seed=_rep_seed(seed, case, N, rep)))
    spec = SearchSpec.from_dataset(ds, grid_points=grid_points)
    out: dict = {}
    try:
        fit = estimate(ds, taus, spec)
    except KinkQrError as exc:
        return {"failed": str(exc)}
    if "wald" in methods:
        t0 = time.perf_counter()
        try:
            cov = assemble_sandwich(fit, ds, kind=kind)
            ci = wald_ci(fit, cov, alpha)
            out["wald"] = (ci.lower, ci.upper, time.perf_counter() - t0)
        except KinkQrError:
            out["wald"] = None
    if "qrs" in methods:
        t0 = time.perf_counter()
        try:
            ci = invert_ci(ds, taus, fit.t_hat, alpha=alpha, kind=kind)
            out["qrs"] = (ci.lower, ci.upper, time.perf_counter() - t0)
        except KinkQrError:
            out["qrs"] = None
    if "boot" in methods and run_boot:
        t0 = time.perf_counter()
        try:
            ci = subject_bootstrap_ci(
                ds, taus, spec, B=B_boot, alpha=alpha, seed=rep
            )
            out["boot"] = (ci.lower, ci.upper, time.perf_counter() - t0)
        except KinkQrError:
            out["boot"] = None
    return out


def run_table2(
    reps: int = 200,
    cases=(1, 2),
    methods=("wald", "boot", "qrs"),
    taus=CQR_TAUS,
    N: int = 200,
    B_boot: int = 400,
    boot_reps: int | None = None,
    kind: str = "exchangeable",
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
    grid_points: int = 50,
) -> McReport:
    """ECP, mean length, and mean wall time per CI method per case.

    ``boot_reps`` caps how many replicates run the (expensive) subject
    bootstrap; its ECP/EML/time are averaged over those replicates.
    """
    if boot_reps is None:
        boot_reps = reps
    rows = []
    for case in cases:
        items = [
            (case, N, rep, seed, tuple(methods), tuple(taus), kind, alpha,
             B_boot, rep < boot_reps, grid_points)
            for rep in range(reps)
        ]
        results = par_map(_table2_rep, items, threads)
        n_failed = sum(1 for r in results if "failed" in r)
        if n_failed > MAX_REP_FAILURES * reps:
            raise EstimationFailedError(
                f"{n_failed}/{reps} replicates failed (case {case})"
            )
        for method in methods:
            vals = [r[method] for r in results if r.get(method)]
            if not vals:
                continue
            lo = np.array([v[0] for v in vals])
            hi = np.array([v[1] for v in vals])
            tm = np.array([v[2] for v in vals])
            rows.append(
                {
                    "case": case,
                    "N": N,
                    "method": method,
                    "reps": len(vals),
                    "ecp": float(np.mean((lo <= TRUE_T) & (TRUE_T <= hi))),
                    "eml": float(np.mean(hi - lo)),
                    "mean_time_s": float(np.mean(tm)),
                }
            )
    return McReport(
        kind="table2",
        rows=rows,
        config={
            "reps": reps,
            "cases": list(cases),
            "methods": list(methods),
            "taus": list(taus),
            "N": N,
            "B_boot": B_boot,
            "boot_reps": boot_reps,
            "kind": kind,
            "alpha": alpha,
            "seed": seed,
            "grid_points": grid_points,
        },
    )
