"""Confidence intervals for the common change point and the
cross-quantile commonality test.

Three constructions: Wald (normal asymptotics with sandwich SE),
subject-level bootstrap percentiles, and inversion of a rank score test
whose K-vector of projected partial scores is chi-square with K degrees
of freedom under a correct null value.
"""

from __future__ import annotations

import sys
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .covariance import (
    WorkingCorrelation,
    assemble_sandwich,
    difference_quotient_density,
    lagged_pair_products,
    pooled_pair_products,
    _frechet_clip_xi,
    _subject_sums,
)
from .data import LongitudinalDataset, QuantileGrid, kink_design_matrix
from .errors import InvalidInputError, KinkQrError, TestFailedError
from .estimator import KinkFit, SearchSpec, estimate, _profile_fit
from .qr import psi

__all__ = [
    "RestrictedFit",
    "RankScoreResult",
    "IntervalResult",
    "TestResult",
    "restricted_fit",
    "projected_score",
    "rank_score_statistic",
    "invert_ci",
    "wald_ci",
    "subject_bootstrap_ci",
    "commonality_wald_test",
]

PSI_MIN_EIG = 1e-10
MAX_BOOT_FAILURES = 0.1


@dataclass(frozen=True)
class RestrictedFit:
    """Joint non-crossing fit with the change point pinned at t0."""

    t0: float
    taus: tuple[float, ...]
    eta: np.ndarray  # (K, q+3)
    residuals: np.ndarray  # (K, n)
    objective: float


@dataclass
class RankScoreResult:
    t0: float
    taus: tuple[float, ...]
    T_n: np.ndarray
    Psi_n: np.ndarray
    statistic: float
    df: int
    p_value: float
    alpha: float
    reject: bool


@dataclass
class IntervalResult:
    method: str  # wald | boot | qrs
    lower: float
    upper: float
    alpha: float
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_payload(self) -> dict:
        return {
            "method": self.method,
            "lower": self.lower,
            "upper": self.upper,
            "alpha": self.alpha,
            "meta": self.meta,
        }


@dataclass
class TestResult:
    method: str
    statistic: float
    df: int
    p_value: float
    meta: dict = field(default_factory=dict)

    def to_payload(self) -> dict:
        return {
            "method": self.method,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# Restricted fit and projected scores

def restricted_fit(dataset: LongitudinalDataset, taus, t0: float) -> RestrictedFit:
    """Kink-design quantile fits at fixed t0, jointly non-crossing."""
    grid = QuantileGrid.of(taus)
    xs = np.sort(dataset.x)
    if not xs[0] < t0 < xs[-1]:
        raise InvalidInputError(f"t0={t0} outside the observed x range")
    sol = _profile_fit(dataset, np.asarray(grid.taus), float(t0))
    return RestrictedFit(
        t0=float(t0),
        taus=grid.taus,
        eta=np.atleast_2d(sol.coefficients),
        residuals=np.atleast_2d(sol.residuals),
        objective=float(sol.objective),
    )


def projected_score(
    dataset: LongitudinalDataset,
    fit_at_t0: RestrictedFit,
    k: int,
    weighting: str = "density",
    f_hat: np.ndarray | None = None,
) -> np.ndarray:
    """Partial score in t projected off the coefficient score space.

    Level index ``k`` is 0-based.  ``weighting="density"`` weights the
    projection by difference-quotient density plug-ins (supply
    ``f_hat`` to reuse precomputed values); ``"homoscedastic"`` uses the
    identity weighting, which needs no density estimate.
    """
    if weighting not in ("density", "homoscedastic"):
        raise InvalidInputError(f"unknown weighting: {weighting}")
    t0 = fit_at_t0.t0
    M = kink_design_matrix(dataset.x, dataset.z, t0)
    eta_k = fit_at_t0.eta[k]
    left = dataset.x <= t0
    B = np.where(left, -eta_k[1], -eta_k[2])
    if weighting == "density":
        if f_hat is None:
            f_hat, _, _ = difference_quotient_density(
                M, dataset.y, fit_at_t0.taus[k]
            )
        ups = f_hat
    else:
        ups = np.ones(dataset.n)
    MU = M * ups[:, None]
    gram = M.T @ MU
    coef = np.linalg.solve(gram, MU.T @ B)
    return B - M @ coef


def _concordance_from_residuals(
    dataset: LongitudinalDataset,
    taus: tuple[float, ...],
    residuals: np.ndarray,
    kind: str,
) -> WorkingCorrelation:
    """WorkingCorrelation computed from an arbitrary residual matrix."""
    from .covariance import estimate_concordance

    shim = KinkFit(
        t_hat=0.0,
        eta_hat=np.zeros((len(taus), 3 + dataset.q)),
        objective=0.0,
        search_interval=(0.0, 1.0),
        taus=taus,
        residuals=residuals,
    )
    return estimate_concordance(shim, dataset, kind=kind)


def rank_score_statistic(
    dataset: LongitudinalDataset,
    taus,
    t0: float,
    kind: str = "exchangeable",
    alpha: float = 0.05,
    weighting: str = "density",
) -> RankScoreResult:
    """Chi-square rank score test of a candidate common change point."""
    grid = QuantileGrid.of(taus)
    K = grid.K
    tarr = np.asarray(grid.taus)
    n = dataset.n
    rfit = restricted_fit(dataset, grid, t0)
    M = kink_design_matrix(dataset.x, dataset.z, float(t0))

    bstars = np.empty((K, n))
    for k in range(K):
        f_hat = None
        if weighting == "density":
            f_hat, _, _ = difference_quotient_density(M, dataset.y, tarr[k])
        bstars[k] = projected_score(dataset, rfit, k, weighting=weighting, f_hat=f_hat)

    scores = np.vstack([psi(rfit.residuals[k], tarr[k]) for k in range(K)])
    T_n = np.sum(bstars * scores, axis=1) / np.sqrt(n)

    corr = _concordance_from_residuals(dataset, grid.taus, rfit.residuals, kind)
    Bt = bstars.T  # (n, K)
    G = _subject_sums(dataset, Bt)
    lead_cross = Bt.T @ Bt  # (K, K) of sum b*_k b*_l over rows
    pooled_pairs = G.T @ G - lead_cross
    max_lag = int(dataset.counts.max()) - 1
    if corr.kind == "ar1":
        lag_pairs = []
        for lag in range(1, max_lag + 1):
            Mlag, cnt = lagged_pair_products(dataset, Bt, Bt, lag)
            lag_pairs.append((lag, Mlag, cnt))

    Psi = np.empty((K, K))
    for k in range(K):
        for l in range(K):
            a_kl = (
                tarr[k] * (1.0 - tarr[k])
                if k == l
                else min(tarr[k], tarr[l]) - tarr[k] * tarr[l]
            )
            val = a_kl * lead_cross[k, l]
            if corr.kind == "ar1":
                for lag, Mlag, cnt in lag_pairs:
                    if cnt:
                        val += corr.pair_weight(k, l, lag) * Mlag[k, l]
            else:
                val += corr.pair_weight(k, l) * pooled_pairs[k, l]
            Psi[k, l] = val / n
    Psi = 0.5 * (Psi + Psi.T)

    eigmin = float(np.linalg.eigvalsh(Psi)[0])
    if eigmin < PSI_MIN_EIG:
        raise TestFailedError(
            f"score covariance not positive definite (min eigenvalue "
            f"{eigmin:.3e}); the test requires a strictly positive "
            "definite score covariance"
        )
    stat = float(T_n @ np.linalg.solve(Psi, T_n))
    p = float(chi2.sf(stat, K))
    return RankScoreResult(
        t0=float(t0),
        taus=grid.taus,
        T_n=T_n,
        Psi_n=Psi,
        statistic=stat,
        df=K,
        p_value=p,
        alpha=float(alpha),
        reject=bool(p < alpha),
    )


# ---------------------------------------------------------------------------
# Confidence intervals

def invert_ci(
    dataset: LongitudinalDataset,
    taus,
    t_hat: float,
    delta: float | None = None,
    alpha: float = 0.05,
    max_steps: int = 200,
    kind: str = "exchangeable",
    weighting: str = "density",
) -> IntervalResult:
    """Rank-score test inversion: step away from the estimate in
    increments of delta until the first rejection on each side."""
    x = dataset.x
    xs = np.sort(x)
    if delta is None:
        delta = float((xs[-1] - xs[0]) / 400.0)
    if delta <= 0:
        raise InvalidInputError("delta must be positive")
    interior = (float(xs[1]), float(xs[-2]))

    def scan(direction: int):
        bound = float(t_hat)
        for k in range(1, max_steps + 1):
            t0 = t_hat + direction * k * delta
            if not interior[0] < t0 < interior[1]:
                return bound, True, k - 1  # ran off the data interior
            try:
                res = rank_score_statistic(
                    dataset, taus, t0, kind=kind, alpha=alpha, weighting=weighting
                )
            except KinkQrError:
                return bound, True, k - 1
            if res.reject:
                return bound, False, k
            bound = t0
        return bound, True, max_steps

    upper, open_up, steps_up = scan(+1)
    lower, open_lo, steps_lo = scan(-1)
    return IntervalResult(
        method="qrs",
        lower=lower,
        upper=upper,
        alpha=float(alpha),
        meta={
            "delta": delta,
            "steps_up": steps_up,
            "steps_down": steps_lo,
            "open_upper": open_up,
            "open_lower": open_lo,
            "kind": kind,
            "weighting": weighting,
        },
    )


def wald_ci(fit: KinkFit, covariance, alpha: float = 0.05) -> IntervalResult:
    """Normal-asymptotics interval t_hat +/- z_{alpha/2} SE(t_hat)."""
    se = float(covariance.se_t)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    meta = {"se": se, "z": z}
    if se == 0.0:
        meta["degenerate"] = True
    return IntervalResult(
        method="wald",
        lower=fit.t_hat - z * se,
        upper=fit.t_hat + z * se,
        alpha=float(alpha),
        meta=meta,
    )


def subject_bootstrap_ci(
    dataset: LongitudinalDataset,
    taus,
    spec: SearchSpec | None = None,
    B: int = 400,
    alpha: float = 0.05,
    seed: int = 0,
    progress: bool = False,
) -> IntervalResult:
    """Percentile interval from re-estimating on subject resamples.

    Replicate b resamples N subjects with replacement using a stream
    keyed by (seed, b) and re-runs the full two-stage estimate.  With
    ``progress=True`` a counter goes to standard error every ~10% of
    the replicates (these runs take minutes).
    """
    if B < 100:
        raise InvalidInputError("B must be >= 100")
    grid = QuantileGrid.of(taus)
    if spec is None:
        spec = SearchSpec.from_dataset(dataset)
    step = max(1, B // 10)
    t_stars = []
    failures = 0
    for b in range(B):
        if progress and b % step == 0:
            print(f"subject bootstrap: replicate {b}/{B}",
                  file=sys.stderr, flush=True)
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, dataset.N, dataset.N)
        ds_b = dataset.resampled(idx)
        try:
            with warnings.catch_warnings():
                # resampling legitimately shifts the order statistics
                warnings.simplefilter("ignore", UserWarning)
                spec_b = SearchSpec.from_dataset(
                    ds_b,
                    t_min=spec.lower,
                    t_max=spec.upper,
                    grid_points=spec.grid_points,
                    refine=spec.refine,
                )
            t_stars.append(estimate(ds_b, grid, spec_b).t_hat)
        except KinkQrError:
            failures += 1
    if failures > MAX_BOOT_FAILURES * B:
        raise TestFailedError(
            f"{failures}/{B} bootstrap replicates failed to fit"
        )
    lo, hi = np.quantile(t_stars, [alpha / 2.0, 1.0 - alpha / 2.0])
    return IntervalResult(
        method="boot",
        lower=float(lo),
        upper=float(hi),
        alpha=float(alpha),
        meta={"B": int(B), "seed": int(seed), "failures": failures},
    )


# ---------------------------------------------------------------------------
# Commonality of change points across quantiles

def _cross_xi(dataset, res_k, res_l, tau_k, tau_l) -> float:
    """Pooled within-subject cross-level sign concordance."""
    Ik = (res_k < 0.0).astype(float)[:, None]
    Il = (res_l < 0.0).astype(float)[:, None]
    npairs = float(np.sum(dataset.counts * (dataset.counts - 1)))
    val = pooled_pair_products(dataset, Ik, Il)[0, 0] / npairs
    return _frechet_clip_xi(val, tau_k, tau_l)


def commonality_wald_test(
    dataset: LongitudinalDataset,
    taus,
    spec: SearchSpec | None = None,
    kind: str = "exchangeable",
    cross: str = "hblocks",
) -> TestResult:
    """Wald test that per-quantile change points share one location.

    Fits K separate single-level kink models, forms successive
    differences of their change-point estimates, and studentizes with
    per-level sandwich variances plus cross-level covariances built
    from the score-covariance cross blocks of the two fits
    (``cross="independence"`` zeroes the cross terms instead).
    """
    grid = QuantileGrid.of(taus)
    K = grid.K
    if K < 2:
        raise InvalidInputError("commonality test needs K >= 2 levels")
    if cross not in ("hblocks", "independence"):
        raise InvalidInputError(f"unknown cross-covariance mode: {cross}")
    tarr = np.asarray(grid.taus)
    n = dataset.n

    fits, covs = [], []
    for tau in grid.taus:
        f = estimate(dataset, [tau], spec)
        fits.append(f)
        covs.append(assemble_sandwich(f, dataset, kind=kind))

    t_vec = np.array([f.t_hat for f in fits])
    Sigma_t = np.diag([c.se_t ** 2 for c in covs])

    if cross == "hblocks":
        # per-level carriers c_k = (X_ij(t_k), slope derivative)
        Cs, lam_invs = [], []
        for f, c in zip(fits, covs):
            X = kink_design_matrix(dataset.x, dataset.z, f.t_hat)
            left = dataset.x <= f.t_hat
            b = np.where(left, -f.beta1[0], -f.beta2[0])
            Cs.append(np.column_stack([X, b]))
            lam_invs.append(np.linalg.inv(c.lambda_hat))
        for k in range(K):
            for l in range(k + 1, K):
                a_kl = min(tarr[k], tarr[l]) - tarr[k] * tarr[l]
                xi = _cross_xi(
                    dataset, fits[k].residuals[0], fits[l].residuals[0],
                    tarr[k], tarr[l],
                )
                w = xi - tarr[k] * tarr[l]
                Hkl = (
                    a_kl * (Cs[k].T @ Cs[l])
                    + w * pooled_pair_products(dataset, Cs[k], Cs[l])
                ) / n
                cov_kl = (lam_invs[k] @ Hkl @ lam_invs[l])[-1, -1] / n
                Sigma_t[k, l] = Sigma_t[l, k] = cov_kl

    C = np.zeros((K - 1, K))
    for j in range(K - 1):
        C[j, j], C[j, j + 1] = -1.0, 1.0
    d = C @ t_vec
    Vd = C @ Sigma_t @ C.T
    try:
        stat = float(d @ np.linalg.solve(Vd, d))
    except np.linalg.LinAlgError as exc:
        raise TestFailedError(f"contrast covariance is singular: {exc}") from exc
    if not np.isfinite(stat) or stat < 0:
        raise TestFailedError("contrast covariance is not positive definite")
    p = float(chi2.sf(stat, K - 1))
    return TestResult(
        method="commonality-wald",
        statistic=stat,
        df=K - 1,
        p_value=p,
        meta={
            "t_hats": t_vec.tolist(),
            "cross": cross,
            "kind": kind,
            "taus": list(grid.taus),
        },
    )
