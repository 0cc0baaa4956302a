"""Sup-likelihood-ratio test for the existence of a kink at one level,
calibrated by a blockwise wild bootstrap.

The statistic compares the best profiled kink fit over a grid of
candidate change points against the no-kink linear fit.  The bootstrap
perturbs each subject's whole score block with one shared standard
normal multiplier, rebuilding the sup statistic from per-grid-point
score processes; no refitting happens inside the bootstrap loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import (
    LongitudinalDataset,
    kink_design_matrix,
    null_design_matrix,
)
from .covariance import CONDITION_LIMIT, clip_density, hall_sheather_bandwidth
from .errors import InvalidInputError, KinkQrError, TestFailedError
from .estimator import SearchSpec
from .qr import _rho_sum, _solve_levels, check_design_rank

__all__ = ["SlrResult", "null_objective", "slr_statistic", "bootstrap_pvalue", "slr_test"]

DEFAULT_B = 300
MAX_DROPPED_GRID = 0.2


@dataclass
class SlrResult:
    """Sup-likelihood-ratio statistic and its bootstrap calibration."""

    tau: float
    statistic: float
    null_objective: float
    null_coef: np.ndarray
    alt_objective: float
    alt_coef: np.ndarray
    t_hat: float
    t_grid: np.ndarray
    p_value: float | None = None
    B: int = 0
    seed: int | None = None
    bootstrap_stats: np.ndarray | None = None
    n_dropped: int = 0  # grid points whose kink fit failed
    n_singular_v: int = 0  # kept points unusable by the bootstrap
    # per-grid-point pieces reused by the bootstrap (subject score sums
    # and inverse-variance factors, None where singular); not part of
    # the public payload
    _subject_scores: np.ndarray | None = field(default=None, repr=False)
    _v_chol: list | None = field(default=None, repr=False)
    _null_scores: np.ndarray | None = field(default=None, repr=False)
    _v1_chol: np.ndarray | None = field(default=None, repr=False)

    def to_payload(self) -> dict:
        return {
            "tau": self.tau,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "B": self.B,
            "seed": self.seed,
            "t_hat": self.t_hat,
            "null_objective": self.null_objective,
            "alt_objective": self.alt_objective,
            "grid": {
                "points": int(self.t_grid.size),
                "min": float(self.t_grid.min()),
                "max": float(self.t_grid.max()),
                "dropped": self.n_dropped,
            },
        }


def null_objective(dataset: LongitudinalDataset, tau: float):
    """No-kink linear quantile fit: (mean check loss, coefficients)."""
    X = null_design_matrix(dataset.x, dataset.z)
    check_design_rank(X)
    sol = _solve_levels(X, dataset.y, [tau])[0]
    return float(sol.objective), sol.coefficients


def _embed_null(null_coef: np.ndarray, t: float) -> np.ndarray:
    """Null coefficients rewritten in the kink parameterization at t
    (identical fitted values)."""
    a, b = null_coef[0], null_coef[1]
    return np.concatenate([[a + b * t, b, b], null_coef[2:]])


def slr_statistic(
    dataset: LongitudinalDataset,
    tau: float,
    spec: SearchSpec | None = None,
) -> SlrResult:
    """SLR statistic n * (null loss - best profiled kink loss) over the
    candidate grid, together with everything the bootstrap needs.

    The bootstrap score processes for the kink and null designs share
    one residual-sign field, taken from the null fit, and weight the
    score variance with the null-fit density plug-in.  That keeps the
    null design exactly nested in the kink design inside each bootstrap
    replicate (the two quadratic forms then cancel up to the genuine
    extra-parameter direction, matching the limiting law under the null
    hypothesis).

    Grid points where the kink fit fails are dropped; more than 20%
    dropped raises TestFailedError.
    """
    tau = float(tau)
    if spec is None:
        spec = SearchSpec.from_dataset(dataset)
    n = dataset.n
    y = dataset.y

    # null side: fit, density, scores
    Xn = null_design_matrix(dataset.x, dataset.z)
    check_design_rank(Xn)
    bw = hall_sheather_bandwidth(tau, n)
    lo, mid, hi = _solve_levels(Xn, y, [tau - bw, tau, tau + bw])
    L_tilde = float(mid.objective)
    zeta = mid.coefficients
    spacing = Xn @ (hi.coefficients - lo.coefficients)
    f1 = clip_density(spacing, bw)
    V1 = Xn.T @ (f1[:, None] * Xn) / n
    if np.linalg.cond(V1) > CONDITION_LIMIT:
        raise TestFailedError("null score variance is numerically singular")
    v1_chol = np.linalg.cholesky(V1)
    s1 = tau - (mid.residuals < 0.0)
    null_scores = np.add.reduceat(Xn * s1[:, None], dataset.starts[:-1], axis=0)

    ts = np.linspace(spec.lower, spec.upper, spec.grid_points)
    kept_t, losses, subj_scores, v_chols, alt_coefs = [], [], [], [], []
    n_dropped = 0
    n_singular = 0
    for t in ts:
        Xt = kink_design_matrix(dataset.x, dataset.z, float(t))
        try:
            check_design_rank(Xt)
            fmid = _solve_levels(Xt, y, [tau])[0]
        except KinkQrError:
            n_dropped += 1
            continue
        # the null model is nested at every t; never report a worse loss
        loss = float(fmid.objective)
        coef = fmid.coefficients
        if loss > L_tilde:
            coef = _embed_null(zeta, float(t))
            loss = _rho_sum(y - Xt @ coef, tau) / n
        Vt = Xt.T @ (f1[:, None] * Xt) / n
        try:
            if np.linalg.cond(Vt) > CONDITION_LIMIT:
                raise np.linalg.LinAlgError
            vc = np.linalg.cholesky(Vt)
        except np.linalg.LinAlgError:
            vc = None  # bootstrap will skip this point
            n_singular += 1
        kept_t.append(float(t))
        losses.append(loss)
        alt_coefs.append(coef)
        subj_scores.append(np.add.reduceat(Xt * s1[:, None], dataset.starts[:-1], axis=0))
        v_chols.append(vc)

    if n_dropped > MAX_DROPPED_GRID * len(ts) or not kept_t:
        raise TestFailedError(
            f"{n_dropped}/{len(ts)} grid points failed to fit; test unreliable"
        )
    if n_dropped:
        warnings.warn(
            f"dropped {n_dropped}/{len(ts)} grid points with failed kink fits",
            stacklevel=2,
        )

    losses = np.asarray(losses)
    i_best = int(np.argmin(losses))
    stat = float(n * (L_tilde - losses[i_best]))
    return SlrResult(
        tau=tau,
        statistic=stat,
        null_objective=L_tilde,
        null_coef=zeta,
        alt_objective=float(losses[i_best]),
        alt_coef=alt_coefs[i_best],
        t_hat=kept_t[i_best],
        t_grid=np.asarray(kept_t),
        n_dropped=n_dropped,
        n_singular_v=n_singular,
        _subject_scores=np.stack(subj_scores),  # (T, N, p3)
        _v_chol=v_chols,  # list of (p3, p3) or None
        _null_scores=null_scores,  # (N, p2)
        _v1_chol=v1_chol,
    )


def bootstrap_pvalue(
    dataset: LongitudinalDataset,
    tau: float,
    result: SlrResult,
    B: int = DEFAULT_B,
    seed: int = 0,
) -> SlrResult:
    """Blockwise wild bootstrap p-value for a computed SLR statistic.

    Replicate b draws one N(0,1) multiplier per subject from an
    independent stream keyed by (seed, b), so any execution order gives
    identical results.
    """
    if result._subject_scores is None:
        raise InvalidInputError("result does not carry bootstrap scores; "
                                "recompute with slr_statistic")
    if B < 100:
        raise InvalidInputError("B must be >= 100")
    usable = [i for i, vc in enumerate(result._v_chol) if vc is not None]
    T_all = len(result._v_chol)
    if T_all - len(usable) > MAX_DROPPED_GRID * T_all or not usable:
        raise TestFailedError(
            f"{T_all - len(usable)}/{T_all} grid points have singular "
            "score variance; bootstrap unreliable"
        )
    if len(usable) < T_all:
        warnings.warn(
            f"bootstrap sup skips {T_all - len(usable)}/{T_all} grid points "
            "with singular score variance",
            stacklevel=2,
        )
    N = dataset.N
    n = dataset.n
    U = np.empty((B, N))
    for b in range(B):
        U[b] = np.random.default_rng([seed, b]).standard_normal(N)

    S = result._subject_scores  # (T, N, p3)
    quad = np.empty((B, len(usable)))
    for pos, ti in enumerate(usable):
        Gt = U @ S[ti] / np.sqrt(n)  # (B, p3)
        w = np.linalg.solve(result._v_chol[ti], Gt.T)  # (p3, B)
        quad[:, pos] = np.sum(w * w, axis=0)
    G1 = U @ result._null_scores / np.sqrt(n)
    w1 = np.linalg.solve(result._v1_chol, G1.T)
    quad1 = np.sum(w1 * w1, axis=0)
    stats = 0.5 * (quad.max(axis=1) - quad1)

    p = float(np.mean(stats > result.statistic))
    result.p_value = p
    result.B = int(B)
    result.seed = int(seed)
    result.bootstrap_stats = stats
    return result


def slr_test(
    dataset: LongitudinalDataset,
    tau: float,
    spec: SearchSpec | None = None,
    B: int = DEFAULT_B,
    seed: int = 0,
) -> SlrResult:
    """Statistic plus bootstrap p-value in one call."""
    res = slr_statistic(dataset, tau, spec)
    return bootstrap_pvalue(dataset, tau, res, B=B, seed=seed)
