"""Plug-in sandwich covariance for the composite kink estimator.

The outer matrix collects per-observation score carriers weighted by a
difference-quotient conditional density estimate; the middle matrix
adds within-subject dependence through sign-concordance probabilities
at one level (delta) and across two levels (xi).  The sandwich is
assembled in the orientation that makes the outer matrix positive
definite, which leaves the covariance unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import LongitudinalDataset, QuantileGrid, kink_design_matrix
from .errors import (
    DensityEstimationError,
    InvalidInputError,
    KinkQrError,
    NearSingularCovarianceError,
)
from .estimator import KinkFit
from .qr import _solve_levels

__all__ = [
    "hall_sheather_bandwidth",
    "difference_quotient_density",
    "estimate_density",
    "DensityEstimates",
    "score_carrier",
    "WorkingCorrelation",
    "estimate_concordance",
    "CovarianceEstimate",
    "assemble_sandwich",
]

# Spacing below this counts as a crossed/immeasurable difference quotient.
SPACING_FLOOR = 1e-10
# Perturbed levels are kept inside this open interval.
LEVEL_MARGIN = 1e-3
CONDITION_LIMIT = 1e12
MIN_PAIRS_PER_LAG = 10


# ---------------------------------------------------------------------------
# Conditional density estimation

def hall_sheather_bandwidth(tau: float, n: int) -> float:
    """Difference-quotient bandwidth, clipped so tau +/- bw stays inside
    (0.001, 0.999)."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must be in (0,1), got {tau}")
    if n < 2:
        raise InvalidInputError("n must be >= 2")
    z = norm.ppf(tau)
    bw = 1.57 * n ** (-1.0 / 3.0) * (
        1.5 * norm.pdf(z) ** 2 / (2.0 * z ** 2 + 1.0)
    ) ** (1.0 / 3.0)
    return float(min(bw, tau - LEVEL_MARGIN, 1.0 - LEVEL_MARGIN - tau))


def clip_density(spacing: np.ndarray, bandwidth: float) -> np.ndarray:
    """max{0, 2*bw / spacing}: crossed or degenerate (<= 1e-10) perturbed
    fits yield a zero density plug-in."""
    spacing = np.asarray(spacing, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(spacing > SPACING_FLOOR, 2.0 * bandwidth / spacing, 0.0)


def difference_quotient_density(
    X: np.ndarray,
    y: np.ndarray,
    tau: float,
    bandwidth: float | None = None,
) -> tuple[np.ndarray, float, int]:
    """Per-observation density of y at its tau-th conditional quantile.

    Fits the same design at tau +/- bandwidth and returns
    max{0, 2*bw / spacing} per row, the bandwidth used, and the number
    of rows clipped to zero because the perturbed fits crossed.
    """
    bw = hall_sheather_bandwidth(tau, len(y)) if bandwidth is None else float(bandwidth)
    if not 0.0 < bw < min(tau, 1.0 - tau):
        raise InvalidInputError(f"bandwidth {bw} invalid for tau={tau}")
    try:
        lo, hi = _solve_levels(X, y, [tau - bw, tau + bw])
    except KinkQrError as exc:
        raise DensityEstimationError(
            f"perturbed-level fit failed at tau={tau}+/-{bw:.4g}: {exc}"
        ) from exc
    spacing = X @ (hi.coefficients - lo.coefficients)
    f = clip_density(spacing, bw)
    return f, bw, int(np.sum(spacing <= SPACING_FLOOR))


@dataclass(frozen=True)
class DensityEstimates:
    """Nonnegative density plug-ins, one per observation and level."""

    f_hat: np.ndarray  # (K, n)
    bandwidths: tuple[float, ...]
    taus: tuple[float, ...]
    n_zero_clipped: int = 0

    @property
    def zero_fraction(self) -> float:
        return float(self.n_zero_clipped) / self.f_hat.size


def estimate_density(fit: KinkFit, dataset: LongitudinalDataset, tau=None) -> DensityEstimates:
    """Density plug-ins from kink-design refits at tau +/- bandwidth with
    t fixed at the fitted change point (no re-profiling)."""
    taus = fit.taus if tau is None else QuantileGrid.of(tau).taus
    X = kink_design_matrix(dataset.x, dataset.z, fit.t_hat)
    rows, bws, nclip = [], [], 0
    for t in taus:
        f, bw, nz = difference_quotient_density(X, dataset.y, t)
        rows.append(f)
        bws.append(bw)
        nclip += nz
    return DensityEstimates(
        f_hat=np.vstack(rows), bandwidths=tuple(bws), taus=tuple(taus),
        n_zero_clipped=nclip,
    )


# ---------------------------------------------------------------------------
# Score carriers

def score_carrier(obs, theta, k: int, K: int) -> np.ndarray:
    """Score carrier for level k (1-based): zeros except block k, which
    holds the kink design row, and the last entry, which holds the
    derivative of the fitted quantile in t."""
    x, z = obs
    z = np.asarray(z, dtype=float).ravel()
    q = z.size
    theta = np.asarray(theta, dtype=float).ravel()
    p3 = q + 3
    if theta.size != K * p3 + 1:
        raise InvalidInputError(
            f"theta has length {theta.size}, expected K(q+3)+1 = {K * p3 + 1}"
        )
    if not 1 <= k <= K:
        raise InvalidInputError(f"k must be in 1..{K}")
    eta = theta[:-1].reshape(K, p3)
    t = theta[-1]
    out = np.zeros(K * p3 + 1)
    row = out[(k - 1) * p3: k * p3]
    row[0] = 1.0
    if x <= t:
        row[1] = x - t
        out[-1] = -eta[k - 1, 1]
    else:
        row[2] = x - t
        out[-1] = -eta[k - 1, 2]
    row[3:] = z
    return out


def _carrier_blocks(fit: KinkFit, dataset: LongitudinalDataset):
    """Compressed carriers: design X(t_hat) (n, p3) and per-level slope
    derivative b_k (K, n) with b = -beta1*1[x<=t] - beta2*1[x>t]."""
    X = kink_design_matrix(dataset.x, dataset.z, fit.t_hat)
    left = dataset.x <= fit.t_hat
    b = np.where(left[None, :], -fit.beta1[:, None], -fit.beta2[:, None])
    return X, b


# ---------------------------------------------------------------------------
# Pair sums over within-subject ordered pairs

def _subject_sums(dataset: LongitudinalDataset, A: np.ndarray) -> np.ndarray:
    # A: (n, d) -> per-subject column sums (N, d)
    return np.add.reduceat(A, dataset.starts[:-1], axis=0)


def pooled_pair_products(dataset: LongitudinalDataset, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """sum_i sum_{j != j'} A_ij B_ij'^T for row matrices A, B (n, -)."""
    GA = _subject_sums(dataset, A)
    GB = _subject_sums(dataset, B)
    return GA.T @ GB - A.T @ B


def _lag_indices(dataset: LongitudinalDataset, lag: int) -> np.ndarray:
    idx = np.arange(dataset.n - lag)
    same = dataset.subject_index[idx] == dataset.subject_index[idx + lag]
    return idx[same]


def lagged_pair_products(dataset: LongitudinalDataset, A, B, lag: int):
    """sum over ordered within-subject pairs at |j-j'| = lag of
    A_ij B_ij'^T; returns (matrix, ordered pair count)."""
    idx = _lag_indices(dataset, lag)
    if idx.size == 0:
        return np.zeros((A.shape[1], B.shape[1])), 0
    M = A[idx].T @ B[idx + lag] + A[idx + lag].T @ B[idx]
    return M, 2 * idx.size


# ---------------------------------------------------------------------------
# Working correlation (delta / xi concordance probabilities)

def _frechet_clip_delta(val: float, tau: float) -> float:
    return float(np.clip(val, max(0.0, 2.0 * tau - 1.0), tau))


def _frechet_clip_xi(val: float, tk: float, tl: float) -> float:
    return float(np.clip(val, max(0.0, tk + tl - 1.0), min(tk, tl)))


@dataclass(frozen=True)
class WorkingCorrelation:
    """Concordance-probability estimates under a working structure.

    ``delta[k, lag-1]`` and ``xi[k, l, lag-1]`` hold per-lag values for
    the ar1 kind; exchangeable and independence kinds store a single
    column (the pooled or definitional value repeated).
    """

    kind: str
    taus: tuple[float, ...]
    delta: np.ndarray  # (K, L)
    xi: np.ndarray  # (K, K, L)
    max_lag: int

    def delta_hat(self, k: int, lag: int = 1) -> float:
        j = min(lag, self.max_lag) - 1 if self.kind == "ar1" else 0
        return float(self.delta[k, j])

    def xi_hat(self, k: int, l: int, lag: int = 1) -> float:
        j = min(lag, self.max_lag) - 1 if self.kind == "ar1" else 0
        return float(self.xi[k, l, j])

    def pair_weight(self, k: int, l: int, lag: int = 1) -> float:
        """delta - tau_k^2 (k = l) or xi - tau_k tau_l (k != l)."""
        if k == l:
            return self.delta_hat(k, lag) - self.taus[k] ** 2
        return self.xi_hat(k, l, lag) - self.taus[k] * self.taus[l]


def estimate_concordance(
    fit: KinkFit,
    dataset: LongitudinalDataset,
    taus=None,
    kind: str = "exchangeable",
) -> WorkingCorrelation:
    """Estimate delta/xi from the fit's residual signs.

    exchangeable pools all within-subject ordered pairs; ar1 estimates
    one value per lag (falling back to the pooled value, with a
    warning, when a lag has fewer than 10 pairs); independence returns
    the definitional products of levels.
    """
    if kind not in ("exchangeable", "ar1", "independence"):
        raise InvalidInputError(f"unknown working correlation kind: {kind}")
    taus = fit.taus if taus is None else QuantileGrid.of(taus).taus
    K = len(taus)
    tarr = np.asarray(taus)
    max_lag = int(dataset.counts.max()) - 1

    if kind == "independence":
        delta = (tarr ** 2)[:, None]
        xi = (tarr[:, None] * tarr[None, :])[:, :, None]
        return WorkingCorrelation(kind, tuple(taus), delta, xi, max_lag=1)

    if fit.residuals is None or fit.residuals.shape != (K, dataset.n):
        raise InvalidInputError("fit does not carry residuals for these levels")
    I = (fit.residuals < 0.0).astype(float)  # (K, n)

    # pooled (exchangeable) estimates
    npairs_total = float(np.sum(dataset.counts * (dataset.counts - 1)))
    G = _subject_sums(dataset, I.T)  # (N, K)
    pooled_delta = np.empty(K)
    pooled_xi = np.empty((K, K))
    cross = G.T @ G - I @ I.T  # (K, K) ordered-pair sums
    for k in range(K):
        pooled_delta[k] = _frechet_clip_delta(cross[k, k] / npairs_total, tarr[k])
        for l in range(K):
            pooled_xi[k, l] = _frechet_clip_xi(
                cross[k, l] / npairs_total, tarr[k], tarr[l]
            )

    if kind == "exchangeable":
        return WorkingCorrelation(
            kind, tuple(taus), pooled_delta[:, None], pooled_xi[:, :, None],
            max_lag=1,
        )

    # ar1: per-lag estimates with exchangeable fallback
    delta = np.empty((K, max_lag))
    xi = np.empty((K, K, max_lag))
    fell_back = []
    for lag in range(1, max_lag + 1):
        M, cnt = lagged_pair_products(dataset, I.T, I.T, lag)
        if cnt < MIN_PAIRS_PER_LAG:
            delta[:, lag - 1] = pooled_delta
            xi[:, :, lag - 1] = pooled_xi
            fell_back.append(lag)
            continue
        for k in range(K):
            delta[k, lag - 1] = _frechet_clip_delta(M[k, k] / cnt, tarr[k])
            for l in range(K):
                xi[k, l, lag - 1] = _frechet_clip_xi(M[k, l] / cnt, tarr[k], tarr[l])
    if fell_back:
        warnings.warn(
            f"ar1 concordance: lags {fell_back} have fewer than "
            f"{MIN_PAIRS_PER_LAG} pairs; using pooled estimates there",
            stacklevel=2,
        )
    return WorkingCorrelation(kind, tuple(taus), delta, xi, max_lag=max_lag)


# ---------------------------------------------------------------------------
# Sandwich assembly

@dataclass
class CovarianceEstimate:
    """Lambda, H, Sigma = Lambda^-1 H Lambda^-1 and the implied SEs."""

    lambda_hat: np.ndarray
    h_hat: np.ndarray
    sigma_hat: np.ndarray
    se: np.ndarray
    taus: tuple[float, ...]
    kind: str
    n: int
    density_zero_fraction: float = 0.0

    @property
    def se_t(self) -> float:
        """Standard error of the change-point estimate."""
        return float(self.se[-1])

    def to_payload(self) -> dict:
        d = self.lambda_hat.shape[0]
        return {
            "dimension": d,
            "taus": list(self.taus),
            "kind": self.kind,
            "n": self.n,
            "lambda": self.lambda_hat.ravel().tolist(),
            "h": self.h_hat.ravel().tolist(),
            "sigma": self.sigma_hat.ravel().tolist(),
            "se": self.se.tolist(),
            "density_zero_fraction": self.density_zero_fraction,
        }


def _scatter(H: np.ndarray, P: np.ndarray, k: int, l: int, p3: int) -> None:
    # place a compressed (p3+1)x(p3+1) block into rows of level k and
    # columns of level l, sharing the final t row/column
    last = H.shape[0] - 1
    rk = slice(k * p3, (k + 1) * p3)
    cl = slice(l * p3, (l + 1) * p3)
    H[rk, cl] += P[:p3, :p3]
    H[rk, last] += P[:p3, p3]
    H[last, cl] += P[p3, :p3]
    H[last, last] += P[p3, p3]


def assemble_lambda_h(
    fit: KinkFit,
    dataset: LongitudinalDataset,
    kind: str = "exchangeable",
    densities: DensityEstimates | None = None,
    correlation: WorkingCorrelation | None = None,
):
    """Assemble the outer (Lambda) and middle (H) matrices only.

    Returns ``(lambda_hat, h_hat, densities, correlation)``; useful on
    its own when the full sandwich is not invertible or not needed.
    """
    taus = fit.taus
    K = len(taus)
    tarr = np.asarray(taus)
    n = dataset.n
    X, b = _carrier_blocks(fit, dataset)
    p3 = X.shape[1]
    d = K * p3 + 1

    if densities is None:
        densities = estimate_density(fit, dataset)
    if correlation is None:
        correlation = estimate_concordance(fit, dataset, kind=kind)
    F = densities.f_hat  # (K, n)

    # Lambda: n^-1 sum_k sum_ij f_ij h_k h_k'
    lam = np.zeros((d, d))
    for k in range(K):
        C = np.column_stack([X, b[k]])
        _scatter(lam, C.T @ (F[k][:, None] * C), k, k, p3)
    lam /= n

    # H: lead terms over observations plus within-subject pair terms
    H = np.zeros((d, d))
    Cs = [np.column_stack([X, b[k]]) for k in range(K)]
    Gs = [_subject_sums(dataset, C) for C in Cs]
    max_lag = int(dataset.counts.max()) - 1
    for k in range(K):
        for l in range(K):
            a_kl = (
                tarr[k] * (1.0 - tarr[k])
                if k == l
                else min(tarr[k], tarr[l]) - tarr[k] * tarr[l]
            )
            P = a_kl * (Cs[k].T @ Cs[l])
            if correlation.kind == "ar1":
                for lag in range(1, max_lag + 1):
                    M, cnt = lagged_pair_products(dataset, Cs[k], Cs[l], lag)
                    if cnt:
                        P += correlation.pair_weight(k, l, lag) * M
            else:
                w = correlation.pair_weight(k, l)
                P += w * (Gs[k].T @ Gs[l] - Cs[k].T @ Cs[l])
            _scatter(H, P, k, l, p3)
    H /= n
    H = 0.5 * (H + H.T)
    return lam, H, densities, correlation


def assemble_sandwich(
    fit: KinkFit,
    dataset: LongitudinalDataset,
    kind: str = "exchangeable",
    densities: DensityEstimates | None = None,
    correlation: WorkingCorrelation | None = None,
) -> CovarianceEstimate:
    """Assemble Lambda, H and the sandwich at the fitted parameters."""
    lam, H, densities, correlation = assemble_lambda_h(
        fit, dataset, kind=kind, densities=densities, correlation=correlation
    )
    n = dataset.n
    cond = np.linalg.cond(lam)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NearSingularCovarianceError(
            f"Lambda is near singular (condition number {cond:.3e}); "
            "consider wider quantile spacing or more data"
        )
    sigma = np.linalg.solve(lam, np.linalg.solve(lam, H).T).T
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.maximum(np.diag(sigma), 0.0) / n)
    return CovarianceEstimate(
        lambda_hat=lam,
        h_hat=H,
        sigma_hat=sigma,
        se=se,
        taus=fit.taus,
        kind=correlation.kind,
        n=n,
        density_zero_fraction=densities.zero_fraction,
    )
