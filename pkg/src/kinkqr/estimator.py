"""Two-stage profile estimation of the composite kink model.

Stage 1 fits the K quantile levels jointly (with non-crossing) at a
candidate change point t; stage 2 minimizes the profiled objective over
t with a coarse grid followed by bounded Brent refinement inside the
bracketing grid cell.  The grid guards against the multimodality of the
piecewise profile; refinement recovers the minimizer to ~1e-6.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .data import LongitudinalDataset, QuantileGrid, kink_design_matrix
from .errors import (
    DegenerateProfileError,
    EstimationFailedError,
    InvalidInputError,
    KinkQrError,
    NonConvergenceError,
    SingularDesignError,
)
from .qr import QrSolution, _fit_noncrossing_checked, _rho_sum, check_design_rank

__all__ = [
    "SearchSpec",
    "KinkFit",
    "composite_objective",
    "profile_objective",
    "estimate",
    "predict_quantiles",
]

# Flat-profile threshold and boundary margin defaults.
FLAT_TOL = 1e-12
DEFAULT_GRID = 50
DEFAULT_MARGIN = 0.005
MAX_GRID_FAILURES = 0.2


@dataclass(frozen=True)
class SearchSpec:
    """Search interval and grid resolution for the change point.

    ``lower``/``upper`` must lie strictly inside the open interval
    between the 2nd and (n-1)th order statistics of the pooled x; use
    :meth:`from_dataset` to construct them that way.
    """

    lower: float
    upper: float
    grid_points: int = DEFAULT_GRID
    refine: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise InvalidInputError("search bounds must be finite")
        if not self.lower < self.upper:
            raise InvalidInputError(
                f"need lower < upper, got [{self.lower}, {self.upper}]"
            )
        if int(self.grid_points) < 16:
            raise InvalidInputError("grid_points must be >= 16")
        object.__setattr__(self, "grid_points", int(self.grid_points))

    @classmethod
    def from_dataset(
        cls,
        dataset: LongitudinalDataset,
        t_min: float | None = None,
        t_max: float | None = None,
        grid_points: int = DEFAULT_GRID,
        refine: bool = True,
        margin: float = DEFAULT_MARGIN,
    ) -> "SearchSpec":
        """Default interval: [min(x)+eps, max(x)-eps] intersected with the
        open interval between the 2nd and (n-1)th x order statistics."""
        xs = np.sort(dataset.x)
        m1, m2 = float(xs[0]), float(xs[-1])
        rng = m2 - m1
        if rng <= 0:
            raise InvalidInputError("threshold covariate x is constant")
        eps = margin * rng
        inset = 1e-9 * max(rng, 1.0)
        x2, xn1 = float(xs[1]), float(xs[-2])
        lo = max(m1 + eps if t_min is None else float(t_min), x2 + inset)
        hi = min(m2 - eps if t_max is None else float(t_max), xn1 - inset)
        if t_min is not None and t_min < x2:
            warnings.warn(
                f"t_min={t_min} lies outside (X_(2), X_(n-1)); clipped to {lo}",
                stacklevel=2,
            )
        if t_max is not None and t_max > xn1:
            warnings.warn(
                f"t_max={t_max} lies outside (X_(2), X_(n-1)); clipped to {hi}",
                stacklevel=2,
            )
        if not lo < hi:
            raise InvalidInputError(
                f"empty change-point search interval [{lo}, {hi}]"
            )
        return cls(lower=lo, upper=hi, grid_points=grid_points, refine=refine)


@dataclass
class KinkFit:
    """Composite fit: per-level coefficients plus the shared change point.

    ``eta_hat`` rows are (alpha, beta1, beta2, gamma_1..gamma_q) per
    quantile level; ``beta1``/``beta2`` are the slopes left/right of
    ``t_hat``.
    """

    t_hat: float
    eta_hat: np.ndarray  # (K, q+3)
    objective: float
    search_interval: tuple[float, float]
    taus: tuple[float, ...]
    profile_trace: np.ndarray | None = None  # (m, 2) of (t, S_n(t))
    residuals: np.ndarray | None = None  # (K, n)
    diagnostics: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.eta_hat.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.eta_hat[:, 0]

    @property
    def beta1(self) -> np.ndarray:
        return self.eta_hat[:, 1]

    @property
    def beta2(self) -> np.ndarray:
        return self.eta_hat[:, 2]

    @property
    def gamma(self) -> np.ndarray:
        return self.eta_hat[:, 3:]

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter (eta_tau1, ..., eta_tauK, t)."""
        return np.concatenate([self.eta_hat.ravel(), [self.t_hat]])


def _unpack_theta(theta: np.ndarray, K: int, q: int) -> tuple[np.ndarray, float]:
    theta = np.asarray(theta, dtype=float).ravel()
    want = K * (q + 3) + 1
    if theta.size != want:
        raise InvalidInputError(
            f"theta has length {theta.size}, expected K(q+3)+1 = {want}"
        )
    return theta[:-1].reshape(K, q + 3), float(theta[-1])


def composite_objective(dataset: LongitudinalDataset, taus, theta) -> float:
    """Mean composite check loss S_n at an arbitrary parameter value."""
    grid = QuantileGrid.of(taus)
    eta, t = _unpack_theta(theta, grid.K, dataset.q)
    X = kink_design_matrix(dataset.x, dataset.z, t)
    R = dataset.y[None, :] - eta @ X.T
    n = dataset.n
    return float(sum(_rho_sum(R[k], tau) / n for k, tau in enumerate(grid)))


def _profile_fit(
    dataset: LongitudinalDataset,
    taus_arr: np.ndarray,
    t: float,
    warm_B: np.ndarray | None = None,
) -> QrSolution:
    X = kink_design_matrix(dataset.x, dataset.z, t)
    try:
        check_design_rank(X)
        return _fit_noncrossing_checked(X, dataset.y, taus_arr, warm_B=warm_B)
    except SingularDesignError as exc:
        raise SingularDesignError(f"profile at t={t:.6g}: {exc}") from exc
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"profile at t={t:.6g}: {exc}", best=exc.best) from exc


def profile_objective(dataset: LongitudinalDataset, taus, t: float):
    """Profiled objective at fixed t: (S_n(eta_hat(t), t), eta_hat(t))."""
    grid = QuantileGrid.of(taus)
    sol = _profile_fit(dataset, np.asarray(grid.taus), float(t))
    eta = np.atleast_2d(sol.coefficients)
    return float(sol.objective), eta


def estimate(
    dataset: LongitudinalDataset,
    taus,
    spec: SearchSpec | None = None,
) -> KinkFit:
    """Two-stage composite estimate of the common change point.

    A coarse grid of ``spec.grid_points`` profile evaluations brackets
    the global minimum; bounded Brent refinement then localizes the
    minimizer inside the bracketing cell.  Ties between equal grid
    minima resolve to the smallest t.
    """
    grid = QuantileGrid.of(taus)
    taus_arr = np.asarray(grid.taus)
    if spec is None:
        spec = SearchSpec.from_dataset(dataset)

    ts = np.linspace(spec.lower, spec.upper, spec.grid_points)
    values = np.full(ts.shape, np.nan)
    sols: list[QrSolution | None] = [None] * len(ts)
    failures: list[str] = []
    for i, t in enumerate(ts):
        try:
            sol = _profile_fit(dataset, taus_arr, float(t))
            sols[i] = sol
            values[i] = sol.objective
        except KinkQrError as exc:
            failures.append(str(exc))
    n_ok = int(np.sum(np.isfinite(values)))
    if n_ok == 0 or len(failures) > MAX_GRID_FAILURES * len(ts):
        raise EstimationFailedError(
            f"{len(failures)}/{len(ts)} profile evaluations failed; "
            f"first failure: {failures[0] if failures else 'n/a'}"
        )
    finite = np.isfinite(values)
    if float(np.nanmax(values) - np.nanmin(values)) < FLAT_TOL:
        raise DegenerateProfileError(
            "profile objective is flat over the search grid; "
            "the data show no identifiable kink"
        )

    masked = np.where(finite, values, np.inf)
    i_best = int(np.argmin(masked))  # first minimum = smallest t on ties
    t_best = float(ts[i_best])
    best_sol = sols[i_best]
    trace = [(float(t), float(v)) for t, v in zip(ts, values) if np.isfinite(v)]

    if spec.refine:
        lo = float(ts[max(i_best - 1, 0)])
        hi = float(ts[min(i_best + 1, len(ts) - 1)])
        cache: dict[float, tuple[float, QrSolution | None]] = {}

        def f(t: float) -> float:
            t = float(t)
            if t in cache:
                return cache[t][0]
            try:
                sol = _profile_fit(dataset, taus_arr, t)
                cache[t] = (float(sol.objective), sol)
            except KinkQrError:
                cache[t] = (np.inf, None)
            return cache[t][0]

        xatol = max(1e-7 * (spec.upper - spec.lower), 1e-12)
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                              options={"xatol": xatol, "maxiter": 200})
        trace.extend((t, v) for t, (v, _) in cache.items() if np.isfinite(v))
        t_ref = float(res.x)
        v_ref, sol_ref = cache.get(t_ref, (np.inf, None))
        # keep whichever of grid minimum / refined point is better
        if sol_ref is not None and (
            v_ref < values[i_best]
            or (v_ref == values[i_best] and t_ref < t_best)
        ):
            t_best, best_sol = t_ref, sol_ref

    assert best_sol is not None
    eta = np.atleast_2d(best_sol.coefficients)
    trace_arr = np.array(sorted(trace), dtype=float)
    fit = KinkFit(
        t_hat=t_best,
        eta_hat=eta,
        objective=float(best_sol.objective),
        search_interval=(spec.lower, spec.upper),
        taus=grid.taus,
        profile_trace=trace_arr,
        residuals=np.atleast_2d(best_sol.residuals),
        diagnostics={
            "grid_failures": len(failures),
            "noncrossing_active": bool(best_sol.noncrossing_active),
            "degenerate_vertex": bool(best_sol.degenerate),
            "near_boundary": bool(
                t_best <= ts[0] + 1e-12 or t_best >= ts[-1] - 1e-12
            ),
        },
    )
    return fit


def predict_quantiles(fit: KinkFit, x, z=None) -> np.ndarray:
    """Fitted conditional quantiles at new (x, z): shape (len(x), K)."""
    x = np.asarray(x, dtype=float)
    q = fit.eta_hat.shape[1] - 3
    if q == 0:
        Z = np.empty((x.shape[0], 0))
    else:
        Z = np.asarray(z, dtype=float)
        if Z.ndim == 1:
            # one covariate vector broadcast to every x
            Z = np.repeat(Z[None, :], x.shape[0], axis=0)
    X = kink_design_matrix(x, Z, fit.t_hat)
    return X @ fit.eta_hat.T
