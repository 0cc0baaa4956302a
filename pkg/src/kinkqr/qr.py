"""Linear quantile regression by check-loss minimization.

The single-level solver is a Frisch-Newton primal-dual interior point
method on the LP formulation

    min  tau*1'u + (1-tau)*1'v   s.t.  X b + u - v = y,  u, v >= 0,

with Mehrotra predictor-corrector steps.  The multi-level solver adds
row-wise non-crossing constraints  x_i' b_{k+1} >= x_i' b_k  at every
observed design row, solved jointly across the K levels; when the
unconstrained per-level fits already satisfy the ordering they are
returned unchanged.  A sparse HiGHS LP solve backs the joint problem up
if the interior point iteration fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import QuantileGrid
from .errors import (
    InfeasibleError,
    InvalidInputError,
    NonConvergenceError,
    SingularDesignError,
)

__all__ = [
    "check_loss",
    "psi",
    "QrProblem",
    "QrSolution",
    "fit_single",
    "fit_noncrossing",
]

# Solver tolerances: duality gap (mean-loss scale), feasibility, iteration cap.
GAP_TOL = 1e-8
FEAS_TOL = 1e-9
MAX_ITER = 200
RANK_TOL = 1e-10
# Fitted values at adjacent levels may cross by at most this much.
NONCROSSING_TOL = 1e-8
# Fraction of the distance to the boundary taken per interior-point step.
_STEP = 0.9995


# ---------------------------------------------------------------------------
# Loss kernels

def check_loss(v, tau):
    """Check loss rho_tau(v) = v * (tau - 1[v < 0]); vectorized."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must be in (0,1), got {tau}")
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise InvalidInputError("non-finite input to check_loss")
    out = v * (tau - (v < 0.0))
    return float(out) if out.ndim == 0 else out


def psi(v, tau):
    """Quantile score psi_tau(v) = tau - 1[v <= 0] (v = 0 counts as <= 0)."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must be in (0,1), got {tau}")
    v = np.asarray(v, dtype=float)
    out = tau - (v <= 0.0)
    return float(out) if out.ndim == 0 else out


def _rho_sum(r: np.ndarray, tau: float) -> float:
    # unchecked check-loss sum for solver internals
    return float(np.sum(r * (tau - (r < 0.0))))


# ---------------------------------------------------------------------------
# Problem / solution containers

@dataclass(frozen=True)
class QrProblem:
    """A linear quantile regression instance."""

    design: np.ndarray
    response: np.ndarray
    taus: QuantileGrid
    noncrossing: bool = False

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        y = np.asarray(self.response, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise InvalidInputError("design must be n x p and response length n")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise InvalidInputError("non-finite design or response")
        if X.shape[0] <= X.shape[1]:
            raise InvalidInputError(
                f"need n > p, got n={X.shape[0]}, p={X.shape[1]}"
            )
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "taus", QuantileGrid.of(self.taus))


@dataclass
class QrSolution:
    """Solver output.

    ``coefficients`` has shape (p,) for a single level and (K, p) for a
    multi-level fit; ``residuals`` matches.  ``objective`` is the mean
    check loss, summed across levels for multi-level fits.
    """

    coefficients: np.ndarray
    objective: float
    residuals: np.ndarray
    taus: tuple[float, ...]
    converged: bool = True
    iterations: int = 0
    gap: float = 0.0
    per_tau_objectives: np.ndarray | None = None
    degenerate: bool = False
    noncrossing_active: bool = False

    def fitted(self, X: np.ndarray) -> np.ndarray:
        return X @ np.atleast_2d(self.coefficients).T


def check_design_rank(X: np.ndarray, tol: float = RANK_TOL) -> None:
    """Raise :class:`SingularDesignError` if X is column-rank deficient."""
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= tol * max(1.0, sv[0]):
        raise SingularDesignError(
            f"design is rank deficient (smallest singular value {sv[-1]:.3e})"
        )


# ---------------------------------------------------------------------------
# Shared interior-point helpers

def _max_step(z: np.ndarray, dz: np.ndarray) -> float:
    # largest a with z + a*dz >= 0, given z > 0
    neg = dz < 0
    if not neg.any():
        return np.inf
    return float(np.min(-z[neg] / dz[neg]))


class _Factor:
    """Cholesky factor with jitter retry and lstsq last resort."""

    def __init__(self, A: np.ndarray):
        self.A = A
        self.c = None
        try:
            self.c = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * (np.trace(A) / A.shape[0] + 1.0)
            try:
                self.c = np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
            except np.linalg.LinAlgError:
                self.c = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.c is None:
            return np.linalg.lstsq(self.A, rhs, rcond=None)[0]
        return np.linalg.solve(self.c.T, np.linalg.solve(self.c, rhs))


# ---------------------------------------------------------------------------
# Single-level Frisch-Newton solver

def _solve_single(
    X: np.ndarray,
    y: np.ndarray,
    tau: float,
    *,
    gap_tol: float = GAP_TOL,
    feas_tol: float = FEAS_TOL,
    max_iter: int = MAX_ITER,
) -> QrSolution:
    n, p = X.shape
    yscale = max(1.0, float(np.max(np.abs(y))))
    xscale = max(1.0, float(np.max(np.abs(X))))

    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ beta
    pad = 0.1 * float(np.mean(np.abs(r))) + 1e-4 * yscale
    u = np.maximum(r, 0.0) + pad
    v = np.maximum(-r, 0.0) + pad
    g = np.full(n, tau)  # dual slack; d = tau - g starts at 0 (dual feasible)

    converged = False
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Xb = X @ beta
        r1 = y - Xb - u + v
        r2 = X.T @ (tau - g)
        comp = float(u @ g + v @ (1.0 - g))
        obj = _rho_sum(y - Xb, tau) / n
        gap = comp / n
        pfeas = float(np.max(np.abs(r1))) / yscale
        dfeas = float(np.max(np.abs(r2))) / (1.0 + n * xscale)
        if gap <= gap_tol * (1.0 + abs(obj)) and pfeas <= feas_tol and dfeas <= feas_tol:
            converged = True
            break

        W = 1.0 / np.maximum(u / g + v / (1.0 - g), 1e-14)
        fac = _Factor(X.T @ (W[:, None] * X))

        # predictor (affine scaling, mu = 0)
        q_aff = y - Xb
        db_a = fac.solve(r2 + X.T @ (W * q_aff))
        dg_a = W * (X @ db_a - q_aff)
        du_a = -u - (u / g) * dg_a
        dv_a = -v + (v / (1.0 - g)) * dg_a
        ap = min(1.0, _STEP * min(_max_step(u, du_a), _max_step(v, dv_a)))
        ad = min(1.0, _STEP * min(_max_step(g, dg_a), _max_step(1.0 - g, -dg_a)))
        comp_aff = float(
            (u + ap * du_a) @ (g + ad * dg_a)
            + (v + ap * dv_a) @ (1.0 - g - ad * dg_a)
        )
        sigma = min(1.0, max(0.0, comp_aff / comp)) ** 3
        mu = sigma * comp / (2.0 * n)

        # corrector
        rc_u = mu - u * g - du_a * dg_a
        rc_v = mu - v * (1.0 - g) + dv_a * dg_a
        q_c = r1 - rc_u / g + rc_v / (1.0 - g)
        db = fac.solve(r2 + X.T @ (W * q_c))
        dg = W * (X @ db - q_c)
        du = (rc_u - u * dg) / g
        dv = (rc_v + v * dg) / (1.0 - g)

        ap = min(1.0, _STEP * min(_max_step(u, du), _max_step(v, dv)))
        ad = min(1.0, _STEP * min(_max_step(g, dg), _max_step(1.0 - g, -dg)))
        beta += ap * db
        u += ap * du
        v += ap * dv
        g += ad * dg

    r = y - X @ beta
    ztol = max(1e-7 * yscale, 10.0 * gap)
    nzero = int(np.sum(np.abs(r) <= ztol))
    sol = QrSolution(
        coefficients=beta,
        objective=_rho_sum(r, tau) / n,
        residuals=r,
        taus=(float(tau),),
        converged=converged,
        iterations=it,
        gap=gap,
        degenerate=nzero > p,
    )
    if not converged:
        raise NonConvergenceError(
            f"interior point did not converge in {max_iter} iterations "
            f"(gap={gap:.3e})",
            best=sol,
        )
    return sol


def fit_single(problem: QrProblem) -> QrSolution:
    """Fit a single-level quantile regression.

    Raises :class:`SingularDesignError` for rank-deficient designs and
    :class:`NonConvergenceError` (carrying the best iterate) if the
    iteration cap is exceeded.
    """
    if problem.taus.K != 1:
        raise InvalidInputError("fit_single expects exactly one quantile level")
    check_design_rank(problem.design)
    return _solve_single(problem.design, problem.response, problem.taus.taus[0])


def _pair_steps(K, Z1, dZ1, Z2, dZ2):
    # per-level joint boundary step for two positive blocks at once
    Z = np.concatenate([Z1, Z2])
    dZ = np.concatenate([dZ1, dZ2])
    r = np.where(dZ < 0.0, Z / -dZ, np.inf).min(axis=1)
    return np.minimum(1.0, _STEP * np.minimum(r[:K], r[K:]))


def _solve_levels(
    X: np.ndarray,
    y: np.ndarray,
    taus,
    *,
    warm_B: np.ndarray | None = None,
    gap_tol: float = GAP_TOL,
    feas_tol: float = FEAS_TOL,
    max_iter: int = MAX_ITER,
) -> list[QrSolution]:
    """Independent single-level fits for several taus on one design,
    run as one vectorized interior-point sweep (levels are frozen as
    they converge).  Equivalent to ``[_solve_single(X, y, t) for t in
    taus]`` up to solver tolerance, but faster for K >= 2.

    ``warm_B`` (K, p) seeds the coefficients, e.g. from a neighbouring
    profile grid point.
    """
    taus = np.asarray(taus, dtype=float)
    K = len(taus)
    if K == 1 and warm_B is None:
        return [_solve_single(X, y, float(taus[0]),
                              gap_tol=gap_tol, feas_tol=feas_tol, max_iter=max_iter)]
    n, p = X.shape
    yscale = max(1.0, float(np.max(np.abs(y))))
    xscale = max(1.0, float(np.max(np.abs(X))))
    tau_col = taus[:, None]

    if warm_B is not None:
        B = np.array(warm_B, dtype=float, copy=True)
        R0 = y[None, :] - B @ X.T
        pad = 0.02 * float(np.mean(np.abs(R0))) + 1e-5 * yscale
        U = np.maximum(R0, 0.0) + pad
        V = np.maximum(-R0, 0.0) + pad
    else:
        beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
        r = y - X @ beta0
        pad = 0.1 * float(np.mean(np.abs(r))) + 1e-4 * yscale
        B = np.repeat(beta0[None, :], K, axis=0)
        U = np.repeat(np.maximum(r, 0.0)[None, :] + pad, K, axis=0)
        V = np.repeat(np.maximum(-r, 0.0)[None, :] + pad, K, axis=0)
    G = np.repeat(tau_col, n, axis=1)

    active = np.ones(K, dtype=bool)
    iters = np.zeros(K, dtype=int)
    gaps = np.full(K, np.inf)
    dscale = 1.0 + n * xscale

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(max_iter):
            F = B @ X.T
            Rcur = y[None, :] - F
            R1 = Rcur - U + V
            Gm1 = 1.0 - G
            r2 = (tau_col - G) @ X  # (K, p)
            UG = U * G
            VGm1 = V * Gm1
            comp = np.sum(UG, axis=1) + np.sum(VGm1, axis=1)
            objs = np.sum(Rcur * (tau_col - (Rcur < 0.0)), axis=1) / n
            gaps = comp / n
            pfeas = np.max(np.abs(R1), axis=1) / yscale
            dfeas = np.max(np.abs(r2), axis=1) / dscale
            done = (
                (gaps <= gap_tol * (1.0 + np.abs(objs)))
                & (pfeas <= feas_tol)
                & (dfeas <= feas_tol)
            )
            active &= ~done
            if not active.any():
                break
            iters += active

            UoG = U / G
            VoGm1 = V / Gm1
            W = 1.0 / np.maximum(UoG + VoGm1, 1e-14)
            W[~active] = 1.0  # keep frozen levels' systems well-posed
            A = (X.T[None, :, :] * W[:, None, :]) @ X  # (K, p, p)
            try:
                C = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                A = A + 1e-10 * np.eye(p)[None]
                C = np.linalg.cholesky(A)
            Ct = np.swapaxes(C, 1, 2)

            def solve(rhs):  # batched SPD solve via the shared factor
                w = np.linalg.solve(C, rhs[:, :, None])
                return np.linalg.solve(Ct, w)[:, :, 0]

            # predictor
            dB_a = solve(r2 + (W * Rcur) @ X)
            dG_a = W * (dB_a @ X.T - Rcur)
            dU_a = -U - UoG * dG_a
            dV_a = -V + VoGm1 * dG_a
            ap = _pair_steps(K, U, dU_a, V, dV_a)
            ad = _pair_steps(K, G, dG_a, Gm1, -dG_a)
            apc, adc = ap[:, None], ad[:, None]
            comp_aff = np.sum(
                (U + apc * dU_a) * (G + adc * dG_a)
                + (V + apc * dV_a) * (Gm1 - adc * dG_a),
                axis=1,
            )
            sigma = np.clip(comp_aff / np.maximum(comp, 1e-300), 0.0, 1.0) ** 3
            mu = (sigma * comp / (2.0 * n))[:, None]

            # corrector
            rc_u = mu - UG - dU_a * dG_a
            rc_v = mu - VGm1 + dV_a * dG_a
            q_c = R1 - rc_u / G + rc_v / Gm1
            dB = solve(r2 + (W * q_c) @ X)
            dG = W * (dB @ X.T - q_c)
            dU = (rc_u - U * dG) / G
            dV = (rc_v + V * dG) / Gm1

            ap = np.where(active, _pair_steps(K, U, dU, V, dV), 0.0)[:, None]
            ad = np.where(active, _pair_steps(K, G, dG, Gm1, -dG), 0.0)[:, None]
            B += ap * dB
            U += ap * dU
            V += ap * dV
            G += ad * dG

    if active.any():
        if warm_B is not None:
            # retry cold before giving up
            return _solve_levels(X, y, taus, warm_B=None, gap_tol=gap_tol,
                                 feas_tol=feas_tol, max_iter=max_iter)
        raise NonConvergenceError(
            f"interior point did not converge for levels {taus[active].tolist()}",
            best=None,
        )

    R = y[None, :] - B @ X.T
    ztol = np.maximum(1e-7 * yscale, 10.0 * gaps)
    out = []
    for k, t in enumerate(taus):
        nzero = int(np.sum(np.abs(R[k]) <= ztol[k]))
        out.append(
            QrSolution(
                coefficients=B[k],
                objective=_rho_sum(R[k], float(t)) / n,
                residuals=R[k],
                taus=(float(t),),
                converged=True,
                iterations=int(iters[k]),
                gap=float(gaps[k]),
                degenerate=nzero > p,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Joint non-crossing solver

def _solve_noncross_fn(
    X: np.ndarray,
    y: np.ndarray,
    taus: np.ndarray,
    B0: np.ndarray,
    *,
    gap_tol: float = GAP_TOL,
    feas_tol: float = FEAS_TOL,
    max_iter: int = MAX_ITER,
) -> np.ndarray:
    """Interior point on the joint LP with non-crossing rows.

    Variables per level k: coefficients b_k, residual split u_k, v_k,
    dual slack g_k in (0,1); per adjacent pair j: constraint slack s_j
    with dual w_j > 0.  Returns the (K, p) coefficient matrix; raises
    NonConvergenceError on failure so the caller can fall back to a
    sparse LP solve.
    """
    n, p = X.shape
    K = len(taus)
    tau_col = taus[:, None]
    yscale = max(1.0, float(np.max(np.abs(y))))
    xscale = max(1.0, float(np.max(np.abs(X))))
    m_comp = 2 * n * K + n * (K - 1)

    B = B0.copy()
    F = B @ X.T  # (K, n) fitted values
    R = y[None, :] - F
    pad = 0.1 * float(np.mean(np.abs(R))) + 1e-4 * yscale
    U = np.maximum(R, 0.0) + pad
    V = np.maximum(-R, 0.0) + pad
    G = np.repeat(tau_col, n, axis=1)
    DB = F[1:] - F[:-1]  # (K-1, n) fitted spacings
    s_pad = 0.1 * float(np.mean(np.abs(DB))) + 1e-3 * yscale
    S = np.maximum(DB, 0.0) + s_pad
    mu0 = float(np.sum(U * G + V * (1.0 - G))) / (2.0 * n * K)
    Wq = np.full((K - 1, n), 0.0) + max(mu0, 1e-8) / S

    for _ in range(max_iter):
        F = B @ X.T
        Rcur = y[None, :] - F
        R1 = Rcur - U + V
        RC = (F[1:] - F[:-1]) - S
        # stationarity residual per level: X'd_k + X'(w_{k-1} - w_k)
        Wpad = np.zeros((K + 1, n))
        Wpad[1:K] = Wq
        rho = (tau_col - G + Wpad[:K] - Wpad[1:]) @ X  # (K, p)
        comp = float(np.sum(U * G + V * (1.0 - G)) + np.sum(S * Wq))
        obj = float(np.sum(Rcur * (tau_col - (Rcur < 0.0)))) / n
        gap = comp / (n * K)
        pfeas = max(float(np.max(np.abs(R1))), float(np.max(np.abs(RC)))) / yscale
        dfeas = float(np.max(np.abs(rho))) / (1.0 + n * xscale)
        if gap <= gap_tol * (1.0 + abs(obj)) and pfeas <= feas_tol and dfeas <= feas_tol:
            return B

        W = 1.0 / np.maximum(U / G + V / (1.0 - G), 1e-14)  # (K, n)
        ws = Wq / S  # (K-1, n)

        # KKT blocks shared by predictor and corrector
        E = np.array([X.T @ (ws[j][:, None] * X) for j in range(K - 1)]).reshape(
            K - 1, p, p
        ) if K > 1 else np.zeros((0, p, p))
        KKT = np.zeros((K * p, K * p))
        for k in range(K):
            blk = X.T @ (W[k][:, None] * X)
            if k > 0:
                blk = blk + E[k - 1]
                KKT[k * p:(k + 1) * p, (k - 1) * p:k * p] = -E[k - 1]
            if k < K - 1:
                blk = blk + E[k]
                KKT[k * p:(k + 1) * p, (k + 1) * p:(k + 2) * p] = -E[k]
            KKT[k * p:(k + 1) * p, k * p:(k + 1) * p] = blk
        fac = _Factor(KKT)

        def newton(rc_u, rc_v, rc_s):
            q = R1 - rc_u / G + rc_v / (1.0 - G)  # (K, n)
            P1 = (rc_s / S) @ X  # (K-1, p)
            P2 = (ws * RC) @ X
            rhs = np.empty((K, p))
            WqX = (W * q) @ X  # (K, p) rows X'(W_k q_k)
            for k in range(K):
                Mk = -rho[k] - WqX[k]
                if k > 0:
                    Mk = Mk - P1[k - 1] + P2[k - 1]
                if k < K - 1:
                    Mk = Mk + P1[k] - P2[k]
                rhs[k] = -Mk
            dB = fac.solve(rhs.ravel()).reshape(K, p)
            dF = dB @ X.T
            dG = W * (dF - q)
            dS = dF[1:] - dF[:-1] + RC
            dWq = (rc_s - Wq * dS) / S
            dU = (rc_u - U * dG) / G
            dV = (rc_v + V * dG) / (1.0 - G)
            return dB, dU, dV, dG, dS, dWq

        def steps(dU, dV, dG, dS, dWq):
            ap = min(
                1.0,
                _STEP * min(
                    _max_step(U.ravel(), dU.ravel()),
                    _max_step(V.ravel(), dV.ravel()),
                    _max_step(S.ravel(), dS.ravel()),
                ),
            )
            ad = min(
                1.0,
                _STEP * min(
                    _max_step(G.ravel(), dG.ravel()),
                    _max_step(1.0 - G.ravel(), -dG.ravel()),
                    _max_step(Wq.ravel(), dWq.ravel()),
                ),
            )
            return ap, ad

        # predictor
        dB, dU, dV, dG, dS, dWq = newton(-U * G, -V * (1.0 - G), -S * Wq)
        ap, ad = steps(dU, dV, dG, dS, dWq)
        comp_aff = float(
            np.sum((U + ap * dU) * (G + ad * dG))
            + np.sum((V + ap * dV) * (1.0 - G - ad * dG))
            + np.sum((S + ap * dS) * (Wq + ad * dWq))
        )
        sigma = min(1.0, max(0.0, comp_aff / comp)) ** 3
        mu = sigma * comp / m_comp

        # corrector
        dB, dU, dV, dG, dS, dWq = newton(
            mu - U * G - dU * dG,
            mu - V * (1.0 - G) + dV * dG,
            mu - S * Wq - dS * dWq,
        )
        ap, ad = steps(dU, dV, dG, dS, dWq)
        B = B + ap * dB
        U = U + ap * dU
        V = V + ap * dV
        S = S + ap * dS
        G = G + ad * dG
        Wq = Wq + ad * dWq

    raise NonConvergenceError("joint non-crossing interior point stalled")


def _solve_noncross_linprog(X: np.ndarray, y: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Sparse HiGHS solve of the joint non-crossing LP (robust fallback)."""
    import scipy.sparse as sp
    from scipy.optimize import linprog

    n, p = X.shape
    K = len(taus)
    nb = K * p
    c = np.concatenate(
        [np.zeros(nb), np.repeat(taus, n), np.repeat(1.0 - taus, n)]
    )
    Xs = sp.csr_matrix(X)
    A_eq = sp.hstack(
        [sp.block_diag([Xs] * K), sp.eye(K * n), -sp.eye(K * n)], format="csc"
    )
    b_eq = np.tile(y, K)
    zero = sp.csr_matrix((n, p))
    rows = []
    for j in range(K - 1):
        blocks = [zero] * K
        blocks[j] = Xs
        blocks[j + 1] = -Xs
        rows.append(sp.hstack(blocks))
    A_ub = sp.hstack(
        [sp.vstack(rows), sp.csr_matrix(((K - 1) * n, 2 * K * n))], format="csc"
    )
    b_ub = np.zeros((K - 1) * n)
    bounds = [(None, None)] * nb + [(0, None)] * (2 * K * n)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleError("non-crossing LP reported infeasible")
    if not res.success:
        raise NonConvergenceError(f"non-crossing LP failed: {res.message}")
    return res.x[:nb].reshape(K, p)


def _combine_solution(X, y, B, taus, *, active: bool, iterations: int = 0) -> QrSolution:
    R = y[None, :] - B @ X.T
    n = len(y)
    per = np.array([_rho_sum(R[k], float(t)) / n for k, t in enumerate(taus)])
    return QrSolution(
        coefficients=B,
        objective=float(per.sum()),
        residuals=R,
        taus=tuple(float(t) for t in taus),
        converged=True,
        iterations=iterations,
        per_tau_objectives=per,
        noncrossing_active=active,
    )


def fit_noncrossing(problem: QrProblem) -> QrSolution:
    """Fit K quantile levels jointly with non-crossing at observed rows.

    When the unconstrained per-level solutions already satisfy the
    ordering they are returned as-is (the constraints are inactive and
    the joint optimum coincides with the separate fits).
    """
    X, y = problem.design, problem.response
    taus = np.asarray(problem.taus.taus)
    check_design_rank(X)
    return _fit_noncrossing_checked(X, y, taus)


def _fit_noncrossing_checked(
    X: np.ndarray, y: np.ndarray, taus: np.ndarray, warm_B: np.ndarray | None = None
) -> QrSolution:
    """Non-crossing fit assuming the design was already rank-checked."""
    if len(taus) == 1:
        if warm_B is not None:
            return _solve_levels(X, y, taus, warm_B=np.atleast_2d(warm_B))[0]
        return _solve_single(X, y, float(taus[0]))
    singles = _solve_levels(X, y, taus, warm_B=warm_B)
    B0 = np.vstack([s.coefficients for s in singles])
    F = B0 @ X.T
    worst = float(np.max(F[:-1] - F[1:]))
    if worst <= NONCROSSING_TOL:
        sol = _combine_solution(
            X, y, B0, taus, active=False,
            iterations=max(s.iterations for s in singles),
        )
        sol.degenerate = any(s.degenerate for s in singles)
        return sol
    try:
        B = _solve_noncross_fn(X, y, taus, B0)
    except (NonConvergenceError, np.linalg.LinAlgError):
        B = _solve_noncross_linprog(X, y, taus)
    return _combine_solution(X, y, B, taus, active=True)
