"""Acceptance suite: seven release criteria at fixed tolerances.

Each test prints one ``[criterion N] PASS/FAIL`` line with the measured
numbers (run pytest with ``-s`` to see them inline).  Monte Carlo sizes
follow the desk-scale defaults (200 replications; the subject bootstrap
is timed over a small replicate subset at B=100).  Everything runs
offline on fixed seeds.
"""

import os
import time

import numpy as np

from kinkqr import (
    DgpSpec,
    QrProblem,
    SearchSpec,
    estimate,
    fit_single,
    generate,
    psi,
    rank_score_statistic,
    restricted_fit,
    projected_score,
    run_power,
    run_table1,
    run_table2,
    slr_test,
)
from kinkqr.covariance import estimate_concordance
from kinkqr.data import kink_design_matrix
from kinkqr.estimator import KinkFit

import oracles
from conftest import make_noiseless

THREADS = min(2, os.cpu_count() or 1)
TRUE_T = 5.0


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")


class TestCriterion1Table1:
    def test_case1_cqr_reproduction(self):
        start = time.perf_counter()
        rep = run_table1(
            reps=200, cases=(1,), N_list=(200,),
            estimators=("lad", "ls", "cqr"), seed=0, threads=THREADS,
        )
        elapsed = time.perf_counter() - start
        cqr = next(r for r in rep.rows if r["estimator"] == "cqr")
        ok = (
            abs(cqr["bias"]) <= 0.02
            and 0.08 <= cqr["sd"] <= 0.13
            and abs(cqr["sd"] - cqr["ese"]) <= 0.03
            and 0.87 <= cqr["ecp"] <= 0.96
            and elapsed <= 600.0
        )
        _report(
            1, ok,
            f"bias={cqr['bias']:+.4f} (|.|<=0.02), sd={cqr['sd']:.3f} "
            f"([0.08,0.13]), ese={cqr['ese']:.3f} (|sd-ese|<=0.03), "
            f"ecp={cqr['ecp']:.3f} ([0.87,0.96]), runtime={elapsed:.0f}s (<=600)",
        )
        assert abs(cqr["bias"]) <= 0.02
        assert 0.08 <= cqr["sd"] <= 0.13
        assert abs(cqr["sd"] - cqr["ese"]) <= 0.03
        assert 0.87 <= cqr["ecp"] <= 0.96
        assert elapsed <= 600.0


class TestCriterion2Robustness:
    def test_case4_cqr_beats_ls_mse(self):
        rep = run_table1(
            reps=200, cases=(4,), N_list=(200,),
            estimators=("ls", "cqr"), seed=1, threads=THREADS,
        )
        mse = {r["estimator"]: r["mse"] for r in rep.rows}
        ok = mse["cqr"] < mse["ls"]
        _report(2, ok, f"mse_cqr={mse['cqr']:.4f} < mse_ls={mse['ls']:.4f}")
        assert mse["cqr"] < mse["ls"]


class TestCriterion3SlrSizePower:
    def test_size_and_power(self):
        rep = run_power(
            reps=200, cases=(1,), delta_betas=(0.0, -2.0), taus=(0.1, 0.5),
            N=200, B=300, seed=2, threads=THREADS,
        )
        cell = {
            (r["tau"], r["delta_beta"]): r["rejection_rate"] for r in rep.rows
        }
        size = cell[(0.5, 0.0)]
        power5 = cell[(0.5, -2.0)]
        power1 = cell[(0.1, -2.0)]
        mc_se = np.sqrt(power1 * (1 - power1) / 200) + np.sqrt(
            power5 * (1 - power5) / 200
        )
        ok = (
            0.01 <= size <= 0.10
            and power5 >= 0.9
            and power5 >= power1 - 2 * mc_se
        )
        _report(
            3, ok,
            f"size={size:.3f} ([0.01,0.10]), power(tau=0.5)={power5:.3f} "
            f"(>=0.9), power(tau=0.1)={power1:.3f} "
            f"(power(0.5) >= power(0.1) - 2*MCSE)",
        )
        assert 0.01 <= size <= 0.10
        assert power5 >= 0.9
        assert power5 >= power1 - 2 * mc_se


class TestCriterion4CiComparison:
    def test_cases_1_2_interval_comparison(self):
        rep = run_table2(
            reps=200, cases=(1, 2), methods=("wald", "qrs", "boot"),
            N=200, B_boot=100, boot_reps=3, seed=3, threads=THREADS,
        )
        ok_all = True
        details = []
        for case in (1, 2):
            rows = {r["method"]: r for r in rep.rows if r["case"] == case}
            w, q, b = rows["wald"], rows["qrs"], rows["boot"]
            ok = (
                q["ecp"] >= w["ecp"]
                and q["eml"] > w["eml"]
                and q["mean_time_s"] < b["mean_time_s"] / 5.0
            )
            ok_all &= ok
            details.append(
                f"case {case}: ecp  qrs {q['ecp']:.3f} >= wald {w['ecp']:.3f}; "
                f"eml qrs {q['eml']:.3f} > wald {w['eml']:.3f}; "
                f"time qrs {q['mean_time_s']:.2f}s < boot/5 "
                f"{b['mean_time_s'] / 5:.2f}s"
            )
        _report(4, ok_all, " | ".join(details))
        for case in (1, 2):
            rows = {r["method"]: r for r in rep.rows if r["case"] == case}
            assert rows["qrs"]["ecp"] >= rows["wald"]["ecp"]
            assert rows["qrs"]["eml"] > rows["wald"]["eml"]
            assert rows["qrs"]["mean_time_s"] < rows["boot"]["mean_time_s"] / 5.0


class TestCriterion5RankScoreCalibration:
    def test_rejection_rate_at_truth(self):
        taus = (0.3, 0.4, 0.5, 0.6, 0.7)
        rejections = 0
        reps = 200
        for s in range(reps):
            ds = generate(DgpSpec(case=1, N=200, seed=[44, s]))
            res = rank_score_statistic(ds, taus, TRUE_T, alpha=0.05)
            rejections += res.reject
        rate = rejections / reps
        ok = 0.02 <= rate <= 0.09
        _report(5, ok, f"rank-score rejection at true t: {rate:.3f} ([0.02,0.09])")
        assert 0.02 <= rate <= 0.09


class TestCriterion6OracleEquivalence:
    def test_small_instance_enumeration(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for i in range(10):
            n = int(rng.integers(12, 31))
            p = int(rng.integers(1, 4))
            X = np.column_stack(
                [np.ones(n)] + [rng.uniform(-2, 2, n) for _ in range(p - 1)]
            )
            beta = rng.normal(size=p)
            y = X @ beta + rng.standard_t(3, size=n)
            tau = float(rng.uniform(0.15, 0.85))
            sol = fit_single(QrProblem(design=X, response=y, taus=tau))
            obj_star, _ = oracles.brute_force_qr(X, y, tau)
            worst = max(worst, abs(sol.objective - obj_star))
            assert sol.objective <= obj_star + 1e-6
        ok = worst <= 1e-6
        _report(
            6, ok,
            f"max |objective - enumeration| = {worst:.2e} (<=1e-6); "
            "profile vs dense grid checked below",
        )
        assert worst <= 1e-6

    def test_profile_minimizer_vs_dense_grid(self):
        ds = generate(DgpSpec(case=1, N=30, seed=99))
        spec_dense = SearchSpec.from_dataset(ds, grid_points=2001, refine=False)
        dense = estimate(ds, [0.5], spec_dense)
        refined = estimate(ds, [0.5], SearchSpec.from_dataset(ds))
        spacing = (spec_dense.upper - spec_dense.lower) / 2000.0
        ok = abs(refined.t_hat - dense.t_hat) <= spacing
        _report(
            6, ok,
            f"|refined - dense-grid| = {abs(refined.t_hat - dense.t_hat):.2e} "
            f"<= one spacing {spacing:.2e}",
        )
        assert abs(refined.t_hat - dense.t_hat) <= spacing


class TestCriterion7PropertySuite:
    def test_properties(self):
        checks = {}

        # subgradient optimality box
        rng = np.random.default_rng(5)
        n = 120
        X = np.column_stack([np.ones(n), rng.uniform(0, 10, n)])
        y = X @ np.array([1.0, 0.5]) + rng.standard_t(4, size=n)
        tau = 0.4
        sol = fit_single(QrProblem(design=X, response=y, taus=tau))
        ztol = 1e-6 * max(1.0, np.max(np.abs(y)))
        nz = np.abs(sol.residuals) > ztol
        lhs = np.abs(X[nz].T @ psi(sol.residuals[nz], tau))
        rhs = np.sum(np.abs(X[~nz]), axis=0)
        checks["subgradient"] = bool(np.all(lhs <= rhs + 1e-6))

        # non-crossing ordering at every observed row
        ds = generate(DgpSpec(case=3, N=100, seed=6))
        fit = estimate(ds, (0.3, 0.4, 0.5, 0.6, 0.7))
        Xk = kink_design_matrix(ds.x, ds.z, fit.t_hat)
        F = fit.eta_hat @ Xk.T
        checks["noncrossing"] = bool(np.max(F[:-1] - F[1:]) <= 1e-8)

        # projection orthogonality (identity weighting)
        rf = restricted_fit(ds, (0.3, 0.5, 0.7), 5.0)
        M = kink_design_matrix(ds.x, ds.z, 5.0)
        orth = max(
            float(np.max(np.abs(
                M.T @ projected_score(ds, rf, k, weighting="homoscedastic")
            )))
            for k in range(3)
        )
        checks["projection_orthogonality"] = orth <= 1e-8

        # Frechet clipping of delta / xi
        shim = KinkFit(
            t_hat=5.0, eta_hat=np.zeros((1, ds.q + 3)), objective=0.0,
            search_interval=(0.0, 10.0), taus=(0.6,),
            residuals=-np.ones((1, ds.n)),
        )
        corr = estimate_concordance(shim, ds, kind="exchangeable")
        checks["frechet_clipping"] = (
            corr.delta_hat(0) <= 0.6 and corr.delta_hat(0) >= max(0.0, 0.2)
        )

        # p-value determinism under a fixed seed
        ds2 = generate(DgpSpec(case=1, N=60, seed=7))
        p1 = slr_test(ds2, 0.5, B=150, seed=12).p_value
        p2 = slr_test(ds2, 0.5, B=150, seed=12).p_value
        checks["p_value_determinism"] = p1 == p2

        # exact recovery on noiseless piecewise-linear data
        fitn = estimate(make_noiseless(), [0.5])
        checks["noiseless_recovery"] = abs(fitn.t_hat - TRUE_T) <= 1e-6

        ok = all(checks.values())
        _report(
            7, ok,
            ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()),
        )
        assert all(checks.values()), checks
