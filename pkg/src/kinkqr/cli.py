"""Command-line interface.

Subcommands: ``fit`` (composite estimate with SEs and fitted-curve
export), ``test-kink`` (per-level bootstrap kink test), ``ci`` (three
interval constructions), ``common-test`` (cross-quantile commonality),
``simulate`` (estimator or CI Monte Carlo), and ``power`` (kink-test
rejection rates).  All outputs embed the artifact version, the full
configuration, and the seed; ``--format csv`` and ``--format json``
encode identical numbers.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from ._parallel import available_threads
from .covariance import assemble_sandwich
from .data import read_csv
from .errors import KinkQrError
from .estimator import SearchSpec, estimate, predict_quantiles
from .rankscore import (
    commonality_wald_test,
    invert_ci,
    subject_bootstrap_ci,
    wald_ci,
)
from .reporting import fmt12, payload, write_document, write_rows_csv
from .simulate import run_power, run_table1, run_table2
from .slr import slr_test

CURVE_POINTS = 200


def _parse_taus(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser, *, with_input: bool = True) -> None:
    if with_input:
        p.add_argument("--input", required=True, help="CSV: subject,y,x,z1..zq")
    p.add_argument("--taus", default="0.3,0.4,0.5,0.6,0.7",
                   help="comma-separated quantile levels")
    p.add_argument("--t-min", type=float, default=None)
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("--grid", type=int, default=50, help="profile grid points")
    p.add_argument("--corr", default="exchangeable",
                   choices=["exchangeable", "ar1", "independence"])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: KINKQR_THREADS or cores)")
    p.add_argument("--format", default="json", choices=["json", "csv"])
    p.add_argument("--output", default=None, help="output path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="kinkqr",
        description="Composite quantile-regression kink estimation and inference",
    )
    ap.add_argument("--version", action="version", version=f"kinkqr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="composite kink fit with sandwich SEs")
    _add_common(p)
    p.add_argument("--curve", default=None,
                   help="fitted-quantile-curve CSV path "
                        "(default <output>_curves.csv when --output is set)")
    p.add_argument("--trace", default=None, help="profile trace CSV path")
    p.add_argument("--covariance", default=None,
                   help="full covariance matrices as JSON (row-major with "
                        "dimension header)")

    p = sub.add_parser("test-kink", help="bootstrap kink-existence test per level")
    _add_common(p)
    p.add_argument("--B", type=int, default=300)
    p.add_argument("--boot-stats", default=None,
                   help="CSV path for bootstrap statistics (QQ plots)")

    p = sub.add_parser("ci", help="confidence intervals for the change point")
    _add_common(p)
    p.add_argument("--method", default="all",
                   choices=["wald", "boot", "qrs", "all"])
    p.add_argument("--delta", default="auto",
                   help="step for test inversion ('auto' = x-range/400)")
    p.add_argument("--B", type=int, default=400, help="bootstrap replicates")

    p = sub.add_parser("common-test", help="test equality of per-level kink points")
    _add_common(p)
    p.add_argument("--cross", default="hblocks", choices=["hblocks", "independence"])

    p = sub.add_parser("simulate", help="Monte Carlo estimator or CI study")
    _add_common(p, with_input=False)
    p.add_argument("--table", type=int, default=1, choices=[1, 2],
                   help="1: estimator comparison, 2: CI comparison")
    p.add_argument("--case", default="1", help="comma-separated cases (1-4)")
    p.add_argument("--N", default="200", help="comma-separated subject counts")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--estimators", default="lad,ls,cqr")
    p.add_argument("--methods", default="wald,boot,qrs")
    p.add_argument("--B", type=int, default=400,
                   help="subject-bootstrap replicates (table 2)")
    p.add_argument("--boot-reps", type=int, default=None,
                   help="cap on replicates that run the subject bootstrap")

    p = sub.add_parser("power", help="size and power of the kink test")
    _add_common(p, with_input=False)
    p.add_argument("--case", default="1")
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--B", type=int, default=300)
    p.add_argument("--delta-betas", default="0,-0.5,-1,-1.5,-2")
    return ap


def _threads(args) -> int:
    return args.threads if args.threads is not None else available_threads()


def _spec(dataset, args) -> SearchSpec:
    return SearchSpec.from_dataset(
        dataset, t_min=args.t_min, t_max=args.t_max, grid_points=args.grid
    )


def _config(args, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("command", "func")}
    cfg.update(extra)
    return cfg


def _cmd_fit(args) -> int:
    ds = read_csv(args.input)
    taus = _parse_taus(args.taus)
    spec = _spec(ds, args)
    fit = estimate(ds, taus, spec)
    cov = assemble_sandwich(fit, ds, kind=args.corr)
    q = ds.q
    rows = []
    se = cov.se
    p3 = q + 3
    for k, tau in enumerate(fit.taus):
        row = {
            "tau": tau,
            "alpha": fit.alpha[k],
            "beta1": fit.beta1[k],
            "beta2": fit.beta2[k],
        }
        for j in range(q):
            row[f"gamma{j + 1}"] = fit.gamma[k, j]
        row.update(
            {
                "se_alpha": se[k * p3 + 0],
                "se_beta1": se[k * p3 + 1],
                "se_beta2": se[k * p3 + 2],
            }
        )
        for j in range(q):
            row[f"se_gamma{j + 1}"] = se[k * p3 + 3 + j]
        row.update({"t_hat": fit.t_hat, "se_t": cov.se_t,
                    "objective": fit.objective})
        rows.append(row)
    doc = payload(
        "fit",
        _config(args, n=ds.n, N=ds.N, q=ds.q,
                search_interval=list(fit.search_interval)),
        rows,
    )
    write_document(doc, args.format, args.output)

    curve_path = args.curve
    if curve_path is None and args.output:
        stem = args.output.rsplit(".", 1)[0]
        curve_path = f"{stem}_curves.csv"
    if curve_path:
        xg = np.linspace(float(ds.x.min()), float(ds.x.max()), CURVE_POINTS)
        zbar = ds.z.mean(axis=0) if ds.q else None
        qs = predict_quantiles(fit, xg, zbar)
        crows = []
        for i, xv in enumerate(xg):
            r = {"x": fmt12(float(xv))}
            for k, tau in enumerate(fit.taus):
                r[f"q_{tau:g}"] = fmt12(float(qs[i, k]))
            crows.append(r)
        write_rows_csv(curve_path, crows,
                       preamble=[f"kinkqr {__version__} fitted quantile curves",
                                 f"t_hat: {fmt12(fit.t_hat)}",
                                 "z fixed at column means"])
    if args.trace and fit.profile_trace is not None:
        trows = [{"t": fmt12(float(t)), "objective": fmt12(float(v))}
                 for t, v in fit.profile_trace]
        write_rows_csv(args.trace, trows,
                       preamble=[f"kinkqr {__version__} profile trace"])
    if args.covariance:
        from .reporting import canon, render_json

        with open(args.covariance, "w", encoding="utf-8") as fh:
            fh.write(render_json(canon(cov.to_payload())))
    return 0


def _cmd_test_kink(args) -> int:
    ds = read_csv(args.input)
    taus = _parse_taus(args.taus)
    spec = _spec(ds, args)
    rows, boot_rows = [], []
    for tau in taus:
        res = slr_test(ds, tau, spec, B=args.B, seed=args.seed)
        rows.append(
            {
                "tau": tau,
                "statistic": res.statistic,
                "p_value": res.p_value,
                "B": res.B,
                "t_hat": res.t_hat,
                "dropped_grid_points": res.n_dropped,
            }
        )
        if args.boot_stats:
            boot_rows.extend(
                {"tau": tau, "replicate": b, "statistic": fmt12(float(s))}
                for b, s in enumerate(res.bootstrap_stats)
            )
    doc = payload("test-kink", _config(args, n=ds.n, N=ds.N), rows)
    write_document(doc, args.format, args.output)
    if args.boot_stats:
        write_rows_csv(args.boot_stats, boot_rows,
                       preamble=[f"kinkqr {__version__} bootstrap statistics"])
    return 0


def _cmd_ci(args) -> int:
    ds = read_csv(args.input)
    taus = _parse_taus(args.taus)
    spec = _spec(ds, args)
    fit = estimate(ds, taus, spec)
    delta = None if args.delta == "auto" else float(args.delta)
    methods = ["wald", "boot", "qrs"] if args.method == "all" else [args.method]
    rows = []
    for method in methods:
        if method == "wald":
            cov = assemble_sandwich(fit, ds, kind=args.corr)
            ci = wald_ci(fit, cov, alpha=args.alpha)
            extra = {"se_t": cov.se_t}
        elif method == "qrs":
            ci = invert_ci(ds, taus, fit.t_hat, delta=delta,
                           alpha=args.alpha, kind=args.corr)
            extra = {
                "delta": ci.meta["delta"],
                "open_lower": int(ci.meta["open_lower"]),
                "open_upper": int(ci.meta["open_upper"]),
            }
        else:
            ci = subject_bootstrap_ci(ds, taus, spec, B=args.B,
                                      alpha=args.alpha, seed=args.seed,
                                      progress=True)
            extra = {"B": ci.meta["B"], "failures": ci.meta["failures"]}
        row = {
            "method": method,
            "t_hat": fit.t_hat,
            "lower": ci.lower,
            "upper": ci.upper,
            "length": ci.length,
            "alpha": args.alpha,
        }
        row.update(extra)
        rows.append(row)
    doc = payload("ci", _config(args, n=ds.n, N=ds.N), rows)
    write_document(doc, args.format, args.output)
    return 0


def _cmd_common_test(args) -> int:
    ds = read_csv(args.input)
    taus = _parse_taus(args.taus)
    spec = _spec(ds, args)
    res = commonality_wald_test(ds, taus, spec, kind=args.corr, cross=args.cross)
    row = {
        "statistic": res.statistic,
        "df": res.df,
        "p_value": res.p_value,
        "cross": args.cross,
    }
    for tau, th in zip(taus, res.meta["t_hats"]):
        row[f"t_hat_{tau:g}"] = th
    doc = payload("common-test", _config(args, n=ds.n, N=ds.N), [row])
    write_document(doc, args.format, args.output)
    return 0


def _cmd_simulate(args) -> int:
    taus = _parse_taus(args.taus)
    cases = _parse_ints(args.case)
    threads = _threads(args)
    if args.table == 1:
        report = run_table1(
            reps=args.reps,
            cases=cases,
            N_list=_parse_ints(args.N),
            estimators=[e.strip() for e in args.estimators.split(",")],
            taus=taus,
            kind=args.corr,
            alpha=args.alpha,
            seed=args.seed,
            threads=threads,
            grid_points=args.grid,
        )
    else:
        report = run_table2(
            reps=args.reps,
            cases=cases,
            methods=[m.strip() for m in args.methods.split(",")],
            taus=taus,
            N=_parse_ints(args.N)[0],
            B_boot=args.B,
            boot_reps=args.boot_reps,
            kind=args.corr,
            alpha=args.alpha,
            seed=args.seed,
            threads=threads,
            grid_points=args.grid,
        )
    doc = payload("simulate", _config(args, **report.config), report.rows)
    write_document(doc, args.format, args.output)
    return 0


def _cmd_power(args) -> int:
    report = run_power(
        reps=args.reps,
        cases=_parse_ints(args.case),
        delta_betas=_parse_floats(args.delta_betas),
        taus=_parse_taus(args.taus),
        N=args.N,
        B=args.B,
        alpha=args.alpha,
        seed=args.seed,
        threads=_threads(args),
        grid_points=args.grid,
    )
    doc = payload("power", _config(args, **report.config), report.rows)
    write_document(doc, args.format, args.output)
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "test-kink": _cmd_test_kink,
    "ci": _cmd_ci,
    "common-test": _cmd_common_test,
    "simulate": _cmd_simulate,
    "power": _cmd_power,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except KinkQrError as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stdout.write(json.dumps(err) + "\n")
        return 1
    except OSError as exc:
        err = {"error": {"type": "OSError", "message": str(exc)}}
        sys.stdout.write(json.dumps(err) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
