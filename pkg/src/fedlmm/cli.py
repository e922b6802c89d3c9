"""Command-line interface: summarize, privatize, fit, attack, simulate.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.  Every
command accepts --seed and is byte-reproducible under it; commands with
no randomness simply ignore the seed.  Relative output paths resolve
against $FEDLMM_OUT_DIR when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig
from .errors import CapacityError, FedLMMError, SingularDesignError, ValidationError
from .estimator import fit_ml, fit_reml
from .privacy import CalibrationRule, calibrate, privatize
from .simulation import (
    Scenario,
    run_estimation_study,
    run_reconstruction_cell,
    run_reconstruction_study,
    write_metric_rows,
    write_rate_rows,
)
from .summaries import (
    SiteData,
    compute_summary,
    load_summary,
    merge_summaries,
    save_summary,
)
from .variance import CORRECTIONS, apply_correction, cr0, wald_ci


def _out_path(raw: str) -> Path:
    path = Path(raw)
    base = os.environ.get("FEDLMM_OUT_DIR")
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _split_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from exc


def _split_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


# -- summarize ----------------------------------------------------------------


def _read_csv_columns(path: str, columns: list[str], site_col: str | None):
    """Parse named numeric columns; report the exact cell on failure."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ValidationError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty CSV (no header row)")
        missing = [c for c in columns + ([site_col] if site_col else []) if c not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        values: list[list[float]] = []
        site_ids: list[str] = []
        for i, record in enumerate(reader, start=1):
            row = []
            for c in columns:
                cell = record[c]
                try:
                    row.append(float(cell))
                except (TypeError, ValueError):
                    raise ValidationError(
                        f"{path}: non-numeric value {cell!r} in column {c!r}, data row {i}"
                    ) from None
            values.append(row)
            site_ids.append(record[site_col] if site_col else "")
    if not values:
        raise ValidationError(f"{path}: no data rows")
    return np.array(values), site_ids


def cmd_summarize(args) -> int:
    columns = [args.outcome] + [c for c in args.covariates.split(",") if c]
    if len(columns) < 2:
        raise ValidationError("need at least one covariate")
    data, site_ids = _read_csv_columns(args.csv, columns, args.site_col)
    y_all = data[:, 0]
    X_all = data[:, 1:]
    if args.intercept:
        X_all = np.column_stack([np.ones(len(y_all)), X_all])
    if args.site_col:
        order = sorted(set(site_ids))
        groups = [(sid, np.array([s == sid for s in site_ids])) for sid in order]
    else:
        groups = [(args.site_id, np.ones(len(y_all), dtype=bool))]
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sid, mask in groups:
        site = SiteData(site_id=sid, y=y_all[mask], X=X_all[mask])
        summary = compute_summary(site)
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in sid) or "site"
        target = out_dir / f"{safe}.json"
        save_summary(summary, target)
        print(target)
    return 0


# -- privatize ----------------------------------------------------------------


def cmd_privatize(args) -> int:
    summary = load_summary(args.infile)
    rule = CalibrationRule(mode="dimension-adjusted", epsilon0=args.epsilon0)
    budget = calibrate(rule, delta=args.delta, p=summary.p)
    sensitive = frozenset(_split_ints(args.sensitive)) if args.sensitive else frozenset()
    if args.scope == "subset" and not sensitive:
        raise ValidationError("--scope subset needs --sensitive column indices")
    noisy = privatize(
        summary, budget, scope=args.scope, sensitive=sensitive, rng_seed=args.seed
    )
    target = _out_path(args.out)
    save_summary(noisy, target)
    print(target)
    return 0


# -- fit -----------------------------------------------------------------------


def cmd_fit(args) -> int:
    summaries = merge_summaries([load_summary(p) for p in args.summaries])
    if args.method == "ml":
        fit = fit_ml(summaries)
    else:
        fit = fit_reml(summaries)
    v = apply_correction(cr0(summaries, fit), args.correction)
    ci = wald_ci(fit, v, level=args.level, use_t=args.use_t)
    report = {
        "fit": fit.to_dict(),
        "variance": {
            "correction": v.correction,
            "K": v.K,
            "N": v.N,
            "V": [[float(x) for x in row] for row in v.V],
            "se": [float(x) for x in v.se],
        },
        "ci": {
            "level": args.level,
            "quantile": "t" if args.use_t else "normal",
            "intervals": [[float(lo), float(hi)] for lo, hi in ci],
        },
    }
    target = _out_path(args.out)
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(target)
    if args.coef_csv:
        coef_path = _out_path(args.coef_csv)
        with open(coef_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coefficient", "estimate", "se", "ci_lo", "ci_hi", "correction"])
            beta = fit.theta_hat.beta
            for j in range(len(beta)):
                writer.writerow(
                    [f"b{j}", repr(float(beta[j])), repr(float(v.se[j])),
                     repr(float(ci[j, 0])), repr(float(ci[j, 1])), v.correction]
                )
        print(coef_path)
    if not fit.converged:
        print("warning: optimizer did not converge", file=sys.stderr)
    return 0


# -- attack ---------------------------------------------------------------------


def cmd_attack(args) -> int:
    config = AttackConfig(timeout_s=args.timeout)
    row = run_reconstruction_cell(
        n=args.n, p=args.p, epsilon0=args.epsilon0, reps=args.reps,
        seed=args.seed, delta=args.delta, config=config,
    )
    target = _out_path(args.out)
    fields = ("n", "p", "epsilon0", "matrix_rate", "element_rate", "reps")
    out_row = dict(row)
    out_row["epsilon0"] = "ref" if row["epsilon0"] is None else row["epsilon0"]
    write_rate_rows([out_row], target, fields)
    print(target)
    return 0


def cmd_simulate_reconstruction(args) -> int:
    eps_values = []
    for token in args.epsilon0.split(","):
        token = token.strip()
        if not token:
            continue
        eps_values.append(None if token in ("ref", "none") else float(token))
    config = AttackConfig(timeout_s=args.timeout)
    rows = run_reconstruction_study(
        n_values=_split_ints(args.n), p_values=_split_ints(args.p),
        epsilon0_values=eps_values, reps=args.reps, seed=args.seed,
        delta=args.delta, config=config,
    )
    for row in rows:
        row["epsilon0"] = "ref" if row["epsilon0"] is None else row["epsilon0"]
    target = _out_path(args.out)
    fields = ("n", "p", "epsilon0", "matrix_rate", "element_rate", "reps", "failed")
    write_rate_rows(rows, target, fields)
    print(target)
    return 0


# -- simulate-estimation ---------------------------------------------------------


def cmd_simulate_estimation(args) -> int:
    rows = []
    for K in _split_ints(args.K):
        scenario = Scenario.from_name(args.scenario, K=K)
        rows.extend(
            run_estimation_study(
                scenario,
                epsilon0_grid=_split_floats(args.epsilon0),
                reps=args.reps,
                seed=args.seed,
                correction=args.correction,
                arms=tuple(args.arms.split(",")),
                workers=args.workers,
            )
        )
    target = _out_path(args.out)
    write_metric_rows(rows, target)
    print(target)
    return 0


# -- end-to-end smoke pipeline -----------------------------------------------


_BUNDLE_SEED = 715517  # fixed: the bundle itself is part of the interface


def write_bundle_csv(path: Path) -> Path:
    """Deterministic small multi-site dataset used by the smoke pipeline."""
    rng = np.random.default_rng(_BUNDLE_SEED)
    rows = []
    beta = np.array([0.8, 0.5, -0.7, 0.3])
    for k in range(5):
        n = 40 + 10 * k
        x1 = rng.binomial(1, 0.5, n).astype(float)
        x2 = rng.binomial(1, 0.4, n).astype(float)
        x3 = rng.normal(0.0, 1.0, n)
        X = np.column_stack([np.ones(n), x1, x2, x3])
        y = X @ beta + rng.normal(0.0, 0.6) + rng.normal(0.0, 1.0, n)
        for i in range(n):
            rows.append((f"clinic{k}", y[i], x1[i], x2[i], x3[i]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "y", "x1", "x2", "x3"])
        for sid, y_i, a, b, c in rows:
            writer.writerow([sid, repr(float(y_i)), repr(float(a)), repr(float(b)), repr(float(c))])
    return path


def end_to_end(outdir, seed: int = 7, epsilon0: float = 8.0) -> dict[str, object]:
    """summarize -> privatize -> fit -> attack on the bundled dataset."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = write_bundle_csv(out / "bundle.csv")
    rc = main(
        ["summarize", "--csv", str(bundle), "--outcome", "y", "--covariates",
         "x1,x2,x3", "--site-col", "site", "--out", str(out / "summaries")]
    )
    if rc != 0:
        raise FedLMMError(f"summarize stage failed with exit code {rc}")
    summary_files = sorted(str(p) for p in (out / "summaries").glob("*.json"))
    dp_files = []
    for i, f in enumerate(summary_files):
        target = out / "private" / Path(f).name
        rc = main(
            ["privatize", "--in", f, "--out", str(target), "--epsilon0", repr(epsilon0),
             "--delta", "0.01", "--scope", "full", "--seed", str(seed)]
        )
        if rc != 0:
            raise FedLMMError(f"privatize stage failed with exit code {rc}")
        dp_files.append(str(target))
    rc = main(
        ["fit", *dp_files, "--method", "ml", "--correction", "cr1",
         "--out", str(out / "fit_dp.json"), "--coef-csv", str(out / "coef_dp.csv")]
    )
    if rc != 0:
        raise FedLMMError(f"fit stage failed with exit code {rc}")
    rc = main(
        ["fit", *summary_files, "--method", "ml", "--correction", "cr1",
         "--out", str(out / "fit_plain.json"), "--coef-csv", str(out / "coef_plain.csv")]
    )
    if rc != 0:
        raise FedLMMError(f"fit stage failed with exit code {rc}")
    rc = main(
        ["attack", "--n", "3", "--p", "3", "--epsilon0", repr(epsilon0),
         "--delta", "0.01", "--reps", "50", "--seed", str(seed),
         "--out", str(out / "attack.csv")]
    )
    if rc != 0:
        raise FedLMMError(f"attack stage failed with exit code {rc}")
    return {
        "bundle": bundle,
        "summaries": summary_files,
        "private": dp_files,
        "fit_dp": out / "fit_dp.json",
        "fit_plain": out / "fit_plain.json",
        "attack": out / "attack.csv",
    }


def cmd_pipeline(args) -> int:
    artifacts = end_to_end(args.out, seed=args.seed, epsilon0=args.epsilon0)
    for key in sorted(artifacts):
        print(f"{key}: {artifacts[key]}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlmm",
        description="One-shot federated linear mixed models with differential privacy",
    )
    parser.add_argument("--version", action="version", version=f"fedlmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="per-site quadratic summaries from a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--covariates", required=True, help="comma-separated column names")
    p.add_argument("--site-col", default=None, help="split rows into sites by this column")
    p.add_argument("--site-id", default="site", help="site id when --site-col is absent")
    p.add_argument("--no-intercept", dest="intercept", action="store_false")
    p.add_argument("--out", required=True, help="output directory for summary JSON files")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("privatize", help="apply the Gaussian mechanism to a summary file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon0", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--scope", choices=["full", "subset"], default="full")
    p.add_argument("--sensitive", default="", help="comma-separated design columns (1-based)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("fit", help="pooled ML/REML fit from summary files")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--method", choices=["ml", "reml"], default="ml")
    p.add_argument("--correction", choices=list(CORRECTIONS), default="cr0")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--use-t", action="store_true")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--coef-csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("attack", help="reconstruction rates for one (n, p) cell")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--epsilon0", type=float, default=None, help="omit for the no-noise reference")
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=10.0, help="per-solve seconds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("simulate-estimation", help="replicated estimation study")
    p.add_argument("--scenario", required=True,
                   choices=["ri-correct", "ri-mis", "ris-correct", "ris-mis"])
    p.add_argument("--K", required=True, help="comma-separated site counts")
    p.add_argument("--epsilon0", required=True, help="comma-separated privacy levels")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--correction", choices=list(CORRECTIONS), default="cr0")
    p.add_argument("--arms", default="ipd,dp,dp2")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_estimation)

    p = sub.add_parser("simulate-reconstruction", help="attack rates over (n, p, epsilon0) grids")
    p.add_argument("--n", required=True, help="comma-separated row counts")
    p.add_argument("--p", required=True, help="comma-separated dimensions")
    p.add_argument("--epsilon0", required=True, help='comma-separated levels; "ref" = no noise')
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_reconstruction)

    p = sub.add_parser("pipeline", help="seeded summarize -> privatize -> fit -> attack smoke run")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epsilon0", type=float, default=8.0)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SingularDesignError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except FedLMMError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
