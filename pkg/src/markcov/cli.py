"""Batch command-line interface.

Subcommands cover the whole pipeline: simulate a study design, fit a
longitudinal CSV, predict scores and trajectories, compute asymptotic
(and bootstrap) uncertainty, select smoothing weights by
cross-validation, and run Monte Carlo studies.  Outputs are plain CSV
and JSON with deterministic content for a given --seed, whatever
--threads is.  A JSON config file may supply any long flag (keys with
underscores); explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from markcov import io
from markcov.basis import build_basis, eval_design
from markcov.estimation import FitConfig, fit
from markcov.inference import (
    SingularFisherError,
    asymptotic_covariance,
    bootstrap_sd,
)
from markcov.likelihood import LikelihoodWorkspace, ModelParams, evaluate
from markcov.model import Dataset, theta_from_dict
from markcov.modelselect import CvPlan, sequential_cv
from markcov.simulate import paper_design, run_study, sample_dataset

GRID_POINTS = 200


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser(_config_defaults(argv))
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (io.DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _config_defaults(argv) -> dict:
    """Pre-scan for --config and load flag defaults from it."""
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
        else:
            continue
        payload = io.read_json(path)
        if not isinstance(payload, dict):
            raise SystemExit(f"config {path} must hold a JSON object")
        return {str(k).replace("-", "_"): v for k, v in payload.items()}
    return {}


def _build_parser(config: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markcov",
        description="Joint modeling of point-process grids and their marks.")
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", default=".", help="directory for outputs")
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "sample a synthetic study dataset")
    p.add_argument("--r", type=float, default=30.0, help="baseline rate")
    p.add_argument("--alpha", type=float, default=0.75, help="variance proportion")
    p.add_argument("--n", type=int, default=100, help="number of subjects")

    p = add("fit", cmd_fit, "fit a longitudinal CSV")
    _add_data_flags(p)
    _add_model_flags(p)

    p = add("predict", cmd_predict, "scores, trajectories, residuals from a fit")
    p.add_argument("--fit", required=True, help="fit JSON from the fit command")
    _add_data_flags(p, with_domain=False)

    p = add("infer", cmd_infer, "asymptotic (and bootstrap) uncertainty")
    p.add_argument("--fit", required=True)
    _add_data_flags(p, with_domain=False)
    p.add_argument("--bootstrap", type=int, default=0,
                   help="bootstrap replicates (0 = skip)")

    p = add("cv", cmd_cv, "choose penalty weights by cross-validation")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid-min", type=float, default=1e-8)
    p.add_argument("--grid-max", type=float, default=1e-1)
    p.add_argument("--grid-points", type=int, default=7)
    p.add_argument("--sweeps", type=int, default=1)

    p = add("study", cmd_study, "Monte Carlo recovery study")
    p.add_argument("--scenarios", nargs="+", default=["alpha075-r30"],
                   help="tokens like alpha075-r30 or r10-alpha060")
    p.add_argument("--n", type=int, nargs="+", default=[100])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--knots", type=int, default=5)
    p.add_argument("--xi", type=float, nargs=4, default=list(FitConfig().xi))
    p.add_argument("--with-inference", action="store_true")

    if config:
        for sp in sub.choices.values():
            for action in sp._actions:
                if action.dest in config:
                    action.default = config[action.dest]
                    action.required = False
    return parser


def _add_data_flags(p, with_domain=True):
    p.add_argument("--data", required=True, help="longitudinal CSV (subject_id,x,y)")
    p.add_argument("--manifest", default=None, help="subjects JSON for empty subjects")
    if with_domain:
        p.add_argument("--domain", type=float, nargs=2, default=None,
                       help="original x range; defaults to the observed range")


def _add_model_flags(p):
    p.add_argument("--p1", type=int, default=2)
    p.add_argument("--p2", type=int, default=2)
    p.add_argument("--knots", type=int, default=5)
    p.add_argument("--xi", type=float, nargs=4, default=list(FitConfig().xi),
                   help="penalty weights for mu, phi, nu, psi")
    p.add_argument("--max-outer", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit_config(args) -> FitConfig:
    return FitConfig(p1=args.p1, p2=args.p2, xi=tuple(args.xi),
                     max_outer_iters=args.max_outer, tol=args.tol,
                     seed=args.seed)


def _load_normalized(path, manifest, domain, fallback_original=None):
    """Read a CSV and map its domain onto [0, 1]."""
    if domain is None and fallback_original is not None:
        domain = tuple(fallback_original)
    data = io.read_dataset_csv(path, domain=None if domain is None else tuple(domain),
                               manifest=manifest)
    return io.normalize_domain(data)


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise ValueError("--n must be at least 1")
    if args.r <= 0 or not 0 < args.alpha < 1:
        raise ValueError("--r must be positive and --alpha in (0, 1)")
    out = _out_dir(args)
    design = paper_design(r=args.r, alpha=args.alpha, n=args.n)
    data, scores_u, scores_v = sample_dataset(design, seed=args.seed)
    data = Dataset(realizations=data.realizations, domain=data.domain,
                   ids=io.default_ids(data.n))
    io.write_dataset_csv(out / "dataset.csv", data)
    io.write_subject_manifest(out / "subjects.json", data)
    io.write_json(out / "truth.json", {
        "format": "markcov-truth",
        "design": {"r": args.r, "alpha": args.alpha, "n": args.n,
                   "seed": args.seed, "label": design.label},
        "sigma_uv": design.sigma_uv.tolist(),
        "var_u": design.var_u.tolist(),
        "var_v": design.var_v.tolist(),
        "var_eta": design.var_eta,
        "scores_u": scores_u.tolist(),
        "scores_v": scores_v.tolist(),
    })
    mean_m = float(np.mean([obs.m for obs in data.realizations]))
    print(f"simulate: wrote {data.n} subjects to {out / 'dataset.csv'} "
          f"(mean points per subject {mean_m:.2f})")
    return 0


def cmd_fit(args) -> int:
    out = _out_dir(args)
    data, original = _load_normalized(args.data, args.manifest, args.domain)
    basis = build_basis((0.0, 1.0), args.knots)
    config = _fit_config(args)
    result = fit(data, basis, config)

    ids = data.ids if data.ids is not None else io.default_ids(data.n)
    payload = io.fit_payload(
        result.theta, basis, objective=result.objective, trace=result.trace,
        converged=result.converged, n_outer=result.n_outer,
        scores_u=result.scores_u, scores_v=result.scores_v, ids=ids,
        config={"p1": args.p1, "p2": args.p2, "knots": args.knots,
                "xi": list(args.xi), "seed": args.seed,
                "max_outer": args.max_outer, "tol": args.tol},
        domain_original=original)
    io.write_json(out / "fit.json", payload)

    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    G = eval_design(basis, grid)
    curves = {"baseline_intensity": np.exp(G @ result.theta.c0),
              "nu": G @ result.theta.d0}
    for k in range(args.p1):
        curves[f"phi_{k + 1}"] = G @ result.theta.c[k]
    for l in range(args.p2):
        curves[f"psi_{l + 1}"] = G @ result.theta.d[l]
    io.write_curves_csv(out / "curves.csv", io.denormalize_x(grid, original), curves)
    status = "converged" if result.converged else "NOT converged"
    print(f"fit: {status} in {result.n_outer} outer iterations, "
          f"objective {result.objective:.6f}; wrote {out / 'fit.json'}")
    return 0


def cmd_predict(args) -> int:
    out = _out_dir(args)
    theta, basis, payload = io.load_fit(args.fit)
    data, original = _load_normalized(args.data, args.manifest, None,
                                      fallback_original=payload["domain_original"])
    ws = LikelihoodWorkspace(data, basis)
    res = evaluate(ws, ModelParams.from_theta(theta))
    scores_u = res.modes[:, :theta.p1]
    scores_v = res.modes[:, theta.p1:]
    ids = data.ids if data.ids is not None else io.default_ids(data.n)
    io.write_scores_csv(out / "scores.csv", ids, scores_u, scores_v)

    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    G = eval_design(basis, grid)
    base = G @ theta.d0
    comp = G @ theta.d.T
    x_out = io.denormalize_x(grid, tuple(payload["domain_original"]))
    with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "x", "ghat"])
        for i, sid in enumerate(ids):
            traj = base + comp @ scores_v[i]
            for xj, gj in zip(x_out, traj):
                writer.writerow([sid, format(xj, io.FLOAT_FMT), format(gj, io.FLOAT_FMT)])

    fitted = []
    for i, obs in enumerate(data.realizations):
        if obs.m:
            Gi = eval_design(basis, obs.x)
            fitted.append(Gi @ theta.d0 + Gi @ theta.d.T @ scores_v[i])
        else:
            fitted.append(np.zeros(0))
    io.write_residuals_csv(out / "residuals.csv", data, fitted)
    resid = np.concatenate([obs.y - f for obs, f in zip(data.realizations, fitted)])
    sd = float(resid.std()) if resid.size else float("nan")
    print(f"predict: wrote scores, trajectories, residuals for {data.n} subjects "
          f"(residual SD {sd:.4f})")
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    theta, basis, payload = io.load_fit(args.fit)
    data, _ = _load_normalized(args.data, args.manifest, None,
                               fallback_original=payload["domain_original"])
    try:
        inf = asymptotic_covariance(theta, basis, data)
    except SingularFisherError as exc:
        print(f"infer: {exc}", file=sys.stderr)
        return 2
    rows = [f"u_{k + 1}" for k in range(theta.p1)]
    cols = [f"v_{l + 1}" for l in range(theta.p2)]
    io.write_matrix_csv(out / "sigma_uv.csv", theta.sigma_uv, rows, cols, corner="sigma_uv")
    io.write_matrix_csv(out / "sd_asymptotic.csv", inf.sd_sigma_uv, rows, cols, corner="sd")
    rho = theta.sigma_uv / np.sqrt(np.outer(theta.var_u, theta.var_v))
    io.write_matrix_csv(out / "rho_uv.csv", rho, rows, cols, corner="rho")
    io.save_avar(out / "avar", inf.avar, theta)
    msg = f"infer: wrote SD tables to {out}"
    if args.bootstrap:
        config = FitConfig(p1=theta.p1, p2=theta.p2,
                           xi=tuple(payload["config"]["xi"]), seed=args.seed)
        boot = bootstrap_sd(theta, data, basis, config, n_boot=args.bootstrap,
                            seed=args.seed)
        io.write_matrix_csv(out / "sd_bootstrap.csv", boot.sd_sigma_uv, rows, cols,
                            corner="sd")
        msg += f" (bootstrap: {boot.n_used} used, {boot.n_dropped} dropped)"
    print(msg)
    return 0


def cmd_cv(args) -> int:
    out = _out_dir(args)
    data, _ = _load_normalized(args.data, args.manifest, args.domain)
    basis = build_basis((0.0, 1.0), args.knots)
    config = _fit_config(args)
    grid = tuple(float(g) for g in np.geomspace(args.grid_min, args.grid_max,
                                                args.grid_points))
    plan = CvPlan(folds=args.folds, grid=(grid,) * 4, init_xi=tuple(args.xi),
                  sweeps=args.sweeps, seed=args.seed)
    result = sequential_cv(data, basis, config, plan, threads=args.threads)
    io.write_cv_table_csv(out / "cv_table.csv", result.table)
    io.write_json(out / "cv_choice.json", {
        "xi": list(result.xi), "score": result.score,
        "folds": args.folds, "seed": args.seed,
    })
    print(f"cv: best xi = {tuple(f'{x:.3g}' for x in result.xi)} "
          f"with score {result.score:.4f}; table in {out / 'cv_table.csv'}")
    return 0


def _parse_scenario(token: str) -> tuple[float, float]:
    """Read r and alpha from tokens like ``alpha075-r30`` (any order).

    Digit runs are decimal-point free: ``alpha075`` means 0.75,
    ``alpha60`` means 0.60; an explicit dot also works (``alpha0.6``).
    """
    r = alpha = None
    for part in token.lower().split("-"):
        if part.startswith("alpha"):
            digits = part[len("alpha"):]
            if "." in digits:
                alpha = float(digits)
            elif digits.startswith("0") and len(digits) > 1:
                alpha = float("0." + digits[1:])
            elif digits:
                alpha = float(digits) / 100.0
        elif part.startswith("r"):
            r = float(part[1:])
    if r is None or alpha is None or not 0 < alpha < 1 or r <= 0:
        raise ValueError(f"cannot parse scenario token {token!r}; "
                         "expected something like alpha075-r30")
    return r, alpha


def cmd_study(args) -> int:
    if args.reps < 1:
        raise ValueError("--reps must be at least 1")
    out = _out_dir(args)
    config = FitConfig(xi=tuple(args.xi), seed=args.seed)
    for token in args.scenarios:
        r, alpha = _parse_scenario(token)
        for n in args.n:
            design = paper_design(r=r, alpha=alpha, n=n)
            report = run_study(design, interior_knots=args.knots, config=config,
                               replicates=args.reps, seed=args.seed,
                               threads=args.threads,
                               with_inference=args.with_inference)
            name = f"rmse_{token}_n{n}.csv"
            keys = sorted(report.rmse)
            io.write_matrix_csv(out / name,
                                np.array([[report.rmse[k] for k in keys]]),
                                ["rmse"], keys, corner="")
            print(f"study {token} n={n}: {args.reps} replicates, "
                  f"{report.n_failed} failed, {report.n_nonconverged} nonconverged"
                  + (f", {report.n_inference_failed} inference failures"
                     if args.with_inference else "")
                  + f"; wrote {out / name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
