"""Command-line entry point: ``immrm fit|simulate|oracle``.

Exit codes: 0 success, 1 input or configuration error, 2 a fit did not
converge or a checked property failed.  Errors are one line on standard
error starting with ``error:``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import ALL_MODELS, CsvSchema, Model, WorkingModelSpec, load_csv, validate
from .errors import InputError
from .estimators import solve
from .oracle import (check_partial_order, counterexample_dgp, dgp_from_dict, random_dgp,
                     report_json)
from .simulate import bundled_config, load_config, run_study
from .variance import estimate_variances, infer

EXIT_OK, EXIT_INPUT, EXIT_FAIL = 0, 1, 2


def _err(msg: str) -> None:
    print("error: " + " ".join(str(msg).split()), file=sys.stderr)


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _write(path: Path, text: str, newline=None) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline=newline) as fh:
            fh.write(text)
    except OSError as e:
        raise InputError(f"cannot write {path}: {e.strerror}") from None


def cmd_fit(args) -> int:
    schema = CsvSchema(id_col=args.id_col, arm_col=args.arm_col, stratum_col=args.strata_col)
    ds = load_csv(args.data, schema)
    rep = validate(ds)
    if rep.rank_deficient:
        raise InputError("design is rank deficient; collinear columns: " + ", ".join(rep.collinear_columns))
    randomization = args.randomization or ("stratified" if args.strata_col else "simple")
    if randomization == "stratified" and not args.strata_col:
        raise InputError("--randomization stratified needs --strata-col")
    models = ALL_MODELS if args.model == "all" else (Model.parse(args.model),)
    out = _outdir(args.out) if args.out else None
    code = EXIT_OK
    for m in models:
        t0 = time.perf_counter()
        fit = solve(ds, WorkingModelSpec(m))
        var = estimate_variances(fit, ds)
        table = infer(fit, var, args.level, randomization)
        if not fit.converged:
            code = EXIT_FAIL
            print(f"warning: {m.label} did not converge after {fit.iterations} iterations", file=sys.stderr)
        if args.verbose:
            print(f"{m.label}: {fit.iterations} iterations, {time.perf_counter() - t0:.3f}s", file=sys.stderr)
        for r in table.rows:
            se = r.se_stratified if randomization == "stratified" else r.se_simple
            print(f"{m.label:<8} arm {r.arm}  estimate {r.estimate: .6f}  se {se:.6f}  "
                  f"ci [{r.ci_low: .6f}, {r.ci_high: .6f}]  p {r.p:.4g}")
        if out:
            _write(out / f"{m.value}.json", table.to_json())
            _write(out / f"{m.value}.csv", table.to_csv(), newline="")
    return code


def cmd_simulate(args) -> int:
    path = bundled_config(args.bundled) if args.bundled else Path(args.config)
    cfg = load_config(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.replications is not None:
        changes["n_replications"] = args.replications
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    t0 = time.perf_counter()
    report = run_study(cfg, threads=args.threads)
    print(f"simulate: {cfg.n_replications} replications in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    sys.stdout.write(report.table())
    if args.out:
        out = _outdir(args.out)
        _write(out / "report.json", report.to_json())
        _write(out / "report.txt", report.table())
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.sweep:
        rng = np.random.default_rng(args.seed)
        bad = 0
        for _ in range(args.sweep):
            K, J, p, R = (int(rng.integers(2, 4)), int(rng.integers(1, 3)),
                          int(rng.integers(1, 3)), int(rng.integers(2, 4)))
            rep = check_partial_order(random_dgp(rng, K, J, p, R))
            bad += not rep.partial_order_ok
        print(f"sweep: {args.sweep} populations, partial order violated in {bad}")
        return EXIT_OK if bad == 0 else EXIT_FAIL
    if args.counterexample:
        dgp = counterexample_dgp()
    else:
        dgp = dgp_from_dict(_read_mapping(Path(args.config)))
    rep = check_partial_order(dgp)
    if args.counterexample:
        for lab, V in rep.v_tilde.items():
            print(f"{lab} {V[0, 0]:.9f}")
    else:
        print(rep.table())
    if args.out:
        _write(_outdir(args.out) / "oracle.json", report_json(rep))
    return EXIT_OK if rep.partial_order_ok else EXIT_FAIL


def _read_mapping(path: Path) -> dict:
    from .simulate import tomllib
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise InputError(f"{path}: {e}") from None
    # a simulation config may hold the population under [population]
    return d.get("population", d) if isinstance(d.get("population"), dict) else d


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="immrm", description="Covariate-adjusted treatment effects from "
                                 "longitudinal trials with missing outcomes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit working models to a wide CSV")
    f.add_argument("data")
    f.add_argument("--model", default="all", choices=["ancova", "mmrm1", "mmrm2", "immrm", "all"])
    f.add_argument("--strata-col", default=None)
    f.add_argument("--id-col", default="id")
    f.add_argument("--arm-col", default="arm")
    f.add_argument("--randomization", choices=["simple", "stratified"], default=None,
                   help="default: stratified when --strata-col is given")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--out", default=None, help="directory for <model>.json and <model>.csv")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation study")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("config", nargs="?")
    g.add_argument("--bundled", help="name of a bundled config, e.g. mcar_small")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--replications", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="asymptotic covariances for a population")
    g = o.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--counterexample", action="store_true")
    g.add_argument("--sweep", type=int, metavar="N", help="check N random populations")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as e:
        _err(e)
        return EXIT_INPUT
    except KeyboardInterrupt:
        _err("interrupted")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
