"""``qkphase`` command line.

Exit codes: 0 success, 2 invalid input, 3 numerical failure (per-N details
are written to stderr as JSON lines).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiment import (
    ConfigError,
    ExperimentConfig,
    estimate_rows,
    header_lines,
    load_config_file,
    make_grid,
    run_alignment,
    run_bench,
    run_pipeline,
    run_size,
    scan_rows,
    select_training,
    write_csv,
)
from .ising import ChainSpec, ED_MAX_SITES, ed_ground_state_overlap, fidelity
from .kernel import write_gram_csv
from .scaling import (
    BoundaryPeakError,
    CriticalEstimate,
    FitError,
    Method,
    NoSignChangeError,
    fit_scaling,
    zero_crossing,
)
from .svm import ConvergenceError, decision_scan, load_model, save_model

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _ints(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment configuration (overrides --config)")
    g.add_argument("--config", help="TOML or JSON file with ExperimentConfig fields")
    g.add_argument("--grid-min", type=float)
    g.add_argument("--grid-max", type=float)
    g.add_argument("--grid-points", type=int)
    g.add_argument("--protocol", choices=["d1", "d2", "random"])
    g.add_argument("--kernel", choices=["FIDELITY", "FIDELITY_PER_SITE"])
    g.add_argument("--n-ladder", type=_ints, help="comma separated system sizes")
    g.add_argument("--c-param", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--m-random", type=int)
    g.add_argument("--svm-tol", type=float)
    g.add_argument("--include-unreliable", action="store_true", default=None)
    g.add_argument("--align-ladder", type=_ints)
    g.add_argument("--align-reference-n", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=".", help="output directory")


def build_config(args, **extra) -> ExperimentConfig:
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for name in (
        "grid_min", "grid_max", "grid_points", "protocol", "kernel", "n_ladder", "c_param",
        "seed", "m_random", "svm_tol", "include_unreliable", "align_ladder", "align_reference_n",
    ):
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    data.update(extra)
    return ExperimentConfig.from_mapping(data)


def _report_failures(failures) -> None:
    for f in failures:
        print(json.dumps(f), file=sys.stderr)


# --- subcommands ------------------------------------------------------------


def cmd_grid(args) -> int:
    cfg = build_config(args)
    grid = make_grid(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = select_training(grid, cfg.protocol, cfg.seed, cfg.m_random)
    in_train = np.isin(grid, train.points).astype(int)
    write_csv(out / "grid.csv", ("J", "in_training", "label"),
              [(j, t, 1 if j > 1 else -1) for j, t in zip(grid, in_train)], header_lines(cfg))
    print(f"{grid.size} grid points in [{cfg.grid_min}, {cfg.grid_max}]; "
          f"{len(train)} training points ({cfg.protocol.value})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args, n_ladder=[args.n])
    grid = make_grid(cfg)
    training = select_training(grid, cfg.protocol, cfg.seed, cfg.m_random)
    res = run_size(cfg, grid, training, args.n, args.threads)
    if res.model is None:
        raise NumericalFailure(json.dumps({"N": args.n, "stage": "svm", "error": res.error}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.model.metadata.update(
        tool=f"qkphase {__version__}", config_hash=cfg.digest(), protocol=cfg.protocol.value, seed=cfg.seed
    )
    save_model(out / f"model_N{args.n}.json", res.model)
    write_gram_csv(out / f"gram_N{args.n}.csv", res.model.gram, header_lines(cfg))
    write_csv(out / f"scan_N{args.n}.csv",
              ("J", "decision", "is_support_vector_nearest", "decision_without_bias"),
              scan_rows(res, grid), header_lines(cfg))
    e = res.estimate
    print(f"N={args.n}: {res.model.support_indices.size} support vectors, b={res.model.bias:.6g}, "
          f"J_c(N)={e.j_c_n:.6f} ({'reliable' if e.reliable else 'UNRELIABLE'})")
    return EXIT_OK


def cmd_scan(args) -> int:
    model = load_model(args.model)
    cfg = build_config(args)
    grid = make_grid(cfg)
    scan = decision_scan(model, grid, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    notes = header_lines(cfg) + [f"model={Path(args.model).name}"]
    write_csv(out / f"scan_N{model.gram.n_sites}.csv", ("J", "decision"), scan, notes)
    print(f"J_c(N)={zero_crossing(scan):.6f}")
    return EXIT_OK


def _read_estimates(path) -> list:
    import csv

    with open(path) as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    return [
        CriticalEstimate(int(r["N"]), float(r["J_c_N"]), Method(r["method"]),
                         None if r["protocol"] == "NONE" else r["protocol"],
                         bool(int(r["reliable"])), r["kernel"] or None)
        for r in rows
    ]


def cmd_fit(args) -> int:
    est = _read_estimates(args.estimates)
    if args.method:
        est = [e for e in est if e.method.value == args.method]
    if not args.include_unreliable:
        est = [e for e in est if e.reliable]
    try:
        fit = fit_scaling(est)
    except FitError as exc:
        raise NumericalFailure(str(exc)) from exc
    doc = {"tool": f"qkphase {__version__}", "source": str(args.estimates), **fit.to_dict()}
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "fit.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(_fit_line("fit", fit))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = build_config(args, bench=True)
    grid = make_grid(cfg)
    est, failures = run_bench(cfg, grid)
    _report_failures(failures)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "estimates.csv", ("method", "protocol", "kernel", "N", "J_c_N", "reliable"),
              estimate_rows(est), header_lines(cfg))
    try:
        fit = fit_scaling(est)
    except (ValueError, FitError) as exc:
        raise NumericalFailure(str(exc)) from exc
    doc = {"tool": f"qkphase {__version__}", "config_hash": cfg.digest(), "bench": fit.to_dict()}
    (out / "fit.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(_fit_line("lambda-derivative", fit))
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_align(args) -> int:
    cfg = build_config(args, align=True)
    rows = run_alignment(cfg, make_grid(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "alignment.csv", ("kernel", "N", "A", "extrapolated_A"), rows, header_lines(cfg))
    for r in rows:
        if r[0] in ("FIDELITY", "FIDELITY_PER_SITE"):
            extra = "" if r[3] is None else f"  extrapolated={r[3]:.5f}"
            print(f"{r[0]:>18} N={r[1]:<6} A={r[2]:.5f}{extra}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n in args.sizes:
        if n > ED_MAX_SITES:
            raise ConfigError(f"ED oracle limited to N <= {ED_MAX_SITES}")
        chain = ChainSpec(n)
        pairs = rng.uniform(args.j_min, args.j_max, size=(args.pairs, 2))
        err = max(abs(ed_ground_state_overlap(chain, a, b) - fidelity(chain, a, b)) for a, b in pairs)
        worst = max(worst, err)
        print(f"N={n:>2}: max |ED - JW| = {err:.3e}")
    if worst >= args.tol:
        raise NumericalFailure(f"oracle disagreement {worst:.3e} >= {args.tol:g}")
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = build_config(args, bench=True, align=not args.no_align)
    bundle = run_pipeline(cfg, threads=args.threads, out_dir=args.out)
    for e in bundle.estimates:
        print(f"N={e.n_sites:>6}  J_c(N)={e.j_c_n:.6f}{'' if e.reliable else '  (unreliable)'}")
    if bundle.fit:
        print(_fit_line(f"SVM ({cfg.protocol.value})", bundle.fit))
    if bundle.bench_fit:
        print(_fit_line("lambda-derivative", bundle.bench_fit))
    failures = list(bundle.failures)
    if bundle.fit_error:
        failures.append({"stage": "fit", "error": bundle.fit_error})
    _report_failures(failures)
    return EXIT_NUMERIC if failures else EXIT_OK


def _fit_line(label, fit) -> str:
    e = fit.std_errors
    return (f"{label}: J_c={fit.j_c:.5f}({e[0]:.1e})  a={fit.a:.4g}  "
            f"nu={fit.nu:.4f}({e[2]:.1e})  |r|={fit.residual_norm:.2e}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkphase", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qkphase {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("grid", help="write the coupling grid and training selection")
    _config_args(s)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("train", help="train an SVM at one system size")
    _config_args(s)
    s.add_argument("-n", type=int, required=True, help="system size N")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("scan", help="decision values of a saved model over the grid")
    _config_args(s)
    s.add_argument("model", help="model JSON written by `train`")
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("fit", help="fit J_c + a N^-nu to an estimates.csv")
    s.add_argument("estimates")
    s.add_argument("--method", choices=[m.value for m in Method])
    s.add_argument("--include-unreliable", action="store_true")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("bench", help="fidelity-per-site derivative peaks and their fit")
    _config_args(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("align", help="kernel-target alignment sweep")
    _config_args(s)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("oracle", help="compare exact diagonalisation with the closed form")
    s.add_argument("--sizes", type=_ints, default=[4, 6, 8, 10, 12])
    s.add_argument("--pairs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--j-min", type=float, default=0.25)
    s.add_argument("--j-max", type=float, default=1.75)
    s.add_argument("--tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("repro", help="full ladder: SVM fit, benchmark fit, alignment data")
    _config_args(s)
    s.add_argument("--no-align", action="store_true")
    s.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, ConvergenceError, FitError, NoSignChangeError, BoundaryPeakError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
