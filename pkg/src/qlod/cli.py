"""Command-line entry point ``qlod``.

Study parameters come from built-in defaults, then an optional YAML config
file (``--config``), then command-line flags, later sources overriding
earlier ones.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .analysis import relative_errors
from .coefficient import default_field, secondary_field
from .corrector import build_linearization, write_corrector_cache
from .harness import ExperimentConfig, Experiment
from .solver import save_solution

log = logging.getLogger("qlod")

# flag name -> config field; None defaults mean "not given"
_CONFIG_FLAGS = {
    "model": dict(help="nonlinear model id (exp2, exp4, vg, combined_vg, ...)"),
    "rhs": dict(help="right-hand side id: default or exp1"),
    "n_fine": dict(type=int, help="fine elements per side"),
    "coarse": dict(type=int, nargs="+", help="coarse elements per side, one or more"),
    "ks": dict(type=int, nargs="+", metavar="K", help="oversampling layers, one or more"),
    "linearization": dict(choices=["kacanov", "frechet"]),
    "p_star": dict(help="zero | g | g1 | reference | coarse_fem:N | ulod:N:k:<p_star>"),
    "mode": dict(choices=["galerkin", "petrov_galerkin"]),
    "tol": dict(type=float),
    "max_iter": dict(type=int),
    "reference_max_iter": dict(type=int),
    "seed": dict(type=int),
    "stages": dict(type=int, help="iterated LOD stages"),
    "cache_dir": dict(help="directory for corrector and reference caches"),
    "output_dir": dict(help="directory for tables and plots"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file with ExperimentConfig fields")
    for name, kw in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)
    p.add_argument("--timings", action="store_true", default=None, help="fill the wall_ms column")


def load_config(args: argparse.Namespace, **defaults) -> ExperimentConfig:
    data = dict(defaults)
    if getattr(args, "config", None):
        loaded = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config} must contain a mapping")
        data.update(loaded)
    for name in [*_CONFIG_FLAGS, "timings"]:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return ExperimentConfig.from_mapping(data)


def cmd_gen_coefficient(args) -> int:
    make = secondary_field if args.secondary else default_field
    field = make(args.n_fine, args.seed)
    field.save(args.output)
    print(f"wrote {args.output}: n={field.n} min={field.min:.6g} max={field.max:.6g} "
          f"contrast={field.contrast:.6g}")
    return 0


def cmd_solve_reference(args) -> int:
    cfg = load_config(args)
    exp = Experiment(cfg)
    u = exp.reference()
    out = args.output or Path(cfg.output_dir) / f"reference_{cfg.model}.lodu"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_solution(out, u)
    trace = exp.reference_trace
    if trace is not None:
        print(f"iterations={trace.iterations} increment={trace.final_increment:.3e} converged={trace.converged}")
    print(f"wrote {out}: max u = {u.max():.6g}")
    return 0 if trace is None or trace.converged else 1


def cmd_correctors(args) -> int:
    cfg = load_config(args)
    exp = Experiment(cfg)
    lin = build_linearization(exp.coeff, cfg.linearization, exp.p_star(cfg.p_star))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for n in cfg.coarse:
        for k in cfg.ks:
            cs = exp.correctors(n, k, lin)
            path = out_dir / f"correctors_{n}_{cfg.n_fine}_k{k}_{cfg.linearization}.lodc"
            write_corrector_cache(path, cs)
            print(f"wrote {path} ({cs.Q.nnz} nonzeros)")
    return 0


def cmd_solve_lod(args) -> int:
    cfg = load_config(args)
    if len(cfg.coarse) != 1 or len(cfg.ks) != 1:
        raise ValueError("solve-lod takes exactly one --coarse and one --ks value")
    n, k = cfg.coarse[0], cfg.ks[0]
    exp = Experiment(cfg)
    run = exp.cascade(n, k)[-1]
    report = relative_errors(exp.reference(), run.u, exp.transfer(n))
    out = args.output or Path(cfg.output_dir) / f"lod_{cfg.model}_{n}_k{k}.lodu"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_solution(out, run.u)
    print(json.dumps({
        "H": 1.0 / n, "k": k, "iterations": run.trace.iterations,
        "final_increment": run.trace.final_increment, "converged": run.trace.converged,
        "e_lod": report.e_lod, "e_h": report.e_h, "output": str(out),
    }, indent=2))
    return 0 if run.trace.converged else 1


def cmd_study(args) -> int:
    cfg = load_config(args)
    result = harness.run_convergence_study(cfg, path=args.output)
    print(f"wrote {result.path}")
    failed = [r for r in result.rows if r["status"] != "ok"]
    for r in failed:
        print(f"failed: H={r['H']} k={r['k']}", file=sys.stderr)
    if args.plot:
        print(f"wrote {harness.emit_plot(result.path)}")
    return 0 if not failed else 1


def cmd_iteration_study(args) -> int:
    cfg = load_config(args, **harness.iteration_study_config().to_dict())
    result = harness.run_iteration_study(cfg, path=args.output)
    print(f"wrote {result.path}")
    if args.plot:
        print(f"wrote {harness.emit_plot(result.path, x='iteration', y='e_lod', group='H')}")
    done = all(run.trace.converged for run in result.runs.values())
    complete = len(result.runs) == len(harness.study_order(cfg))
    return 0 if done and complete else 1


def cmd_plot(args) -> int:
    out = harness.emit_plot(args.table, args.output, x=args.x, y=args.y, group=args.group, title=args.title)
    print(f"wrote {out}")
    return 0


def cmd_cache(args) -> int:
    if args.action == "clear":
        print(f"removed {harness.clear_cache(args.cache_dir)} files")
        return 0
    entries = harness.cache_entries(args.cache_dir)
    for name, size in entries:
        print(f"{size:>12d}  {name}")
    print(f"{len(entries)} files, {sum(s for _, s in entries)} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlod", description="LOD for nonmonotone quasilinear problems")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-coefficient", help="write the spatial coefficient field")
    p.add_argument("--n-fine", type=int, default=128)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--secondary", action="store_true", help="the low-contrast companion field")
    p.add_argument("-o", "--output", type=Path, default=Path("coefficient.lodf"))
    p.set_defaults(func=cmd_gen_coefficient)

    p = sub.add_parser("solve-reference", help="fine-mesh reference solution")
    _add_config_flags(p)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_solve_reference)

    p = sub.add_parser("correctors", help="compute and write corrector sets")
    _add_config_flags(p)
    p.set_defaults(func=cmd_correctors)

    p = sub.add_parser("solve-lod", help="one LOD solve with error report")
    _add_config_flags(p)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_solve_lod)

    p = sub.add_parser("study", help="convergence study over H and k")
    _add_config_flags(p)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--plot", action="store_true", help="also write an SVG plot")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("iteration-study", help="error against Kačanov iterations")
    _add_config_flags(p)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_iteration_study)

    p = sub.add_parser("plot", help="plot a study table")
    p.add_argument("table", type=Path)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--x", default="H")
    p.add_argument("--y", default="e_lod")
    p.add_argument("--group", default="k")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("cache", help="inspect or clear a cache directory")
    p.add_argument("action", choices=["inspect", "clear"])
    p.add_argument("--cache-dir", type=Path, required=True)
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"qlod: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
