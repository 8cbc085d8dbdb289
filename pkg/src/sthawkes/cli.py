"""Command line interface: simulate, fit, run experiments, render reports."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from .catalog import Domain, load_csv, save_csv
from .errors import ValidationError
from .experiments import ExperimentSpec, run_experiment, write_csv
from .grid import bin_events, intensity_on_grid, make_grid
from .kernels import make_kernel
from .report import render
from .simulator import GroundTruth, simulate
from .solver import FitOptions, fit, save_model_json
from . import __version__


def _floats(text):
    return tuple(float(v) for v in str(text).split(","))


def _cmd_simulate(args):
    mu = np.array(_floats(args.mu))
    d = len(mu)
    alpha = np.array(_floats(args.alpha)).reshape(d, d)
    params = json.loads(args.params) if args.params else {}
    supports = _floats(args.supports)
    kernel = make_kernel(args.spatial_kernel, args.temporal_kernel, supports, params)
    gt = GroundTruth(mu, alpha, [[kernel for _ in range(d)] for _ in range(d)])
    sx, sy, t_end = _floats(args.domain)
    cat = simulate(gt, Domain(sx, sy, t_end), seed=args.seed)
    save_csv(cat, args.out)
    print(f"wrote {cat.total_events} events to {args.out}")


def _cmd_fit(args):
    with open(args.config) as fh:
        cfg = json.load(fh)
    cfg_hash = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
    sx, sy, t_end = cfg["domain"]
    domain = Domain(sx, sy, t_end)
    cat = load_csv(args.events, domain)
    grid = make_grid(domain, tuple(cfg["supports"]), tuple(cfg["delta"]))
    binned = bin_events(cat, grid)
    opts = FitOptions(**cfg.get("opts", {}))
    result = fit(
        binned,
        spatial=cfg.get("spatial_kernel", "tg"),
        temporal=cfg.get("temporal_kernel", "kum"),
        opts=opts,
        cache_dir=cfg.get("cache_dir"),
    )
    save_model_json(args.out, result, grid, seed=cfg.get("seed"), config_hash=cfg_hash)
    print(
        f"fit finished after {result.n_iter} iterations "
        f"(loss {result.loss_trajectory[-1]:.6g}); model written to {args.out}"
    )


def _cmd_exp(args):
    kwargs = {}
    if args.config:
        with open(args.config) as fh:
            kwargs = json.load(fh)
    kwargs["experiment"] = args.experiment
    for key in ("runs", "seed", "workers", "spatial", "temporal"):
        val = getattr(args, key, None)
        if val is not None:
            kwargs[key] = val
    for key in ("deltas", "horizons", "bounds"):
        val = getattr(args, key, None)
        if val is not None:
            kwargs[key] = _floats(val)
    if "psi_cells" in kwargs:
        kwargs["psi_cells"] = tuple(tuple(c) for c in kwargs["psi_cells"])
    for key in ("deltas", "horizons", "bounds"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    spec = ExperimentSpec(**kwargs)
    if args.full_fidelity:
        from .experiments import full_fidelity_runs

        spec.runs = full_fidelity_runs(spec)
    rows = run_experiment(spec)
    write_csv(args.out, rows, spec.config_hash())
    n_failed = sum(1 for r in rows if r.get("error"))
    print(f"wrote {len(rows)} rows to {args.out} ({n_failed} failed runs)")
    if not args.no_figures:
        png = str(args.out).rsplit(".", 1)[0] + ".png"
        render(spec.experiment, rows, png)
        print(f"rendered {png}")


def _cmd_report(args):
    png = args.out or str(args.results).rsplit(".", 1)[0] + ".png"
    render(args.experiment, args.results, png)
    print(f"rendered {png}")


def _cmd_intensity(args):
    sx, sy, t_end = _floats(args.domain)
    domain = Domain(sx, sy, t_end)
    cat = load_csv(args.events, domain)
    grid = make_grid(domain, _floats(args.supports), _floats(args.delta))
    binned = bin_events(cat, grid)
    with open(args.model) as fh:
        model = json.load(fh)
    from .solver import params_from_dict

    params = params_from_dict(model["model"])
    lam = intensity_on_grid(binned, params)
    with open(args.out, "w") as fh:
        fh.write("process,vx,vy,vt,intensity\n")
        for i in range(lam.shape[0]):
            nz = np.ndindex(lam.shape[1:])
            for vx, vy, vt in nz:
                fh.write(f"{i},{vx},{vy},{vt},{lam[i, vx, vy, vt]!r}\n")
    print(f"wrote intensity field to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sthawkes",
        description="Simulate and fit space-time self-exciting point processes "
        "on a discretized grid.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic catalog")
    p_sim.add_argument("--mu", required=True, help="baseline rate(s), comma separated")
    p_sim.add_argument("--alpha", required=True, help="excitation matrix, row-major comma list")
    p_sim.add_argument("--spatial-kernel", default="tg", choices=["tg", "pow"])
    p_sim.add_argument("--temporal-kernel", default="kum", choices=["tg", "exp", "kum"])
    p_sim.add_argument("--params", default="", help='kernel parameters as JSON, e.g. \'{"sigma": 0.1}\'')
    p_sim.add_argument("--supports", default="1,1,1", help="kernel supports wx,wy,wt")
    p_sim.add_argument("--domain", required=True, help="window bounds sx,sy,T")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output events CSV")
    p_sim.set_defaults(func=_cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model to an events CSV")
    p_fit.add_argument("--events", required=True)
    p_fit.add_argument("--config", required=True, help="fit configuration JSON")
    p_fit.add_argument("--out", required=True, help="output model JSON")
    p_fit.set_defaults(func=_cmd_fit)

    p_exp = sub.add_parser("exp", help="run a synthetic study and write CSV + figure")
    p_exp.add_argument("experiment", choices=["discretization", "statistical", "psi"])
    p_exp.add_argument("--config", default=None, help="experiment spec JSON")
    p_exp.add_argument("--out", required=True, help="output results CSV")
    p_exp.add_argument("--runs", type=int, default=None)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--workers", type=int, default=None)
    p_exp.add_argument("--spatial", default=None, choices=["tg", "pow"])
    p_exp.add_argument("--temporal", default=None, choices=["tg", "exp", "kum"])
    p_exp.add_argument("--deltas", default=None, help="comma list of stepsizes")
    p_exp.add_argument("--horizons", default=None, help="comma list of T values")
    p_exp.add_argument("--bounds", default=None, help="comma list of S values")
    p_exp.add_argument("--full-fidelity", action="store_true",
                       help="restore the full per-study run counts")
    p_exp.add_argument("--no-figures", action="store_true")
    p_exp.set_defaults(func=_cmd_exp)

    p_rep = sub.add_parser("report", help="re-render figures from a results CSV")
    p_rep.add_argument("experiment", choices=["discretization", "statistical", "psi"])
    p_rep.add_argument("--results", required=True)
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=_cmd_report)

    p_int = sub.add_parser("intensity", help="export the dense intensity field to CSV")
    p_int.add_argument("--events", required=True)
    p_int.add_argument("--model", required=True, help="fitted model JSON")
    p_int.add_argument("--domain", required=True, help="sx,sy,T")
    p_int.add_argument("--supports", default="1,1,1")
    p_int.add_argument("--delta", required=True, help="dx,dy,dt")
    p_int.add_argument("--out", required=True)
    p_int.set_defaults(func=_cmd_intensity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
