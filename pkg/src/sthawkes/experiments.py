"""Scripted synthetic studies: discretization bias, statistical error, and
accuracy/speed of the lag-box approximation of the pairwise statistics.

Each study sweeps a small grid of settings, runs `runs` seeded repetitions
per cell (run failures are recorded, not fatal), and emits one CSV row per
run.  Rows are deterministic given (spec, seed); timing columns are the only
fields that vary between identical re-runs.  Cells may execute on a thread
pool; the worker count comes from the spec or the STHAWKES_WORKERS
environment variable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .catalog import Domain
from .errors import ValidationError
from .grid import bin_events, make_grid
from .kernels import make_kernel
from .precompute import psi_approximation_error, psi_exact, psi_tilde
from .simulator import GroundTruth, simulate
from .solver import FitOptions, fit

SUPPORTS = (1.0, 1.0, 1.0)

_GT_SPATIAL = {"tg": {"m1": 0.0, "m2": 0.0, "sigma": 0.1}, "pow": {"m1": 0.0, "m2": 0.0, "d": 0.1}}
_GT_TEMPORAL = {"kum": {"a": 2.0, "b": 2.0}, "exp": {"decay": 1.0}, "tg": {"mt": 0.5, "sigma_t": 0.1}}


def ground_truth(spatial: str, temporal: str) -> GroundTruth:
    """The one-process synthetic setting: mu = 0.5, alpha = 0.6, unit supports."""
    params = dict(_GT_SPATIAL[spatial])
    params.update(_GT_TEMPORAL[temporal])
    kernel = make_kernel(spatial, temporal, SUPPORTS, params)
    return GroundTruth(np.array([0.5]), np.array([[0.6]]), [[kernel]])


@dataclass
class ExperimentSpec:
    experiment: str = "discretization"
    spatial: str = "tg"
    # default temporal family depends on the study: the discretization sweep
    # uses the Kumaraswamy kernel, the other two the truncated Gaussian
    temporal: str | None = None
    deltas: tuple = (0.5, 0.25, 0.1, 0.05)
    horizons: tuple = (10.0, 100.0)       # T sweep
    bounds: tuple = (10.0, 20.0)          # S sweep
    psi_cells: tuple = ((5.0, 5.0), (10.0, 10.0), (50.0, 10.0))
    runs: int = 10
    seed: int = 0
    fit_opts: dict = field(default_factory=dict)
    workers: int | None = None

    def __post_init__(self):
        if self.temporal is None:
            self.temporal = "kum" if self.experiment == "discretization" else "tg"

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def n_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get("STHAWKES_WORKERS", "1")))


def full_fidelity_runs(spec: ExperimentSpec) -> int:
    """Full-size repetition counts (the desk-scale default is 10): 100 per
    cell, except the power-law discretization sweep which uses 10."""
    if spec.experiment == "discretization" and spec.spatial == "pow":
        return 10
    return 100


def _run_seed(spec: ExperimentSpec, cell_index: int, run: int) -> int:
    ss = np.random.SeedSequence([spec.seed, cell_index, run])
    return int(ss.generate_state(1)[0])


def _flat_names(gt: GroundTruth) -> list:
    d = gt.n_processes
    names = [f"mu_{i}" if d > 1 else "mu" for i in range(d)]
    for i in range(d):
        for j in range(d):
            names.append(f"alpha_{i}{j}" if d > 1 else "alpha")
    for i in range(d):
        for j in range(d):
            for p in gt.kernels[i][j].param_names:
                names.append(f"{p}_{i}{j}" if d > 1 else p)
    return names


def _fit_row(spec: ExperimentSpec, t_end: float, s_bound: float, delta: float,
             cell_index: int, run: int) -> dict:
    gt = ground_truth(spec.spatial, spec.temporal)
    names = _flat_names(gt)
    seed = _run_seed(spec, cell_index, run)
    row = {
        "experiment": spec.experiment,
        "T": t_end,
        "S": s_bound,
        "delta": delta,
        "run": run,
        "seed": seed,
        "n_events": 0,
        "l2_error": np.nan,
        **{f"sq_{n}": np.nan for n in names},
        "loss": np.nan,
        "n_iter": 0,
        "precompute_seconds": np.nan,
        "fit_seconds": np.nan,
        "wall_seconds": np.nan,
        "error": "",
    }
    t0 = time.perf_counter()
    try:
        domain = Domain(s_bound, s_bound, t_end)
        cat = simulate(gt, domain, seed)
        grid = make_grid(domain, SUPPORTS, (delta, delta, delta))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # coarse grids collide events by design
            binned = bin_events(cat, grid)
        opts = FitOptions(**spec.fit_opts)
        result = fit(binned, spec.spatial, spec.temporal, opts=opts)
        theta_star = GroundTruthFlat(gt)
        theta_hat = result.params.flat()
        diff = theta_hat - theta_star.flat
        row.update(
            n_events=int(cat.total_events),
            l2_error=float(np.linalg.norm(diff)),
            loss=float(result.loss_trajectory[-1]),
            n_iter=result.n_iter,
            precompute_seconds=result.timings["precompute_seconds"],
            fit_seconds=result.timings["optimize_seconds"],
        )
        for name, d2 in zip(names, diff**2):
            row[f"sq_{name}"] = float(d2)
    except Exception as exc:  # run-level isolation: a failed run is one bad row
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_seconds"] = time.perf_counter() - t0
    return row


class GroundTruthFlat:
    """Flat parameter vector of a ground truth, aligned with ModelParams.flat()."""

    def __init__(self, gt: GroundTruth):
        parts = [gt.mu, gt.alpha.ravel()]
        for row in gt.kernels:
            for k in row:
                parts.append(k.params)
        self.flat = np.concatenate(parts)


def _run_parallel(tasks, fn, workers: int):
    if workers <= 1:
        return [fn(*args) for args in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in tasks]
        return [f.result() for f in futures]


def exp_discretization(spec: ExperimentSpec, out=None) -> list:
    """Simulate -> fit over a stepsize sweep; error should shrink with the step."""
    cells = [(t, s) for t in spec.horizons for s in spec.bounds]
    tasks = []
    for ci, (t_end, s_bound) in enumerate(cells):
        for di, delta in enumerate(spec.deltas):
            for run in range(spec.runs):
                tasks.append((spec, t_end, s_bound, delta, ci * len(spec.deltas) + di, run))
    rows = _run_parallel(tasks, _fit_row, spec.n_workers())
    if out:
        write_csv(out, rows, spec.config_hash())
    return rows


def exp_statistical(spec: ExperimentSpec, out=None) -> list:
    """Fixed step 0.1, growing horizon; error should shrink with the horizon."""
    tasks = []
    cells = [(t, s) for t in spec.horizons for s in spec.bounds]
    for ci, (t_end, s_bound) in enumerate(cells):
        for run in range(spec.runs):
            tasks.append((spec, t_end, s_bound, 0.1, ci, run))
    rows = _run_parallel(tasks, _fit_row, spec.n_workers())
    if out:
        write_csv(out, rows, spec.config_hash())
    return rows


def _psi_row(spec: ExperimentSpec, t_end: float, s_bound: float, cell_index: int, run: int) -> dict:
    gt = ground_truth(spec.spatial, spec.temporal)
    seed = _run_seed(spec, cell_index, run)
    row = {
        "experiment": "psi",
        "T": t_end,
        "S": s_bound,
        "run": run,
        "seed": seed,
        "n_events": 0,
        "rel_l1": np.nan,
        "rel_fro": np.nan,
        "abs_l1": np.nan,
        "abs_fro": np.nan,
        "time_exact": np.nan,
        "time_tilde": np.nan,
        "error": "",
    }
    try:
        domain = Domain(s_bound, s_bound, t_end)
        cat = simulate(gt, domain, seed)
        grid = make_grid(domain, SUPPORTS, (0.1, 0.1, 0.1))
        binned = bin_events(cat, grid)
        t0 = time.perf_counter()
        exact = psi_exact(binned)
        t_exact = time.perf_counter() - t0
        t0 = time.perf_counter()
        tilde = psi_tilde(binned, method="pairs")
        t_tilde = time.perf_counter() - t0
        norms = psi_approximation_error(exact[(0, 0)], tilde[0, 0], grid)
        row.update(
            n_events=int(cat.total_events),
            time_exact=t_exact,
            time_tilde=t_tilde,
            **norms,
        )
    except Exception as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def exp_psi(spec: ExperimentSpec, out=None) -> list:
    """Exact vs lag-box pairwise statistics on the same binnings.

    Always sequential: the rows report wall-clock times and thread contention
    would corrupt them.
    """
    rows = []
    for ci, (t_end, s_bound) in enumerate(spec.psi_cells):
        for run in range(spec.runs):
            rows.append(_psi_row(spec, float(t_end), float(s_bound), ci, run))
    if out:
        write_csv(out, rows, spec.config_hash())
    return rows


EXPERIMENTS = {
    "discretization": exp_discretization,
    "statistical": exp_statistical,
    "psi": exp_psi,
}


def run_experiment(spec: ExperimentSpec, out=None) -> list:
    fn = EXPERIMENTS.get(spec.experiment)
    if fn is None:
        raise ValidationError(
            f"unknown experiment {spec.experiment!r}; choose from {sorted(EXPERIMENTS)}"
        )
    return fn(spec, out=out)


def write_csv(path, rows: list, config_hash: str) -> None:
    """Self-describing CSV: a config-hash comment line, then header and rows.

    Appending to an existing file requires a matching hash so sweeps can be
    extended without mixing configurations.
    """
    if not rows:
        return
    tag = f"# config_hash={config_hash}"
    exists = os.path.exists(path)
    if exists:
        with open(path) as fh:
            first = fh.readline().strip()
        if first != tag:
            raise ValidationError(
                f"{path} exists with a different configuration ({first!r}); "
                "refusing to append"
            )
    with open(path, "a" if exists else "w", newline="") as fh:
        if not exists:
            fh.write(tag + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        if not exists:
            writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list:
    """Read rows written by write_csv back into dicts of floats/strings."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# config_hash="):
            fh.seek(0)
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for key, val in raw.items():
                try:
                    row[key] = float(val)
                except (TypeError, ValueError):
                    row[key] = val
            rows.append(row)
    return rows
