"""Discretized least-squares loss, analytic gradients and the fitting loop.

The loss of a parameter set (mu, alpha, kernel parameters) expands into four
terms that touch the data only through the precomputed statistics: a baseline
volume term, a baseline/kernel cross term, a quadratic kernel term through
the pairwise statistics (exact or lag-box approximation), and the event data
term.  One optimizer iteration therefore costs the same whether the catalog
holds a thousand or a million events.

Gradients are exact derivatives of that expansion, including the kernel
truncation constants, and are verified against central finite differences in
the test suite.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

from . import kernels as _k
from .errors import NumericsError, ValidationError
from .grid import BinnedCatalog, GridSpec, intensity_on_grid
from .precompute import Precomputed, precompute

_BIG = np.inf


@dataclass
class ModelParams:
    """Full parameter set: baselines, excitation matrix, kernel matrix."""

    mu: np.ndarray
    alpha: np.ndarray
    kernels: list

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, float))
        self.alpha = np.atleast_2d(np.asarray(self.alpha, float))
        d = len(self.mu)
        if self.alpha.shape != (d, d):
            raise ValidationError(
                f"alpha must be {d}x{d} to match mu, got {self.alpha.shape}"
            )
        if len(self.kernels) != d or any(len(row) != d for row in self.kernels):
            raise ValidationError("kernel matrix must be D x D")

    @property
    def n_processes(self) -> int:
        return len(self.mu)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.mu.copy(),
            self.alpha.copy(),
            [list(row) for row in self.kernels],
        )

    def flat(self) -> np.ndarray:
        d = self.n_processes
        parts = [self.mu, self.alpha.ravel()]
        for i in range(d):
            for j in range(d):
                parts.append(self.kernels[i][j].params)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        d = self.n_processes
        mu = vec[:d].copy()
        alpha = vec[d : d + d * d].reshape(d, d).copy()
        pos = d + d * d
        kmat = []
        for i in range(d):
            row = []
            for j in range(d):
                k = self.kernels[i][j]
                row.append(k.with_params(vec[pos : pos + k.n_params]))
                pos += k.n_params
            kmat.append(row)
        return ModelParams(mu, alpha, kmat)


def kernel_grids(params: ModelParams, grid: GridSpec):
    d = params.n_processes
    return [[_k.eval_on_grid(params.kernels[i][j], grid) for j in range(d)] for i in range(d)]


def _corr_valid_flip(box: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Field over kernel lags tau: sum_{tau'} g[tau'] * box[tau' - tau]."""
    return correlate(box, g, mode="valid", method="auto")[::-1, ::-1, ::-1]


class _Evaluation:
    """Everything the loss and its gradients need at one parameter point."""

    def __init__(self, params: ModelParams, pre: Precomputed, kgrids=None, exact=False):
        self.params = params
        self.pre = pre
        self.grid = pre.grid
        self.exact = exact
        d = params.n_processes
        if len(pre.n) != d:
            raise ValidationError(
                f"parameter set has {d} processes, statistics have {len(pre.n)}"
            )
        self.kg = kernel_grids(params, self.grid) if kgrids is None else kgrids
        self.phi_g_dot = np.array(
            [[(self.kg[i][j] * pre.phi_grid[j]).sum() for j in range(d)] for i in range(d)]
        )
        self.phi_e_dot = np.array(
            [[(self.kg[i][j] * pre.phi_events[i][j]).sum() for j in range(d)] for i in range(d)]
        )
        # B[m][l][tau] = sum_k alpha_mk sum_{tau'} g_mk[tau'] Psi_{l,k}(tau, tau')
        self._b = None

    def _b_fields(self):
        if self._b is not None:
            return self._b
        d = self.params.n_processes
        alpha = self.params.alpha
        if self.exact:
            mats = self.pre.require_exact()
            gflat = [[self.kg[m][k].ravel() for k in range(d)] for m in range(d)]
            b = [
                [
                    sum(
                        alpha[m, k] * (mats[(l, k)] @ gflat[m][k]).reshape(self.grid.kernel_shape)
                        for k in range(d)
                    )
                    for l in range(d)
                ]
                for m in range(d)
            ]
        else:
            pt = self.pre.psi_tilde
            b = [
                [
                    sum(
                        alpha[m, k] * _corr_valid_flip(pt[l, k], self.kg[m][k])
                        for k in range(d)
                    )
                    for l in range(d)
                ]
                for m in range(d)
            ]
        self._b = b
        return b

    def loss(self) -> float:
        p, pre = self.params, self.pre
        cellv = self.grid.cell_volume
        total = self.grid.soft_volume * float(np.sum(p.mu**2))
        total += 2.0 * cellv * float(np.sum(p.mu[:, None] * p.alpha * self.phi_g_dot))
        b = self._b_fields()
        d = p.n_processes
        quad = 0.0
        for m in range(d):
            for l in range(d):
                quad += p.alpha[m, l] * float((self.kg[m][l] * b[m][l]).sum())
        total += cellv * quad
        total -= 2.0 * float(np.dot(pre.n, p.mu) + np.sum(p.alpha * self.phi_e_dot))
        return total

    def grad_mu(self) -> np.ndarray:
        p = self.params
        cross = 2.0 * self.grid.cell_volume * np.sum(p.alpha * self.phi_g_dot, axis=1)
        return 2.0 * self.grid.soft_volume * p.mu - 2.0 * self.pre.n + cross

    def grad_alpha(self) -> np.ndarray:
        p = self.params
        d = p.n_processes
        cellv = self.grid.cell_volume
        b = self._b_fields()
        quad = np.array(
            [[(self.kg[m][l] * b[m][l]).sum() for l in range(d)] for m in range(d)]
        )
        return (
            2.0 * cellv * p.mu[:, None] * self.phi_g_dot
            - 2.0 * self.phi_e_dot
            + 2.0 * cellv * quad
        )

    def grad_eta(self) -> list:
        p = self.params
        d = p.n_processes
        cellv = self.grid.cell_volume
        b = self._b_fields()
        out = []
        for m in range(d):
            row = []
            for l in range(d):
                dk = _k.eval_grad_on_grid(p.kernels[m][l], self.grid)
                axes = (1, 2, 3)
                t1 = 2.0 * cellv * p.mu[m] * p.alpha[m, l] * (
                    dk * self.pre.phi_grid[l]
                ).sum(axis=axes)
                t2 = -2.0 * p.alpha[m, l] * (dk * self.pre.phi_events[m][l]).sum(axis=axes)
                t3 = 2.0 * cellv * p.alpha[m, l] * (dk * b[m][l]).sum(axis=axes)
                row.append(t1 + t2 + t3)
            out.append(row)
        return out

    def _self_quad(self, field: np.ndarray, l: int) -> float:
        """Quadratic form of one lag field against the (l, l) pair statistics."""
        if self.exact:
            flat = field.ravel()
            return float(flat @ self.pre.require_exact()[(l, l)] @ flat)
        return float((field * _corr_valid_flip(self.pre.psi_tilde[l, l], field)).sum())


def loss(params: ModelParams, pre: Precomputed, kgrids=None, exact: bool = False) -> float:
    """Expanded discretized least-squares loss from precomputed statistics."""
    return _Evaluation(params, pre, kgrids, exact).loss()


def grad_mu(params, pre, kgrids=None, exact: bool = False) -> np.ndarray:
    return _Evaluation(params, pre, kgrids, exact).grad_mu()


def grad_alpha(params, pre, kgrids=None, exact: bool = False) -> np.ndarray:
    return _Evaluation(params, pre, kgrids, exact).grad_alpha()


def grad_eta(params, pre, kgrids=None, exact: bool = False) -> list:
    return _Evaluation(params, pre, kgrids, exact).grad_eta()


def loss_direct(params: ModelParams, binned: BinnedCatalog, method: str = "auto") -> float:
    """Reference loss straight from the dense intensity field (small grids)."""
    lam = intensity_on_grid(binned, params, method=method)
    grid = binned.grid
    total = 0.0
    for i in range(params.n_processes):
        total += grid.cell_volume * float(np.sum(lam[i] ** 2))
        nodes = binned.event_nodes[i]
        if len(nodes):
            total -= 2.0 * float(lam[i][nodes[:, 0], nodes[:, 1], nodes[:, 2]].sum())
    return total


# ---------------------------------------------------------------------------
# held-out evaluation


def event_intensities(params: ModelParams, binned: BinnedCatalog, kgrids=None) -> list:
    """Discrete intensity of process i at each of its own event nodes.

    Pair-based, so it works on grids far too large for a dense field.
    """
    from .precompute import _ordered_pair_chunks  # local import to avoid cycle

    grid = binned.grid
    d = params.n_processes
    if kgrids is None:
        kgrids = kernel_grids(params, grid)
    out = []
    max_lag = (grid.klen_x - 1, grid.klen_y - 1, grid.klen_t)
    for i in range(d):
        ev = binned.event_nodes[i]
        lam = np.full(len(ev), float(params.mu[i]))
        for j in range(d):
            a = float(params.alpha[i][j])
            if a == 0.0 or len(ev) == 0:
                continue
            nodes_j = binned.nodes[j]
            cj = binned.counts[j].astype(float)
            kg = kgrids[i][j]
            for ia, ib in _ordered_pair_chunks(ev, nodes_j, max_lag, same=False):
                kap = ev[ia] - nodes_j[ib]
                kx, ky, kt = kap[:, 0], kap[:, 1], kap[:, 2]
                ok = (
                    (kx >= 1 - grid.kmid_x) & (kx <= grid.klen_x - grid.kmid_x)
                    & (ky >= 1 - grid.kmid_y) & (ky <= grid.klen_y - grid.kmid_y)
                    & (kt >= 1) & (kt <= grid.klen_t)
                )
                if not np.any(ok):
                    continue
                vals = a * kg[
                    kx[ok] + grid.kmid_x - 1, ky[ok] + grid.kmid_y - 1, kt[ok] - 1
                ] * cj[ib[ok]]
                np.add.at(lam, ia[ok], vals)
        out.append(lam)
    return out


def nll(params: ModelParams, binned: BinnedCatalog, kgrids=None) -> float:
    """Per-event negative log-likelihood of the discretized model.

    The integral term uses the on-grid statistics; the event term evaluates
    the intensity at each event's node.  Raises if any event sits at zero
    intensity (the model then has likelihood zero).
    """
    from .precompute import phi_grid as _phi_grid

    grid = binned.grid
    d = params.n_processes
    if kgrids is None:
        kgrids = kernel_grids(params, grid)
    phig = _phi_grid(binned)
    lam_events = event_intensities(params, binned, kgrids)
    total = 0.0
    n_total = int(binned.n_events.sum())
    if n_total == 0:
        raise ValidationError("empty catalog: per-event NLL is undefined")
    for i in range(d):
        integral = grid.n_nodes * float(params.mu[i])
        for j in range(d):
            integral += float(params.alpha[i][j]) * float(
                (kgrids[i][j] * phig[j]).sum()
            )
        integral *= grid.cell_volume
        lam = lam_events[i]
        if np.any(lam <= 0.0):
            n_bad = int(np.argmax(lam <= 0.0))
            raise NumericsError(
                f"zero intensity at event {n_bad} of process {i} "
                f"(node {binned.event_nodes[i][n_bad].tolist()})"
            )
        total += integral - float(np.log(lam).sum())
    return total / n_total


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    """Optimizer knobs.

    With `precondition` on (the default) the gradient is divided by fixed
    per-parameter curvature scales measured once at the starting point:
    exact second derivatives for the baseline and excitation blocks (the
    loss is quadratic in them) and Gauss-Newton estimates for kernel
    parameters.  `step` is then a fraction of that diagonal-Newton step.
    With `precondition=False` the raw gradient is used and `step` should be
    sized to the loss scale (1e-2 only suits small volumes).
    """

    step: float = 0.5
    max_iter: int = 2000
    tol: float = 1e-6
    exact_psi: bool = False
    precondition: bool = True
    backtrack: bool = True
    max_backtracks: int = 60
    step_growth: float = 1.5
    eps_mu: float = 1e-6
    eps_alpha: float = 1e-6
    optimize_mu: bool = True
    optimize_alpha: bool = True
    optimize_kernels: bool = True
    restarts: int = 0
    seed: int = 0


@dataclass
class FitResult:
    params: ModelParams
    loss_trajectory: np.ndarray
    n_iter: int
    converged: bool
    final_grad_norm: float
    timings: dict = field(default_factory=dict)
    message: str = ""


def default_init(binned: BinnedCatalog, spatial: str, temporal: str) -> ModelParams:
    """Documented starting point: event-rate baselines, mid-box excitation,
    family default kernel parameters."""
    grid = binned.grid
    d = binned.n_processes
    mu0 = binned.n_events.astype(float) / grid.soft_volume
    mu0 = np.maximum(mu0, 1e-6)
    alpha0 = np.full((d, d), 0.5)
    kmat = [
        [_k.make_kernel(spatial, temporal, (grid.wx, grid.wy, grid.wt)) for _ in range(d)]
        for _ in range(d)
    ]
    return ModelParams(mu0, alpha0, kmat)


def _bounds_vectors(template: ModelParams, opts: FitOptions):
    d = template.n_processes
    lo = [np.full(d, opts.eps_mu), np.full(d * d, opts.eps_alpha)]
    hi = [np.full(d, _BIG), np.full(d * d, 1.0 - opts.eps_alpha)]
    for i in range(d):
        for j in range(d):
            b = template.kernels[i][j].bounds()
            lo.append(np.array([x[0] for x in b]))
            hi.append(np.array([x[1] for x in b]))
    return np.concatenate(lo), np.concatenate(hi)


def _free_mask(template: ModelParams, opts: FitOptions) -> np.ndarray:
    d = template.n_processes
    parts = [
        np.full(d, opts.optimize_mu),
        np.full(d * d, opts.optimize_alpha),
    ]
    for i in range(d):
        for j in range(d):
            parts.append(np.full(template.kernels[i][j].n_params, opts.optimize_kernels))
    return np.concatenate(parts)


def _curvature_scales(template: ModelParams, pre: Precomputed, opts: FitOptions) -> np.ndarray:
    """Per-parameter curvature of the loss at the starting point.

    Exact for mu and alpha; for kernel parameters only the positive
    quadratic-form part is kept (Gauss-Newton), which is enough to put all
    blocks on one step scale.
    """
    ev = _Evaluation(template, pre, exact=opts.exact_psi)
    d = template.n_processes
    cellv = pre.grid.cell_volume
    parts = [np.full(d, 2.0 * pre.grid.soft_volume)]
    c_alpha = np.empty((d, d))
    for m in range(d):
        for l in range(d):
            c_alpha[m, l] = 2.0 * cellv * ev._self_quad(ev.kg[m][l], l)
    parts.append(c_alpha.ravel())
    for m in range(d):
        for l in range(d):
            dk = _k.eval_grad_on_grid(template.kernels[m][l], pre.grid)
            a2 = float(template.alpha[m, l]) ** 2
            parts.append(
                np.array([2.0 * cellv * a2 * ev._self_quad(dk[p], l) for p in range(len(dk))])
            )
    c = np.concatenate(parts)
    return np.maximum(c, 1e-6 * c.max())


def _random_init_vec(template, lo, hi, rng):
    vec = template.flat().copy()
    for p in range(len(vec)):
        l, h = lo[p], hi[p]
        if not np.isfinite(h):
            vec[p] = vec[p] * rng.uniform(0.5, 2.0)
        else:
            vec[p] = rng.uniform(l + 0.1 * (h - l), h - 0.1 * (h - l))
    return vec


def fit(
    binned: BinnedCatalog,
    spatial: str = "tg",
    temporal: str = "kum",
    init: ModelParams | None = None,
    opts: FitOptions | None = None,
    pre: Precomputed | None = None,
    cache_dir=None,
) -> FitResult:
    """Projected gradient descent on the discretized least-squares loss.

    A fixed step is halved whenever a candidate step would increase the loss
    and re-grown after accepted steps, so the recorded trajectory is
    non-increasing.  Stops on the iteration budget, a small gradient norm, or
    a stalled step.  Runs are deterministic given (init, opts).
    """
    opts = opts or FitOptions()
    t0 = time.perf_counter()
    if pre is None:
        pre = precompute(binned, exact=opts.exact_psi, cache_dir=cache_dir)
    elif opts.exact_psi:
        pre.require_exact()
    t_pre = time.perf_counter() - t0
    template = init.copy() if init is not None else default_init(binned, spatial, temporal)
    lo, hi = _bounds_vectors(template, opts)
    free = _free_mask(template, opts)
    scales = (
        _curvature_scales(template, pre, opts)
        if opts.precondition
        else np.ones(template.flat().size)
    )

    def run(vec0: np.ndarray) -> FitResult:
        vec = np.clip(vec0, lo, hi)
        params = template.with_flat(vec)
        ev = _Evaluation(params, pre, exact=opts.exact_psi)
        cur = ev.loss()
        if not np.isfinite(cur):
            raise NumericsError(f"initial loss is not finite: {cur}")
        traj = [cur]
        step = opts.step
        converged = False
        message = "max iterations reached"
        gnorm = np.nan
        n_increase = 0
        it = 0
        for it in range(1, opts.max_iter + 1):
            gmu = ev.grad_mu()
            gal = ev.grad_alpha().ravel()
            geta = ev.grad_eta()
            gvec = np.concatenate([gmu, gal] + [g for row in geta for g in row])
            if not np.all(np.isfinite(gvec)):
                raise NumericsError(f"non-finite gradient at iteration {it}")
            gvec = np.where(free, gvec, 0.0)
            gnorm = float(np.linalg.norm(gvec))
            if gnorm < opts.tol:
                converged = True
                message = "gradient norm below tolerance"
                break
            direction = gvec / scales
            accepted = False
            for _ in range(opts.max_backtracks if opts.backtrack else 1):
                cand = np.clip(vec - step * direction, lo, hi)
                cand_params = template.with_flat(cand)
                cand_ev = _Evaluation(cand_params, pre, exact=opts.exact_psi)
                cand_loss = cand_ev.loss()
                if not np.isfinite(cand_loss):
                    step *= 0.5
                    continue
                if (not opts.backtrack) or cand_loss <= cur:
                    accepted = True
                    break
                step *= 0.5
                if step < 1e-18:
                    break
            if not accepted:
                message = "step stalled (backtracking exhausted)"
                break
            if cand_loss > cur:
                n_increase += 1
                if n_increase >= 20:
                    raise NumericsError(
                        "loss increased for 20 consecutive accepted steps; diverging"
                    )
            else:
                n_increase = 0
            vec, cur, ev = cand, cand_loss, cand_ev
            traj.append(cur)
            step = min(step * opts.step_growth, opts.step)
        return FitResult(
            params=template.with_flat(vec),
            loss_trajectory=np.array(traj),
            n_iter=it,
            converged=converged,
            final_grad_norm=gnorm,
            message=message,
        )

    t1 = time.perf_counter()
    best = run(template.flat())
    if opts.restarts > 0:
        rng = np.random.default_rng(opts.seed)
        for _ in range(opts.restarts):
            cand = run(_random_init_vec(template, lo, hi, rng))
            if cand.loss_trajectory[-1] < best.loss_trajectory[-1]:
                best = cand
    best.timings = {
        "precompute_seconds": t_pre,
        "optimize_seconds": time.perf_counter() - t1,
    }
    return best


# ---------------------------------------------------------------------------
# model JSON


def params_to_dict(params: ModelParams) -> dict:
    d = params.n_processes
    kmat = []
    for i in range(d):
        row = []
        for j in range(d):
            k = params.kernels[i][j]
            row.append(
                {
                    "spatial": k.spatial.name,
                    "temporal": k.temporal.name,
                    "supports": list(k.supports),
                    "params": {n: float(v) for n, v in zip(k.param_names, k.params)},
                }
            )
        kmat.append(row)
    return {"mu": params.mu.tolist(), "alpha": params.alpha.tolist(), "kernels": kmat}


def params_from_dict(data: dict) -> ModelParams:
    kmat = []
    for row in data["kernels"]:
        krow = []
        for cell in row:
            krow.append(
                _k.make_kernel(
                    cell["spatial"], cell["temporal"], tuple(cell["supports"]), cell["params"]
                )
            )
        kmat.append(krow)
    return ModelParams(np.array(data["mu"]), np.array(data["alpha"]), kmat)


def grid_to_dict(grid: GridSpec) -> dict:
    return {
        "delta": [grid.dx, grid.dy, grid.dt],
        "window": [grid.sx, grid.sy, grid.t_end],
        "supports": [grid.wx, grid.wy, grid.wt],
        "cells": [grid.cells_x, grid.cells_y, grid.cells_t],
        "kernel_extents": [grid.klen_x, grid.klen_y, grid.klen_t],
    }


def save_model_json(path, result: FitResult, grid: GridSpec, seed=None, config_hash=None):
    payload = {
        "model": params_to_dict(result.params),
        "grid": grid_to_dict(grid),
        "loss_trajectory": result.loss_trajectory.tolist(),
        "n_iter": result.n_iter,
        "converged": result.converged,
        "final_grad_norm": result.final_grad_norm,
        "timings": result.timings,
        "seed": seed,
        "config_hash": config_hash,
        "message": result.message,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload
