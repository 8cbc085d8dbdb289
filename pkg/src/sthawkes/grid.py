"""Space-time discretization: grid geometry, event binning, intensity fields.

The observation window [-sx, sx] x [-sy, sy] x [0, t_end] is covered by a
regular grid with stepsizes (dx, dy, dt); node (vx, vy, vt) sits at
(-sx + vx*dx, -sy + vy*dy, vt*dt).  Events are projected to their nearest
node.  Kernels are sampled on a separate lag grid whose spatial axes are
centered and whose temporal axis starts at one step, so the discrete
intensity never feeds an event back into its own node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import kernels as _kernels
from .catalog import Catalog, Domain
from .errors import BudgetError, ValidationError

#: largest number of grid cells for which dense count/intensity arrays are built
DEFAULT_DENSE_BUDGET = 10**8

_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: stepsizes, window, kernel supports and derived extents."""

    dx: float
    dy: float
    dt: float
    sx: float
    sy: float
    t_end: float
    wx: float
    wy: float
    wt: float
    cells_x: int
    cells_y: int
    cells_t: int
    klen_x: int
    klen_y: int
    klen_t: int
    kmid_x: int
    kmid_y: int

    @property
    def steps(self):
        return (self.dx, self.dy, self.dt)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dt

    @property
    def node_shape(self):
        return (self.cells_x + 1, self.cells_y + 1, self.cells_t + 1)

    @property
    def n_nodes(self) -> int:
        nx, ny, nt = self.node_shape
        return nx * ny * nt

    @property
    def kernel_shape(self):
        return (self.klen_x, self.klen_y, self.klen_t)

    @property
    def n_kernel(self) -> int:
        return self.klen_x * self.klen_y * self.klen_t

    @property
    def lag_shape(self):
        return (2 * self.klen_x - 1, 2 * self.klen_y - 1, 2 * self.klen_t - 1)

    @property
    def soft_volume(self) -> float:
        """Cell volume times the node count; equals
        (t_end + dt)(2 sx + dx)(2 sy + dy) when the steps divide the window."""
        return self.cell_volume * self.n_nodes

    def node_coords(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.column_stack(
            [
                -self.sx + idx[:, 0] * self.dx,
                -self.sy + idx[:, 1] * self.dy,
                idx[:, 2] * self.dt,
            ]
        )


def _axis_cells(length: float, step: float, label: str) -> tuple[int, bool]:
    cells = int(np.floor(length / step + _EPS))
    exact = abs(cells * step - length) <= _EPS * max(1.0, length)
    if cells < 1:
        raise ValidationError(f"step {step} exceeds {label} extent {length}")
    return cells, exact


def make_grid(domain: Domain, supports, delta) -> GridSpec:
    """Build a grid for the window with the given kernel supports and steps.

    Steps that do not divide the window exactly keep the window as given; the
    last cell absorbs the remainder (with a warning) and binning clamps into
    it.  Kernel supports larger than the window are rejected.
    """
    dx, dy, dt = (float(v) for v in delta)
    wx, wy, wt = (float(v) for v in supports)
    if min(dx, dy, dt) <= 0:
        raise ValidationError(f"stepsizes must be positive, got {delta}")
    if wx > domain.sx or wy > domain.sy or wt > domain.t_end:
        raise ValidationError(
            f"kernel supports {supports} exceed the window "
            f"({domain.sx}, {domain.sy}, {domain.t_end})"
        )
    if min(wx, wy, wt) <= 0:
        raise ValidationError(f"kernel supports must be positive, got {supports}")
    cx, ex = _axis_cells(2.0 * domain.sx, dx, "x")
    cy, ey = _axis_cells(2.0 * domain.sy, dy, "y")
    ct, et = _axis_cells(domain.t_end, dt, "t")
    if not (ex and ey and et):
        warnings.warn(
            "grid steps do not divide the window exactly; the last cell "
            "absorbs the remainder",
            stacklevel=2,
        )
    klen_x = int(np.floor(2.0 * wx / dx + _EPS)) + 1
    klen_y = int(np.floor(2.0 * wy / dy + _EPS)) + 1
    klen_t = int(np.floor(wt / dt + _EPS)) + 1
    return GridSpec(
        dx=dx, dy=dy, dt=dt,
        sx=domain.sx, sy=domain.sy, t_end=domain.t_end,
        wx=wx, wy=wy, wt=wt,
        cells_x=cx, cells_y=cy, cells_t=ct,
        klen_x=klen_x, klen_y=klen_y, klen_t=klen_t,
        kmid_x=klen_x // 2 + 1, kmid_y=klen_y // 2 + 1,
    )


@dataclass(frozen=True)
class BinnedCatalog:
    """Events projected to their nearest grid node.

    `event_nodes[j]` keeps the (N_j, 3) integer node index of every event in
    event order; `nodes[j]`/`counts[j]` aggregate them into unique cells.  The
    dense count field is only materialized on demand and under a cell budget.
    """

    grid: GridSpec
    event_nodes: tuple
    nodes: tuple
    counts: tuple
    n_collided: int

    @property
    def n_processes(self) -> int:
        return len(self.event_nodes)

    @property
    def n_events(self) -> np.ndarray:
        return np.array([len(e) for e in self.event_nodes], dtype=np.int64)

    def dense_counts(self, j: int, budget: int = DEFAULT_DENSE_BUDGET) -> np.ndarray:
        if self.grid.n_nodes > budget:
            raise BudgetError(
                f"dense count field needs {self.grid.n_nodes} cells, budget is {budget}"
            )
        z = np.zeros(self.grid.node_shape)
        np.add.at(z, tuple(self.nodes[j].T), self.counts[j].astype(float))
        return z


def bin_events(cat: Catalog, grid: GridSpec) -> BinnedCatalog:
    """Project each event to its nearest node (ties round away from zero)."""
    event_nodes, nodes, counts = [], [], []
    collided = 0
    for ev in cat.processes:
        ix = np.floor((ev[:, 0] + grid.sx) / grid.dx + 0.5).astype(np.int64)
        iy = np.floor((ev[:, 1] + grid.sy) / grid.dy + 0.5).astype(np.int64)
        it = np.floor(ev[:, 2] / grid.dt + 0.5).astype(np.int64)
        idx = np.column_stack(
            [
                np.clip(ix, 0, grid.cells_x),
                np.clip(iy, 0, grid.cells_y),
                np.clip(it, 0, grid.cells_t),
            ]
        )
        idx.flags.writeable = False
        event_nodes.append(idx)
        if len(idx):
            uniq, cnt = np.unique(idx, axis=0, return_counts=True)
        else:
            uniq = np.empty((0, 3), dtype=np.int64)
            cnt = np.empty((0,), dtype=np.int64)
        nodes.append(uniq)
        counts.append(cnt)
        collided += int(cnt[cnt > 1].sum())
    total = sum(len(e) for e in event_nodes)
    if collided and total:
        warnings.warn(
            f"{collided}/{total} events share a grid cell with another event; "
            "the grid may be too coarse for this catalog",
            stacklevel=2,
        )
    return BinnedCatalog(
        grid=grid,
        event_nodes=tuple(event_nodes),
        nodes=tuple(nodes),
        counts=tuple(counts),
        n_collided=collided,
    )


def _excitation_direct(z: np.ndarray, kgrid: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Reference lag-by-lag shifted accumulation of (kernel * counts)."""
    out = np.zeros_like(z)
    gx, gy, gt = grid.cells_x, grid.cells_y, grid.cells_t
    for a in range(grid.klen_x):
        sx = a + 1 - grid.kmid_x
        for b in range(grid.klen_y):
            sy = b + 1 - grid.kmid_y
            for c in range(grid.klen_t):
                w = kgrid[a, b, c]
                if w == 0.0:
                    continue
                st = c + 1
                x0, x1 = max(0, sx), min(gx, gx + sx)
                y0, y1 = max(0, sy), min(gy, gy + sy)
                t0, t1 = max(0, st), min(gt, gt + st)
                if x0 > x1 or y0 > y1 or t0 > t1:
                    continue
                out[x0 : x1 + 1, y0 : y1 + 1, t0 : t1 + 1] += (
                    w
                    * z[
                        x0 - sx : x1 - sx + 1,
                        y0 - sy : y1 - sy + 1,
                        t0 - st : t1 - st + 1,
                    ]
                )
    return out


def _excitation_fft(z: np.ndarray, kgrid: np.ndarray, grid: GridSpec) -> np.ndarray:
    conv = fftconvolve(z, kgrid)
    out = np.zeros_like(z)
    x0 = grid.kmid_x - 1
    y0 = grid.kmid_y - 1
    out[:, :, 1:] = conv[
        x0 : x0 + grid.cells_x + 1,
        y0 : y0 + grid.cells_y + 1,
        0 : grid.cells_t,
    ]
    return out


def intensity_on_grid(
    binned: BinnedCatalog,
    params,
    kgrids=None,
    method: str = "auto",
    budget: int = DEFAULT_DENSE_BUDGET,
) -> np.ndarray:
    """Dense discrete intensity fields, shape (D, nx, ny, nt).

    `method` is one of 'fft', 'direct' (reference summation) or 'auto'.
    Intensity is causal: the slice at the first time index equals the
    baseline, and counts at a node only influence strictly later nodes.
    """
    grid = binned.grid
    d = binned.n_processes
    if d * grid.n_nodes > budget:
        raise BudgetError(
            f"dense intensity needs {d * grid.n_nodes} cells, budget is {budget}"
        )
    if kgrids is None:
        kgrids = [
            [_kernels.eval_on_grid(params.kernels[i][j], grid) for j in range(d)]
            for i in range(d)
        ]
    if method == "auto":
        method = "fft" if grid.n_kernel > 64 else "direct"
    excite = {"fft": _excitation_fft, "direct": _excitation_direct}.get(method)
    if excite is None:
        raise ValidationError(f"unknown intensity method {method!r}")
    zs = [binned.dense_counts(j, budget=budget) for j in range(d)]
    lam = np.empty((d,) + grid.node_shape)
    for i in range(d):
        acc = np.full(grid.node_shape, float(params.mu[i]))
        for j in range(d):
            a = float(params.alpha[i][j])
            if a != 0.0:
                acc += a * excite(zs[j], np.asarray(kgrids[i][j]), grid)
        lam[i] = acc
    return lam
