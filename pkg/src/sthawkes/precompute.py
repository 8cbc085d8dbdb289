"""Sufficient statistics consumed by the discretized least-squares loss.

All four statistics are pure functions of the binned catalog:

* ``phi_grid``    -- per process j and kernel lag, how many events keep their
  shifted node on the grid (the full count minus a border strip).
* ``phi_events``  -- per ordered process pair (i, j) and kernel lag, how many
  j-events sit exactly one lag behind an i-event.
* ``psi_exact``   -- per process pair and *two* kernel lags, co-occurrence
  counts of the doubly shifted count fields (quadratic in the kernel size;
  guarded by a budget and used for validation and small studies).
* ``psi_tilde``   -- plain cross-correlation of the count fields over a
  centered lag box; the cheap stand-in for ``psi_exact`` evaluated at lag
  differences.  It matches ``psi_exact`` exactly whenever no event sits close
  enough to the window border for a shift to push it off the grid.

Counts are integer-valued but stored as float64 since they feed straight into
floating-point loss sums.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .errors import BudgetError, ValidationError
from .grid import BinnedCatalog, GridSpec

#: refuse exact pairwise statistics above this many matrix entries (per D^2)
DEFAULT_PSI_BUDGET = 8 * 10**7

_PAIR_CHUNK = 4_000_000


@dataclass(frozen=True)
class Precomputed:
    """Bundle of statistics for one (catalog, grid) pair."""

    grid: GridSpec
    n: np.ndarray                 # (D,) event counts
    phi_grid: np.ndarray          # (D, Lx, Ly, Lt)
    phi_events: np.ndarray        # (D, D, Lx, Ly, Lt); [i, j] pairs i-events with j-counts
    psi_tilde: np.ndarray         # (D, D, 2Lx-1, 2Ly-1, 2Lt-1)
    psi_exact: dict | None = None  # {(j, k): (Lbar, Lbar)} when requested

    @property
    def n_processes(self) -> int:
        return len(self.n)

    def require_exact(self):
        if self.psi_exact is None:
            raise ValidationError(
                "exact pairwise statistics were not computed; "
                "rebuild the precomputation with exact=True"
            )
        return self.psi_exact


# ---------------------------------------------------------------------------
# pair enumeration


def _pair_tree(nodes: np.ndarray, max_lag) -> cKDTree:
    scale = np.asarray(max_lag, dtype=float) + 0.5
    return cKDTree(nodes / scale)


def _ordered_pair_chunks(nodes_a, nodes_b, max_lag, same: bool, chunk: int = _PAIR_CHUNK):
    """Yield (ia, ib) chunks of ordered index pairs with per-axis node offset
    bounded by max_lag.  For same=True both orientations and the self pairs
    are produced."""
    if len(nodes_a) == 0 or len(nodes_b) == 0:
        return
    if same:
        tree = _pair_tree(nodes_a, max_lag)
        pairs = tree.query_pairs(1.0, p=np.inf, output_type="ndarray")
        for lo in range(0, len(pairs), chunk):
            part = pairs[lo : lo + chunk]
            yield part[:, 0], part[:, 1]
            yield part[:, 1], part[:, 0]
        idx = np.arange(len(nodes_a))
        for lo in range(0, len(idx), chunk):
            part = idx[lo : lo + chunk]
            yield part, part
    else:
        scale = np.asarray(max_lag, dtype=float) + 0.5
        tree_a = cKDTree(nodes_a / scale)
        tree_b = cKDTree(nodes_b / scale)
        lists = tree_a.query_ball_tree(tree_b, 1.0, p=np.inf)
        lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
        ia = np.repeat(np.arange(len(lists)), lens)
        ib = np.fromiter(
            (j for l in lists for j in l), dtype=np.int64, count=int(lens.sum())
        )
        for lo in range(0, len(ia), chunk):
            yield ia[lo : lo + chunk], ib[lo : lo + chunk]


# ---------------------------------------------------------------------------
# phi_grid


def _box_counts(cum, lox, hix, loy, hiy, lot, hit):
    def f(a, b, c):
        return cum[np.ix_(a, b, c)]

    return (
        f(hix, hiy, hit)
        - f(lox, hiy, hit)
        - f(hix, loy, hit)
        - f(hix, hiy, lot)
        + f(lox, loy, hit)
        + f(lox, hiy, lot)
        + f(hix, loy, lot)
        - f(lox, loy, lot)
    )


def _axis_windows(klen, kmid, cells, temporal: bool):
    """Inclusive node index window [lo, hi] kept on-grid for every kernel lag."""
    taus = np.arange(1, klen + 1)
    if temporal:
        lo = np.zeros(klen, dtype=np.int64)
        hi = cells - taus
    else:
        kappa = taus - kmid
        lo = np.maximum(0, -kappa)
        hi = np.minimum(cells, cells - kappa)
    hi = np.maximum(hi, lo - 1)  # empty windows count zero
    return lo, hi


def phi_grid(binned: BinnedCatalog) -> np.ndarray:
    """On-grid shifted-event counts, shape (D, Lx, Ly, Lt).

    Entry [j, tau] counts the events of process j whose node, shifted by the
    lag tau, still lands inside the grid; interior events count for every
    lag.  Computed from cumulative counts over the O(L) distinct border
    cuts, so the cost is independent of the number of grid cells.
    """
    g = binned.grid
    lox, hix = _axis_windows(g.klen_x, g.kmid_x, g.cells_x, temporal=False)
    loy, hiy = _axis_windows(g.klen_y, g.kmid_y, g.cells_y, temporal=False)
    lot, hit = _axis_windows(g.klen_t, 0, g.cells_t, temporal=True)

    def cuts_for(lo, hi, cells):
        return np.unique(np.concatenate([[-1, cells], lo - 1, hi]))

    cuts_x = cuts_for(lox, hix, g.cells_x)
    cuts_y = cuts_for(loy, hiy, g.cells_y)
    cuts_t = cuts_for(lot, hit, g.cells_t)
    out = np.empty((binned.n_processes, g.klen_x, g.klen_y, g.klen_t))
    lox_p, hix_p = np.searchsorted(cuts_x, lox - 1), np.searchsorted(cuts_x, hix)
    loy_p, hiy_p = np.searchsorted(cuts_y, loy - 1), np.searchsorted(cuts_y, hiy)
    lot_p, hit_p = np.searchsorted(cuts_t, lot - 1), np.searchsorted(cuts_t, hit)
    for j in range(binned.n_processes):
        hist = np.zeros((len(cuts_x), len(cuts_y), len(cuts_t)))
        nodes, weights = binned.nodes[j], binned.counts[j].astype(float)
        if len(nodes):
            px = np.searchsorted(cuts_x, nodes[:, 0])
            py = np.searchsorted(cuts_y, nodes[:, 1])
            pt = np.searchsorted(cuts_t, nodes[:, 2])
            np.add.at(hist, (px, py, pt), weights)
        cum = hist.cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
        out[j] = _box_counts(cum, lox_p, hix_p, loy_p, hiy_p, lot_p, hit_p)
    return out


# ---------------------------------------------------------------------------
# phi_events


def _accumulate_kappa(binned, src, dst, flip: bool, acc: np.ndarray):
    """Add pair counts at valid kernel lags kappa = node_src - node_dst."""
    g = binned.grid
    same = src == dst
    nodes_a, nodes_b = binned.nodes[src], binned.nodes[dst]
    ca, cb = binned.counts[src].astype(float), binned.counts[dst].astype(float)
    max_lag = (g.klen_x - 1, g.klen_y - 1, g.klen_t)
    for ia, ib in _ordered_pair_chunks(nodes_a, nodes_b, max_lag, same):
        d = nodes_a[ia] - nodes_b[ib]
        if flip:
            d = -d
        kx, ky, kt = d[:, 0], d[:, 1], d[:, 2]
        ok = (
            (kx >= 1 - g.kmid_x) & (kx <= g.klen_x - g.kmid_x)
            & (ky >= 1 - g.kmid_y) & (ky <= g.klen_y - g.kmid_y)
            & (kt >= 1) & (kt <= g.klen_t)
        )
        if not np.any(ok):
            continue
        flat = (
            (kx[ok] + g.kmid_x - 1) * g.klen_y + (ky[ok] + g.kmid_y - 1)
        ) * g.klen_t + (kt[ok] - 1)
        acc += np.bincount(flat, weights=ca[ia[ok]] * cb[ib[ok]], minlength=acc.size)


def phi_events(binned: BinnedCatalog) -> np.ndarray:
    """Event-anchored lag counts, shape (D, D, Lx, Ly, Lt).

    Entry [i, j, tau] counts (i-event, j-event) pairs whose nodes differ by
    exactly the lag tau, i.e. how much of process j's count field each
    i-event sees at that lag.  Only strictly positive temporal lags occur.
    """
    g = binned.grid
    d = binned.n_processes
    out = np.zeros((d, d, g.n_kernel))
    for i in range(d):
        for j in range(i, d):
            if i == j:
                _accumulate_kappa(binned, i, i, flip=False, acc=out[i, i])
            else:
                # one pair pass serves both orientations
                _accumulate_kappa(binned, i, j, flip=False, acc=out[i, j])
                _accumulate_kappa(binned, i, j, flip=True, acc=out[j, i])
    return out.reshape(d, d, g.klen_x, g.klen_y, g.klen_t)


# ---------------------------------------------------------------------------
# psi_tilde


def _psi_tilde_pairs(binned, j, k, lag_shape):
    g = binned.grid
    acc = np.zeros(int(np.prod(lag_shape)))
    nodes_a, nodes_b = binned.nodes[j], binned.nodes[k]
    ca, cb = binned.counts[j].astype(float), binned.counts[k].astype(float)
    max_lag = (g.klen_x - 1, g.klen_y - 1, g.klen_t - 1)
    for ia, ib in _ordered_pair_chunks(nodes_a, nodes_b, max_lag, same=(j == k)):
        d = nodes_a[ia] - nodes_b[ib]
        flat = (
            (d[:, 0] + g.klen_x - 1) * lag_shape[1] + (d[:, 1] + g.klen_y - 1)
        ) * lag_shape[2] + (d[:, 2] + g.klen_t - 1)
        acc += np.bincount(flat, weights=ca[ia] * cb[ib], minlength=acc.size)
    return acc.reshape(lag_shape)


def _psi_tilde_fft(binned, j, k, lag_shape):
    g = binned.grid
    za = binned.dense_counts(j)
    zb = za if k == j else binned.dense_counts(k)
    full = fftconvolve(za, zb[::-1, ::-1, ::-1])
    c = [n - 1 for n in g.node_shape]
    box = full[
        c[0] - (g.klen_x - 1) : c[0] + g.klen_x,
        c[1] - (g.klen_y - 1) : c[1] + g.klen_y,
        c[2] - (g.klen_t - 1) : c[2] + g.klen_t,
    ]
    return np.rint(box)


def psi_tilde(binned: BinnedCatalog, method: str = "auto") -> np.ndarray:
    """Cross-correlation of count fields over the centered lag box.

    Shape (D, D, 2Lx-1, 2Ly-1, 2Lt-1); entry [j, k, lag] counts (j, k) event
    pairs whose nodes differ by exactly `lag`.  The zero-padded FFT route and
    the sparse pair route produce identical integers; `auto` picks by size.
    """
    g = binned.grid
    d = binned.n_processes
    lag_shape = g.lag_shape
    if method == "auto":
        n_total = int(binned.n_events.sum())
        dense_ok = g.n_nodes <= 4 * 10**6
        est_pairs = n_total**2 * np.prod(lag_shape) / max(g.n_nodes, 1)
        method = "fft" if dense_ok and est_pairs > 3 * 10**7 else "pairs"
    if method not in ("pairs", "fft"):
        raise ValidationError(f"unknown psi_tilde method {method!r}")
    build = _psi_tilde_pairs if method == "pairs" else _psi_tilde_fft
    out = np.zeros((d, d) + lag_shape)
    for j in range(d):
        for k in range(j, d):
            out[j, k] = build(binned, j, k, lag_shape)
            if k != j:
                out[k, j] = out[j, k][::-1, ::-1, ::-1]
    return out


# ---------------------------------------------------------------------------
# psi_exact


def _diag_tau_ranges(g: GridSpec, dx: int, dy: int, dt: int):
    """1-based tau windows for which both tau and tau+d are valid lags."""
    x0, x1 = max(1, 1 - dx), min(g.klen_x, g.klen_x - dx)
    y0, y1 = max(1, 1 - dy), min(g.klen_y, g.klen_y - dy)
    t0, t1 = max(1, 1 - dt), min(g.klen_t, g.klen_t - dt)
    return (x0, x1), (y0, y1), (t0, t1)


def _flat_rows(g: GridSpec, xr, yr, tr):
    ax = np.arange(xr[0] - 1, xr[1])
    ay = np.arange(yr[0] - 1, yr[1])
    at = np.arange(tr[0] - 1, tr[1])
    if len(ax) == 0 or len(ay) == 0 or len(at) == 0:
        return None
    return (ax[:, None, None] * g.klen_y + ay[None, :, None]) * g.klen_t + at[None, None, :]


def psi_exact(binned: BinnedCatalog, max_entries: int = DEFAULT_PSI_BUDGET) -> dict:
    """Exact double-lag co-occurrence statistics.

    Returns {(j, k): matrix} over all ordered process pairs, each matrix of
    shape (Lbar, Lbar) indexed by C-order flattened kernel lags (tau, tau').
    Cost and memory grow with the squared kernel size, so oversized requests
    are refused with an estimate instead of thrashing.
    """
    g = binned.grid
    d = binned.n_processes
    lbar = g.n_kernel
    entries = d * d * lbar * lbar
    if entries > max_entries:
        raise BudgetError(
            f"exact pairwise statistics need {entries:.3g} matrix entries "
            f"(~{entries * 8 / 2**30:.1f} GiB); budget is {max_entries:.3g}. "
            "Use the lag-box approximation or coarsen the grid."
        )
    dflat_scale = (g.klen_y * g.klen_t, g.klen_t, 1)
    out = {}
    for j in range(d):
        for k in range(j, d):
            mat = np.zeros((lbar, lbar))
            flat_mat = mat.ravel()
            nodes_a, nodes_b = binned.nodes[j], binned.nodes[k]
            ca = binned.counts[j].astype(float)
            cb = binned.counts[k].astype(float)
            max_lag = (g.klen_x - 1, g.klen_y - 1, g.klen_t - 1)
            for ia, ib in _ordered_pair_chunks(nodes_a, nodes_b, max_lag, same=(j == k)):
                dvec = nodes_a[ia] - nodes_b[ib]
                w = ca[ia] * cb[ib]
                pa = nodes_a[ia]
                for m in range(len(ia)):
                    dx, dy, dt = int(dvec[m, 0]), int(dvec[m, 1]), int(dvec[m, 2])
                    xr, yr, tr = _diag_tau_ranges(g, dx, dy, dt)
                    # border constraint: the j-node shifted by kappa stays on-grid
                    px, py, pt = pa[m]
                    xr = (max(xr[0], g.kmid_x - px), min(xr[1], g.cells_x + g.kmid_x - px))
                    yr = (max(yr[0], g.kmid_y - py), min(yr[1], g.cells_y + g.kmid_y - py))
                    tr = (tr[0], min(tr[1], g.cells_t - pt))
                    rows = _flat_rows(g, xr, yr, tr)
                    if rows is None:
                        continue
                    dflat = dx * dflat_scale[0] + dy * dflat_scale[1] + dt
                    idx = rows * (lbar + 1) + dflat
                    flat_mat[idx.ravel()] += w[m]
            out[(j, k)] = mat
            if k != j:
                out[(k, j)] = mat.T
    return out


def psi_approximation_error(mat: np.ndarray, tilde_jk: np.ndarray, grid: GridSpec) -> dict:
    """Norm gap between exact statistics and their lag-box embedding.

    The lag-box value at lag (tau' - tau) over-counts the exact entry exactly
    by the pairs a border shift pushes off the grid; both absolute and
    Psi*-relative entrywise 1-norms and Frobenius norms are reported.
    """
    lbar = grid.n_kernel
    abs1 = 0.0
    fro2 = 0.0
    flat = mat.ravel()
    for dx in range(-(grid.klen_x - 1), grid.klen_x):
        for dy in range(-(grid.klen_y - 1), grid.klen_y):
            for dt in range(-(grid.klen_t - 1), grid.klen_t):
                xr, yr, tr = _diag_tau_ranges(grid, dx, dy, dt)
                rows = _flat_rows(grid, xr, yr, tr)
                if rows is None:
                    continue
                dflat = (dx * grid.klen_y + dy) * grid.klen_t + dt
                vals = flat[(rows * (lbar + 1) + dflat).ravel()]
                emb = tilde_jk[
                    dx + grid.klen_x - 1, dy + grid.klen_y - 1, dt + grid.klen_t - 1
                ]
                diff = np.abs(vals - emb)
                abs1 += diff.sum()
                fro2 += (diff**2).sum()
    norm1 = np.abs(mat).sum()
    fro = np.sqrt((mat**2).sum())
    return {
        "abs_l1": abs1,
        "abs_fro": float(np.sqrt(fro2)),
        "rel_l1": abs1 / norm1 if norm1 > 0 else np.nan,
        "rel_fro": float(np.sqrt(fro2)) / fro if fro > 0 else np.nan,
    }


# ---------------------------------------------------------------------------
# orchestration and cache


def precompute(
    binned: BinnedCatalog,
    exact: bool = False,
    psi_method: str = "auto",
    max_entries: int = DEFAULT_PSI_BUDGET,
    cache_dir=None,
) -> Precomputed:
    """Compute (or load from cache) every statistic the solver needs."""
    if cache_dir is not None:
        key = cache_key(binned)
        path = os.path.join(cache_dir, f"pre_{key[:24]}.bin")
        if os.path.exists(path):
            pre = load_precomputed(path, expected_key=key)
            if pre is not None and (not exact or pre.psi_exact is not None):
                return pre
    pre = Precomputed(
        grid=binned.grid,
        n=binned.n_events.astype(float),
        phi_grid=phi_grid(binned),
        phi_events=phi_events(binned),
        psi_tilde=psi_tilde(binned, method=psi_method),
        psi_exact=psi_exact(binned, max_entries=max_entries) if exact else None,
    )
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        save_precomputed(pre, path, key=key)
    return pre


_MAGIC = b"STHWPC01"


def cache_key(binned: BinnedCatalog) -> str:
    g = binned.grid
    h = hashlib.sha256()
    h.update(repr(
        (g.dx, g.dy, g.dt, g.sx, g.sy, g.t_end, g.wx, g.wy, g.wt,
         g.cells_x, g.cells_y, g.cells_t, g.klen_x, g.klen_y, g.klen_t)
    ).encode())
    for nodes in binned.event_nodes:
        h.update(np.ascontiguousarray(nodes, dtype="<i8").tobytes())
    return h.hexdigest()


def save_precomputed(pre: Precomputed, path, key: str = "") -> None:
    """Versioned header plus raw little-endian doubles."""
    g = pre.grid
    exact_keys = sorted((j, k) for (j, k) in (pre.psi_exact or {}) if j <= k)
    header = {
        "version": 1,
        "key": key,
        "d": pre.n_processes,
        "grid": [g.dx, g.dy, g.dt, g.sx, g.sy, g.t_end, g.wx, g.wy, g.wt,
                 g.cells_x, g.cells_y, g.cells_t, g.klen_x, g.klen_y, g.klen_t,
                 g.kmid_x, g.kmid_y],
        "shapes": {
            "n": list(pre.n.shape),
            "phi_grid": list(pre.phi_grid.shape),
            "phi_events": list(pre.phi_events.shape),
            "psi_tilde": list(pre.psi_tilde.shape),
        },
        "exact_keys": [list(k) for k in exact_keys],
        "lbar": g.n_kernel,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for arr in [pre.n, pre.phi_grid, pre.phi_events, pre.psi_tilde]:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for jk in exact_keys:
            fh.write(np.ascontiguousarray(pre.psi_exact[jk], dtype="<f8").tobytes())


def load_precomputed(path, expected_key: str | None = None) -> Precomputed | None:
    """Read a cache file; returns None on a key mismatch."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValidationError(f"{path}: not a precompute cache file")
        (hlen,) = np.frombuffer(fh.read(4), dtype=np.uint32)
        header = json.loads(fh.read(int(hlen)).decode())
        if expected_key is not None and header.get("key") != expected_key:
            return None
        gvals = header["grid"]
        grid = GridSpec(
            dx=gvals[0], dy=gvals[1], dt=gvals[2],
            sx=gvals[3], sy=gvals[4], t_end=gvals[5],
            wx=gvals[6], wy=gvals[7], wt=gvals[8],
            cells_x=int(gvals[9]), cells_y=int(gvals[10]), cells_t=int(gvals[11]),
            klen_x=int(gvals[12]), klen_y=int(gvals[13]), klen_t=int(gvals[14]),
            kmid_x=int(gvals[15]), kmid_y=int(gvals[16]),
        )

        def read(shape):
            size = int(np.prod(shape))
            return np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape).copy()

        n = read(header["shapes"]["n"])
        phi_g = read(header["shapes"]["phi_grid"])
        phi_e = read(header["shapes"]["phi_events"])
        psi_t = read(header["shapes"]["psi_tilde"])
        exact = None
        if header["exact_keys"]:
            lbar = int(header["lbar"])
            exact = {}
            for j, k in header["exact_keys"]:
                mat = read([lbar, lbar])
                exact[(j, k)] = mat
                if j != k:
                    exact[(k, j)] = mat.T
    return Precomputed(grid=grid, n=n, phi_grid=phi_g, phi_events=phi_e,
                       psi_tilde=psi_t, psi_exact=exact)
