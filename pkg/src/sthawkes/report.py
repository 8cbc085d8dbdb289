"""Render experiment CSVs into summary figures (median + quartile bands)."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ValidationError
from .experiments import read_csv


def _quantiles(rows, x_key, series_keys, y_key="l2_error"):
    """Group rows by series and x value; return {series: (x, q25, q50, q75)}."""
    series = {}
    for row in rows:
        if row.get("error"):
            continue
        skey = tuple(row[k] for k in series_keys)
        series.setdefault(skey, {}).setdefault(row[x_key], []).append(row[y_key])
    out = {}
    for skey, by_x in sorted(series.items()):
        xs = np.array(sorted(by_x))
        qs = np.array([np.percentile(by_x[x], [25, 50, 75]) for x in xs])
        out[skey] = (xs, qs[:, 0], qs[:, 1], qs[:, 2])
    return out


def _band_panel(ax, grouped, label_fmt, xlabel, ylabel, logx=True, logy=True):
    for skey, (xs, q25, q50, q75) in grouped.items():
        line, = ax.plot(xs, q50, marker="o", label=label_fmt(skey))
        ax.fill_between(xs, q25, q75, alpha=0.2, color=line.get_color())
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)


def render_discretization(rows, out_png):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    err = _quantiles(rows, "delta", ("T", "S"))
    tim = _quantiles(rows, "delta", ("T", "S"), y_key="wall_seconds")
    fmt = lambda k: f"T={k[0]:g}, S={k[1]:g}"
    _band_panel(axes[0], err, fmt, "stepsize", "parameter error (l2)")
    _band_panel(axes[1], tim, fmt, "stepsize", "wall time (s)")
    axes[0].invert_xaxis()
    axes[1].invert_xaxis()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_statistical(rows, out_png):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    err = _quantiles(rows, "T", ("S",))
    tim = _quantiles(rows, "T", ("S",), y_key="wall_seconds")
    fmt = lambda k: f"S={k[0]:g}"
    _band_panel(axes[0], err, fmt, "horizon T", "parameter error (l2)")
    _band_panel(axes[1], tim, fmt, "horizon T", "wall time (s)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_psi(rows, out_png):
    cells = sorted({(row["T"], row["S"]) for row in rows if not row.get("error")})
    labels = [f"({t:g},{s:g})" for t, s in cells]

    def med(key, cell):
        vals = [r[key] for r in rows if (r["T"], r["S"]) == cell and not r.get("error")]
        return float(np.median(vals)) if vals else np.nan

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    x = np.arange(len(cells))
    width = 0.35
    axes[0].bar(x - width / 2, [med("rel_l1", c) for c in cells], width, label="rel 1-norm")
    axes[0].bar(x + width / 2, [med("rel_fro", c) for c in cells], width, label="rel Frobenius")
    axes[0].set_xticks(x, labels)
    axes[0].set_xlabel("(T, S)")
    axes[0].set_ylabel("relative approximation error")
    axes[0].legend(fontsize=8)
    axes[1].bar(x - width / 2, [med("time_exact", c) for c in cells], width, label="exact")
    axes[1].bar(x + width / 2, [med("time_tilde", c) for c in cells], width, label="lag box")
    axes[1].set_yscale("log")
    axes[1].set_xticks(x, labels)
    axes[1].set_xlabel("(T, S)")
    axes[1].set_ylabel("wall time (s)")
    axes[1].legend(fontsize=8)
    for ax in axes:
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


_RENDERERS = {
    "discretization": render_discretization,
    "statistical": render_statistical,
    "psi": render_psi,
}


def render(experiment: str, rows_or_csv, out_png) -> str:
    """Render the figure for one experiment's rows (or its CSV path)."""
    renderer = _RENDERERS.get(experiment)
    if renderer is None:
        raise ValidationError(f"no renderer for experiment {experiment!r}")
    rows = rows_or_csv
    if isinstance(rows_or_csv, (str, bytes)) or hasattr(rows_or_csv, "__fspath__"):
        rows = read_csv(rows_or_csv)
    renderer(rows, out_png)
    return str(out_png)
