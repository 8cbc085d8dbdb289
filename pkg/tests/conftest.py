"""Shared builders for randomized test instances."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sthawkes import (
    Catalog,
    Domain,
    ModelParams,
    bin_events,
    make_grid,
    make_kernel,
)

SPATIAL_NAMES = ("tg", "pow")
TEMPORAL_NAMES = ("tg", "exp", "kum")
ALL_COMBOS = [(s, t) for s in SPATIAL_NAMES for t in TEMPORAL_NAMES]


def random_kernel_params(rng, spatial, temporal, wx, wy, wt):
    params = {}
    if spatial == "tg":
        params.update(
            m1=rng.uniform(-0.3, 0.3) * wx,
            m2=rng.uniform(-0.3, 0.3) * wy,
            sigma=rng.uniform(0.15, 0.6) * wx,
        )
    else:
        params.update(
            m1=rng.uniform(-0.3, 0.3) * wx,
            m2=rng.uniform(-0.3, 0.3) * wy,
            d=rng.uniform(0.05, 0.5) * wx * wy,
        )
    if temporal == "tg":
        params.update(mt=rng.uniform(0.3, 0.7) * wt, sigma_t=rng.uniform(0.15, 0.5) * wt)
    elif temporal == "exp":
        params.update(decay=rng.uniform(0.5, 3.0) / wt)
    else:
        params.update(a=rng.uniform(1.3, 3.0), b=rng.uniform(1.5, 3.0))
    return params


def random_catalog(rng, domain: Domain, n_events, d=1) -> Catalog:
    if np.isscalar(n_events):
        n_events = [int(n_events)] * d
    procs = []
    for n in n_events:
        procs.append(
            np.column_stack(
                [
                    rng.uniform(-domain.sx, domain.sx, n),
                    rng.uniform(-domain.sy, domain.sy, n),
                    rng.uniform(0.0, domain.t_end, n),
                ]
            )
        )
    return Catalog(tuple(procs), domain)


def random_instance(rng, d=1, spatial="tg", temporal="kum", max_events=30):
    """Small random (catalog, grid, binned, params) tuple for oracle tests.

    Grid extents stay at or below ~12 cells per axis, kernel extents at or
    below 5x5x3, so brute-force references run in milliseconds.
    """
    step = 0.5
    sx = rng.uniform(1.5, 3.0)
    sy = rng.uniform(1.5, 3.0)
    t_end = rng.uniform(3.0, 6.0)
    wx = rng.choice([0.5, 1.0])
    wy = rng.choice([0.5, 1.0])
    wt = rng.choice([0.5, 1.0]) * min(1.0, t_end)
    domain = Domain(sx, sy, t_end)
    grid = make_grid(domain, (wx, wy, wt), (step, step, step))
    n = [int(rng.integers(3, max_events + 1)) for _ in range(d)]
    cat = random_catalog(rng, domain, n, d=d)
    binned = bin_events(cat, grid)
    mu = rng.uniform(0.3, 1.2, d)
    alpha = rng.uniform(0.2, 0.7, (d, d))
    if d > 1:
        alpha *= 0.9 / max(1.0, np.max(np.abs(np.linalg.eigvals(alpha))))
    kmat = [
        [
            make_kernel(
                spatial, temporal, (wx, wy, wt),
                random_kernel_params(rng, spatial, temporal, wx, wy, wt),
            )
            for _ in range(d)
        ]
        for _ in range(d)
    ]
    params = ModelParams(mu, alpha, kmat)
    return cat, grid, binned, params


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
