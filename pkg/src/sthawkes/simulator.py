"""Synthetic catalogs from a known parameter set via the branching construction.

Immigrants arrive as a homogeneous Poisson field on the observation window;
every kept event of process j then spawns Poisson(alpha[i][j]) children into
process i at offsets drawn from the (i, j) triggering kernel.  Children
falling outside the window are dropped and never reproduce, which models an
observation window and produces the same edge losses the estimator sees.
Runs are reproducible: the generator is seeded and events are processed in a
fixed generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import Catalog, Domain
from .errors import NumericsError, StabilityError, ValidationError


@dataclass(frozen=True)
class GroundTruth:
    """Baselines, excitation matrix and kernel matrix used for simulation."""

    mu: np.ndarray
    alpha: np.ndarray
    kernels: list

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, float)))
        object.__setattr__(self, "alpha", np.atleast_2d(np.asarray(self.alpha, float)))
        d = len(self.mu)
        if self.alpha.shape != (d, d):
            raise ValidationError(f"alpha must be {d}x{d}, got {self.alpha.shape}")
        if np.any(self.mu <= 0):
            raise ValidationError("baselines must be strictly positive")
        if np.any(self.alpha < 0) or np.any(self.alpha >= 1):
            raise ValidationError("excitation entries must lie in [0, 1)")
        if len(self.kernels) != d or any(len(r) != d for r in self.kernels):
            raise ValidationError("kernel matrix must be D x D")

    @property
    def n_processes(self) -> int:
        return len(self.mu)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha))))


@dataclass
class Genealogy:
    """Birth records kept for diagnostics; never fed to the inference path."""

    n_parents: np.ndarray            # kept events per process (all reproduce)
    offsets: dict                    # (child, parent) -> (n_births, 3) offsets
    kept: dict                       # (child, parent) -> bool mask per birth

    def branching_ratio(self) -> np.ndarray:
        """Mean births per parent, measured before window clipping."""
        d = len(self.n_parents)
        out = np.zeros((d, d))
        for (i, j), off in self.offsets.items():
            if self.n_parents[j] > 0:
                out[i, j] = len(off) / self.n_parents[j]
        return out


def simulate(
    gt: GroundTruth,
    domain: Domain,
    seed: int,
    return_genealogy: bool = False,
    max_events: int = 10**8,
):
    """Draw one catalog; deterministic given the seed."""
    rho = gt.spectral_radius()
    if rho >= 1.0:
        raise StabilityError(
            f"excitation spectral radius {rho:.4f} >= 1; cascades would not die out"
        )
    d = gt.n_processes
    rng = np.random.default_rng(seed)
    area_vol = domain.volume
    collected = [[] for _ in range(d)]
    current = []
    for i in range(d):
        n_imm = rng.poisson(gt.mu[i] * area_vol)
        pts = np.column_stack(
            [
                rng.uniform(-domain.sx, domain.sx, n_imm),
                rng.uniform(-domain.sy, domain.sy, n_imm),
                rng.uniform(0.0, domain.t_end, n_imm),
            ]
        )
        collected[i].append(pts)
        current.append(pts)
    gen_offsets = {(i, j): [] for i in range(d) for j in range(d)}
    gen_kept = {(i, j): [] for i in range(d) for j in range(d)}
    n_parents = np.array([len(c) for c in current], dtype=np.int64)
    total = int(n_parents.sum())
    while any(len(c) for c in current):
        nxt = [[] for _ in range(d)]
        for j in range(d):
            parents = current[j]
            if len(parents) == 0:
                continue
            for i in range(d):
                n_children = rng.poisson(gt.alpha[i, j], size=len(parents))
                n_tot = int(n_children.sum())
                if n_tot == 0:
                    continue
                offs = gt.kernels[i][j].sample_offset(rng, size=n_tot)
                births = np.repeat(parents, n_children, axis=0) + offs
                keep = (
                    (np.abs(births[:, 0]) <= domain.sx)
                    & (np.abs(births[:, 1]) <= domain.sy)
                    & (births[:, 2] >= 0.0)
                    & (births[:, 2] <= domain.t_end)
                )
                if return_genealogy:
                    gen_offsets[(i, j)].append(offs)
                    gen_kept[(i, j)].append(keep)
                nxt[i].append(births[keep])
        current = [
            np.concatenate(lst, axis=0) if lst else np.empty((0, 3)) for lst in nxt
        ]
        for i in range(d):
            if len(current[i]):
                collected[i].append(current[i])
        n_parents += np.array([len(c) for c in current], dtype=np.int64)
        total += sum(len(c) for c in current)
        if total > max_events:
            raise NumericsError(f"simulation exceeded {max_events} events; aborting")
    arrays = [
        np.concatenate(parts, axis=0) if parts else np.empty((0, 3))
        for parts in collected
    ]
    cat = Catalog(tuple(arrays), domain)
    if not return_genealogy:
        return cat
    genealogy = Genealogy(
        n_parents=n_parents,
        offsets={
            key: (np.concatenate(v, axis=0) if v else np.empty((0, 3)))
            for key, v in gen_offsets.items()
        },
        kept={
            key: (np.concatenate(v) if v else np.empty((0,), dtype=bool))
            for key, v in gen_kept.items()
        },
    )
    return cat, genealogy
