"""Space-time self-exciting point processes: simulation, discretization and
least-squares inference with precomputed statistics."""

__version__ = "0.1.0"

from .catalog import Catalog, Domain, Event, load_csv, save_csv, split_temporal
from .grid import BinnedCatalog, GridSpec, bin_events, intensity_on_grid, make_grid
from .kernels import (
    KernelModel,
    SPATIAL_FAMILIES,
    TEMPORAL_FAMILIES,
    eval_grad_on_grid,
    eval_on_grid,
    make_kernel,
)
from .precompute import (
    Precomputed,
    phi_events,
    phi_grid,
    precompute,
    psi_approximation_error,
    psi_exact,
    psi_tilde,
)
from .simulator import Genealogy, GroundTruth, simulate
from .solver import (
    FitOptions,
    FitResult,
    ModelParams,
    default_init,
    fit,
    grad_alpha,
    grad_eta,
    grad_mu,
    kernel_grids,
    loss,
    loss_direct,
    nll,
)

__all__ = [
    "BinnedCatalog",
    "Catalog",
    "Domain",
    "Event",
    "FitOptions",
    "FitResult",
    "Genealogy",
    "GridSpec",
    "GroundTruth",
    "KernelModel",
    "ModelParams",
    "Precomputed",
    "SPATIAL_FAMILIES",
    "TEMPORAL_FAMILIES",
    "bin_events",
    "default_init",
    "eval_grad_on_grid",
    "eval_on_grid",
    "fit",
    "grad_alpha",
    "grad_eta",
    "grad_mu",
    "intensity_on_grid",
    "kernel_grids",
    "load_csv",
    "loss",
    "loss_direct",
    "make_grid",
    "make_kernel",
    "nll",
    "phi_events",
    "phi_grid",
    "precompute",
    "psi_approximation_error",
    "psi_exact",
    "psi_tilde",
    "save_csv",
    "simulate",
    "split_temporal",
]
