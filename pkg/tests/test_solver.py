"""Loss expansion, analytic gradients, the optimizer and held-out NLL."""

import time

import numpy as np
import pytest

from conftest import random_catalog, random_instance
from oracles import fd_gradient

from sthawkes import (
    Catalog,
    Domain,
    FitOptions,
    ModelParams,
    bin_events,
    default_init,
    fit,
    grad_alpha,
    grad_eta,
    grad_mu,
    loss,
    loss_direct,
    make_grid,
    make_kernel,
    nll,
    precompute,
)
from sthawkes.errors import NumericsError, ValidationError
from sthawkes.solver import params_from_dict, params_to_dict


def _flat_loss(params, pre, exact=False):
    def f(vec):
        return loss(params.with_flat(vec), pre, exact=exact)

    return f


def _analytic_grad(params, pre, exact=False):
    gmu = grad_mu(params, pre, exact=exact)
    gal = grad_alpha(params, pre, exact=exact).ravel()
    geta = grad_eta(params, pre, exact=exact)
    return np.concatenate([gmu, gal] + [g for row in geta for g in row])


def test_loss_alpha_zero_closed_form(rng):
    domain = Domain(10.0, 10.0, 10.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.1, 0.1, 0.1))
    cat = random_catalog(rng, domain, 500)
    binned = bin_events(cat, grid)
    pre = precompute(binned)
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0))
    params = ModelParams([0.5], [[0.0]], [[k]])
    expect = 10.1 * 20.1 * 20.1 * 0.25 - 2 * 500 * 0.5
    assert expect == pytest.approx(520.125)
    assert loss(params, pre) == pytest.approx(expect, rel=1e-12)


def test_loss_empty_catalog_is_volume_term():
    domain = Domain(5.0, 5.0, 5.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.empty((0, 3)),), domain)
    pre = precompute(bin_events(cat, grid))
    k = make_kernel("tg", "exp", (1.0, 1.0, 1.0))
    params = ModelParams([0.8], [[0.0]], [[k]])
    vol = grid.soft_volume
    assert loss(params, pre) == pytest.approx(vol * 0.64, rel=1e-12)


@pytest.mark.parametrize("d", [1, 2])
def test_loss_expansion_matches_direct_loss(rng, d):
    for _ in range(5):
        _, _, binned, params = random_instance(rng, d=d)
        pre = precompute(binned, exact=True)
        expanded = loss(params, pre, exact=True)
        direct = loss_direct(params, binned, method="direct")
        assert expanded == pytest.approx(direct, rel=1e-8)


def test_loss_requires_exact_stats_when_asked(rng):
    _, _, binned, params = random_instance(rng)
    pre = precompute(binned, exact=False)
    with pytest.raises(ValidationError, match="exact"):
        loss(params, pre, exact=True)


@pytest.mark.parametrize("exact", [False, True])
def test_gradients_match_finite_differences(rng, exact):
    for spatial, temporal in [("tg", "kum"), ("pow", "exp"), ("tg", "tg")]:
        _, _, binned, params = random_instance(rng, spatial=spatial, temporal=temporal)
        pre = precompute(binned, exact=exact)
        vec = params.flat()
        fd = fd_gradient(_flat_loss(params, pre, exact), vec)
        an = _analytic_grad(params, pre, exact)
        denom = max(np.linalg.norm(fd), np.linalg.norm(an))
        assert np.linalg.norm(fd - an) / denom < 1e-5


def test_grad_mu_alpha_zero_reduction(rng):
    _, grid, binned, params = random_instance(rng)
    params.alpha[:] = 0.0
    pre = precompute(binned)
    expect = 2 * grid.soft_volume * params.mu - 2 * pre.n
    np.testing.assert_allclose(grad_mu(params, pre), expect, rtol=1e-12)


def test_grads_vanish_without_data(rng):
    domain = Domain(5.0, 5.0, 5.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    pre = precompute(bin_events(Catalog((np.empty((0, 3)),), domain), grid))
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0))
    params = ModelParams([0.5], [[0.4]], [[k]])
    np.testing.assert_array_equal(grad_alpha(params, pre), 0.0)
    np.testing.assert_array_equal(grad_eta(params, pre)[0][0], 0.0)
    # positive baseline gradient pushes mu towards zero on empty data
    assert grad_mu(params, pre)[0] > 0


def test_grad_of_center_vanishes_on_mirrored_catalog(rng):
    # catalog symmetric under (x, y) -> (-x, -y) plus a centered kernel:
    # the spatial-center gradient cancels exactly
    domain = Domain(2.0, 2.0, 4.0)
    half = np.column_stack(
        [rng.uniform(-1.9, 1.9, 12), rng.uniform(-1.9, 1.9, 12), rng.uniform(0, 4, 12)]
    )
    mirrored = half.copy()
    mirrored[:, 0] *= -1
    mirrored[:, 1] *= -1
    cat = Catalog((np.vstack([half, mirrored]),), domain)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    pre = precompute(bin_events(cat, grid))
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0), {"sigma": 0.3, "a": 2.0, "b": 1.8})
    params = ModelParams([0.5], [[0.5]], [[k]])
    g = grad_eta(params, pre)[0][0]
    scale = max(np.abs(g).max(), 1.0)
    assert abs(g[0]) < 1e-9 * scale  # center x
    assert abs(g[1]) < 1e-9 * scale  # center y


def test_grad_eta_zero_when_alpha_zero(rng):
    _, _, binned, params = random_instance(rng)
    params.alpha[:] = 0.0
    pre = precompute(binned)
    np.testing.assert_array_equal(grad_eta(params, pre)[0][0], 0.0)


def test_fit_poisson_reaches_stationary_baseline(rng):
    domain = Domain(6.0, 6.0, 8.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = random_catalog(rng, domain, 400)
    binned = bin_events(cat, grid)
    opts = FitOptions(optimize_alpha=False, optimize_kernels=False, max_iter=400)
    init = default_init(binned, "tg", "kum")
    init.alpha[:] = opts.eps_alpha
    res = fit(binned, init=init, opts=opts)
    assert res.params.mu[0] == pytest.approx(400.0 / grid.soft_volume, rel=1e-3)


def test_fit_is_deterministic(rng):
    _, _, binned, _ = random_instance(rng)
    opts = FitOptions(max_iter=40)
    r1 = fit(binned, "tg", "kum", opts=opts)
    r2 = fit(binned, "tg", "kum", opts=opts)
    assert np.array_equal(r1.loss_trajectory, r2.loss_trajectory)
    assert np.array_equal(r1.params.flat(), r2.params.flat())


def test_fit_trajectory_never_increases(rng):
    _, _, binned, _ = random_instance(rng)
    res = fit(binned, "tg", "kum", opts=FitOptions(max_iter=150))
    traj = res.loss_trajectory
    assert np.all(np.diff(traj) <= 1e-12)


def test_fit_respects_boxes(rng):
    _, _, binned, _ = random_instance(rng)
    opts = FitOptions(max_iter=60)
    res = fit(binned, "tg", "kum", opts=opts)
    assert res.params.mu.min() >= opts.eps_mu
    assert opts.eps_alpha <= res.params.alpha[0, 0] <= 1 - opts.eps_alpha
    k = res.params.kernels[0][0]
    for value, (lo, hi) in zip(k.params, k.bounds()):
        assert lo - 1e-12 <= value <= hi + 1e-12


def test_nll_poisson_closed_form(rng):
    domain = Domain(5.0, 5.0, 8.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = random_catalog(rng, domain, 300)
    binned = bin_events(cat, grid)
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0))
    mu = 300.0 / grid.soft_volume
    params = ModelParams([mu], [[0.0]], [[k]])
    expect = (grid.soft_volume * mu - 300 * np.log(mu)) / 300
    assert nll(params, binned) == pytest.approx(expect, rel=1e-12)


def test_nll_integral_term_scales_with_baseline():
    domain = Domain(5.0, 5.0, 8.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.array([[0.0, 0.0, 4.0]]),), domain)
    binned = bin_events(cat, grid)
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0))
    base = ModelParams([0.4], [[0.0]], [[k]])
    double = ModelParams([0.8], [[0.0]], [[k]])
    lam_term = lambda p: nll(p, binned) + np.log(p.mu[0])
    assert lam_term(double) == pytest.approx(2 * lam_term(base), rel=1e-12)


def test_nll_reports_zero_intensity_event():
    domain = Domain(5.0, 5.0, 8.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.array([[0.0, 0.0, 4.0]]),), domain)
    binned = bin_events(cat, grid)
    k = make_kernel("tg", "kum", (1.0, 1.0, 1.0))
    params = ModelParams([1.0], [[0.0]], [[k]])
    params.mu[0] = 0.0  # degenerate model: no baseline, no excitation
    with pytest.raises(NumericsError, match="event 0 of process 0"):
        nll(params, binned)


def test_nll_matches_dense_intensity_route(rng):
    from sthawkes import intensity_on_grid

    _, grid, binned, params = random_instance(rng)
    got = nll(params, binned)
    lam = intensity_on_grid(binned, params)
    total = 0.0
    for i in range(params.n_processes):
        nodes = binned.event_nodes[i]
        total += grid.cell_volume * lam[i].sum() - np.log(
            lam[i][nodes[:, 0], nodes[:, 1], nodes[:, 2]]
        ).sum()
    assert got == pytest.approx(total / binned.n_events.sum(), rel=1e-10)


def test_fitted_model_beats_perturbed_on_held_out(rng):
    from sthawkes import GroundTruth, simulate, split_temporal

    gt_kernel = make_kernel("tg", "kum", (1.0, 1.0, 1.0), {"sigma": 0.1, "a": 2.0, "b": 2.0})
    gt = GroundTruth([0.5], [[0.6]], [[gt_kernel]])
    domain = Domain(5.0, 5.0, 20.0)
    cat = simulate(gt, domain, seed=7)
    train, test = split_temporal(cat, 0.5)
    grid = make_grid(train.domain, (1.0, 1.0, 1.0), (0.1, 0.1, 0.1))
    res = fit(bin_events(train, grid), "tg", "kum", opts=FitOptions(max_iter=300))
    test_grid = make_grid(test.domain, (1.0, 1.0, 1.0), (0.1, 0.1, 0.1))
    test_binned = bin_events(test, test_grid)
    fitted_nll = nll(res.params, test_binned)
    worse = res.params.copy()
    worse.mu *= 1.5
    worse.alpha = np.clip(worse.alpha * 1.5, 0.0, 0.95)
    fitted = res.params.kernels[0][0]
    worse.kernels[0][0] = fitted.with_params(fitted.params * 1.5)
    assert fitted_nll < nll(worse, test_binned)


def test_params_dict_round_trip(rng):
    _, _, _, params = random_instance(rng, spatial="pow", temporal="tg")
    back = params_from_dict(params_to_dict(params))
    np.testing.assert_allclose(back.flat(), params.flat(), rtol=1e-15)


@pytest.mark.slow
def test_iteration_cost_independent_of_event_count(rng):
    domain = Domain(5.0, 5.0, 10.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.25, 0.25, 0.25))

    def per_iter_seconds(n_events):
        cat = random_catalog(rng, domain, n_events)
        binned = bin_events(cat, grid)
        pre = precompute(binned)
        opts = FitOptions(max_iter=30)
        fit(binned, "tg", "kum", opts=opts, pre=pre)  # warm-up
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            res = fit(binned, "tg", "kum", opts=opts, pre=pre)
            best = min(best, (time.perf_counter() - t0) / res.n_iter)
        return best

    small = per_iter_seconds(1_000)
    large = per_iter_seconds(10_000)
    assert abs(large - small) / max(small, large) < 0.2
