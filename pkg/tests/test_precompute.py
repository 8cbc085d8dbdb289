"""Statistics vs brute-force oracles, invariants, and the disk cache."""

import numpy as np
import pytest

from conftest import random_catalog, random_instance
from oracles import brute_phi_events, brute_phi_grid, brute_psi_exact, brute_psi_tilde

from sthawkes import (
    Catalog,
    Domain,
    bin_events,
    make_grid,
    phi_events,
    phi_grid,
    precompute,
    psi_approximation_error,
    psi_exact,
    psi_tilde,
)
from sthawkes.errors import BudgetError
from sthawkes.precompute import cache_key, load_precomputed, save_precomputed


def _stats_instance(rng, d=1):
    _, grid, binned, _ = random_instance(rng, d=d)
    zs = [binned.dense_counts(j) for j in range(d)]
    return grid, binned, zs


@pytest.mark.parametrize("d", [1, 2])
def test_phi_grid_matches_brute_force(rng, d):
    for _ in range(4):
        grid, binned, zs = _stats_instance(rng, d)
        got = phi_grid(binned)
        for j in range(d):
            np.testing.assert_array_equal(got[j], brute_phi_grid(zs[j], grid))


@pytest.mark.parametrize("d", [1, 2])
def test_phi_events_matches_brute_force(rng, d):
    for _ in range(4):
        grid, binned, zs = _stats_instance(rng, d)
        got = phi_events(binned)
        for i in range(d):
            for j in range(d):
                want = brute_phi_events(binned.event_nodes[i], zs[j], grid)
                np.testing.assert_array_equal(got[i, j], want)


@pytest.mark.parametrize("method", ["pairs", "fft"])
@pytest.mark.parametrize("d", [1, 2])
def test_psi_tilde_matches_brute_force(rng, d, method):
    for _ in range(3):
        grid, binned, zs = _stats_instance(rng, d)
        got = psi_tilde(binned, method=method)
        for j in range(d):
            for k in range(d):
                np.testing.assert_array_equal(got[j, k], brute_psi_tilde(zs[j], zs[k], grid))


@pytest.mark.parametrize("d", [1, 2])
def test_psi_exact_matches_brute_force(rng, d):
    for _ in range(3):
        grid, binned, zs = _stats_instance(rng, d)
        got = psi_exact(binned)
        for j in range(d):
            for k in range(d):
                np.testing.assert_array_equal(got[(j, k)], brute_psi_exact(zs[j], zs[k], grid))


def test_single_interior_event_counts_for_every_lag():
    # an event at least one kernel extent away from every border survives all shifts
    domain = Domain(4.0, 4.0, 8.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.array([[0.0, 0.0, 4.0]]),), domain)
    binned = bin_events(cat, grid)
    np.testing.assert_array_equal(phi_grid(binned)[0], np.ones(grid.kernel_shape))


def test_single_event_has_no_event_matches():
    domain = Domain(3.0, 3.0, 6.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.array([[0.2, -0.4, 3.0]]),), domain)
    binned = bin_events(cat, grid)
    np.testing.assert_array_equal(phi_events(binned)[0, 0], np.zeros(grid.kernel_shape))


def test_two_events_one_lag_apart_match_once():
    domain = Domain(3.0, 3.0, 6.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    # second event is one cell later in time and one cell right in x
    cat = Catalog((np.array([[0.0, 0.0, 3.0], [0.5, 0.0, 3.5]]),), domain)
    binned = bin_events(cat, grid)
    got = phi_events(binned)[0, 0]
    assert got.sum() == 1.0
    # kappa = (1, 0, 1) -> tau = (1 + kmid_x, kmid_y, 1)
    assert got[grid.kmid_x, grid.kmid_y - 1, 0] == 1.0


def test_psi_tilde_zero_lag_is_squared_counts(rng):
    grid, binned, zs = _stats_instance(rng, 1)
    got = psi_tilde(binned)
    center = (grid.klen_x - 1, grid.klen_y - 1, grid.klen_t - 1)
    assert got[0, 0][center] == (zs[0] ** 2).sum()
    assert got[0, 0][center] >= binned.n_events[0]


def test_psi_tilde_temporal_neighbours():
    domain = Domain(3.0, 3.0, 6.0)
    grid = make_grid(domain, (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    cat = Catalog((np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 3.5]]),), domain)
    binned = bin_events(cat, grid)
    got = psi_tilde(binned)[0, 0]
    cx, cy, ct = grid.klen_x - 1, grid.klen_y - 1, grid.klen_t - 1
    assert got[cx, cy, ct + 1] == 1.0
    assert got[cx, cy, ct - 1] == 1.0


def test_psi_tilde_symmetry_and_total(rng):
    # support equal to the window makes the lag box cover every node offset
    domain = Domain(2.0, 2.0, 2.0)
    grid = make_grid(domain, (2.0, 2.0, 2.0), (0.5, 0.5, 0.5))
    cat = random_catalog(rng, domain, [12, 9], d=2)
    binned = bin_events(cat, grid)
    got = psi_tilde(binned)
    for j in range(2):
        for k in range(2):
            np.testing.assert_array_equal(
                got[j, k], got[k, j][::-1, ::-1, ::-1]
            )
            assert got[j, k].sum() == binned.n_events[j] * binned.n_events[k]


def test_psi_exact_equals_embedded_psi_tilde_for_interior_events(rng):
    # all events far from every border: no shift can push them off the grid
    domain = Domain(4.0, 4.0, 8.0)
    grid = make_grid(domain, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    pts = np.column_stack(
        [
            rng.uniform(-1.0, 1.0, 15),
            rng.uniform(-1.0, 1.0, 15),
            rng.uniform(3.0, 5.0, 15),
        ]
    )
    binned = bin_events(Catalog((pts,), domain), grid)
    exact = psi_exact(binned)[(0, 0)]
    tilde = psi_tilde(binned)[0, 0]
    norms = psi_approximation_error(exact, tilde, grid)
    assert norms["abs_l1"] == 0.0
    assert norms["rel_fro"] == 0.0


def test_psi_exact_budget_refusal(rng):
    grid, binned, _ = _stats_instance(rng, 1)
    with pytest.raises(BudgetError, match="entries"):
        psi_exact(binned, max_entries=10)


def test_statistics_invariant_under_event_relabeling(rng):
    _, grid, binned, _ = random_instance(rng)
    cat_events = binned.event_nodes[0]
    domain = Domain(grid.sx, grid.sy, grid.t_end)
    coords = grid.node_coords(cat_events)
    perm = rng.permutation(len(coords))
    cat2 = Catalog((coords[perm],), domain)
    binned2 = bin_events(cat2, grid)
    np.testing.assert_array_equal(phi_grid(binned), phi_grid(binned2))
    np.testing.assert_array_equal(phi_events(binned), phi_events(binned2))
    np.testing.assert_array_equal(psi_tilde(binned), psi_tilde(binned2))


def test_entries_nonnegative_and_phi_bounded(rng):
    for d in (1, 2):
        _, _, binned, _ = random_instance(rng, d=d)
        pre = precompute(binned, exact=True)
        assert np.all(pre.phi_grid >= 0)
        assert np.all(pre.phi_events >= 0)
        assert np.all(pre.psi_tilde >= 0)
        for j in range(d):
            assert pre.phi_grid[j].max() <= pre.n[j]


def test_cache_round_trip(rng, tmp_path):
    _, _, binned, _ = random_instance(rng)
    pre = precompute(binned, exact=True)
    path = tmp_path / "stats.bin"
    key = cache_key(binned)
    save_precomputed(pre, path, key=key)
    back = load_precomputed(path, expected_key=key)
    np.testing.assert_array_equal(back.n, pre.n)
    np.testing.assert_array_equal(back.phi_grid, pre.phi_grid)
    np.testing.assert_array_equal(back.phi_events, pre.phi_events)
    np.testing.assert_array_equal(back.psi_tilde, pre.psi_tilde)
    np.testing.assert_array_equal(back.psi_exact[(0, 0)], pre.psi_exact[(0, 0)])
    assert load_precomputed(path, expected_key="different") is None


def test_precompute_uses_cache_dir(rng, tmp_path):
    _, _, binned, _ = random_instance(rng)
    first = precompute(binned, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    second = precompute(binned, cache_dir=tmp_path)
    np.testing.assert_array_equal(first.psi_tilde, second.psi_tilde)
    assert list(tmp_path.iterdir()) == files
