import math

import numpy as np
import pytest
import scipy.integrate

from gyrolab.config import RunParams
from gyrolab.geometry import (TWO_PI, DomainError, PartitionError, TorusGrid, equal_area_radii, memory_footprint,
                              wrap_angle)

from conftest import tiny_params

# grid points per plane of the four plasma sizes
PRESET_MGRID = {"A": 32449, "B": 128893, "C": 513785, "D": 2051567}


def test_preset_grid_sizes():
    previous = None
    for label, expected in PRESET_MGRID.items():
        grid = TorusGrid(RunParams.preset(label))
        assert abs(grid.mgrid - expected) <= 0.005 * expected
        if previous is not None:
            assert grid.mgrid / previous == pytest.approx(4.0, rel=0.02)
        previous = grid.mgrid


def test_ring_sizes():
    grid = TorusGrid(tiny_params())
    assert list(grid.mtheta) == [4, 4, 6, 8, 8, 10, 12, 14, 16]
    assert grid.mgrid == sum(int(m) + 1 for m in grid.mtheta)
    assert all(m % 2 == 0 and m >= 4 for m in grid.mtheta)
    assert grid.r[0] == 0.1
    assert grid.r[-1] == 0.9
    assert grid.igrid[-1] == grid.mgrid
    # closure nodes
    assert np.count_nonzero(~grid.canonical) == grid.mpsi + 1
    assert grid.node_theta[grid.igrid[1] - 1] == pytest.approx(TWO_PI)


def test_equilibrium():
    grid = TorusGrid(RunParams())
    r = 0.18 * grid.aspect_ratio
    assert grid.b_field(r, 0.0) == pytest.approx(1.0 / 1.18, abs=1e-14)

    h = 1e-5
    for r, theta in [(0.3, 0.4), (0.55, 2.0), (0.8, 4.5)]:
        b, db_dr, db_dtheta, q = grid.equilibrium(r, theta)
        assert b == grid.b_field(r, theta)
        fd_theta = (grid.b_field(r, theta + h) - grid.b_field(r, theta - h)) / (2.0 * h)
        fd_r = (grid.b_field(r + h, theta) - grid.b_field(r - h, theta)) / (2.0 * h)
        assert abs(db_dtheta - fd_theta) < 1e-8
        assert abs(db_dr - fd_r) < 1e-8
        assert q == pytest.approx(RunParams().q(r))


def test_jacobian_ring_integral():
    grid = TorusGrid(RunParams())
    for r in [0.1, 0.5, 0.9]:
        eps = r / grid.aspect_ratio
        integral, _ = scipy.integrate.quad(lambda t: grid.jacobian(r, t), 0.0, TWO_PI, epsabs=1e-13)
        assert integral == pytest.approx(TWO_PI * (1.0 + 0.5 * eps * eps), abs=1e-10)


def test_domain_check():
    grid = TorusGrid(RunParams())
    try:
        grid.equilibrium(0.95, 0.0)
        assert False
    except DomainError:
        pass
    try:
        grid.equilibrium(np.array([0.5, 0.05]), np.zeros(2))
        assert False
    except DomainError:
        pass
    grid.equilibrium(0.9, 0.0)


def test_equal_area_radii():
    radii = equal_area_radii(0.0, 1.0, 2)
    assert radii[1] == pytest.approx(1.0 / math.sqrt(2.0))
    radii = equal_area_radii(0.1, 0.9, 5)
    areas = np.diff(radii ** 2)
    assert np.allclose(areas, areas[0], rtol=1e-12)


def test_radial_partition():
    grid = TorusGrid(RunParams(r_inner=0.01, r_outer=1.0, mpsi=99))
    owned = grid.radial_partition(2)
    # split at the ring nearest to a/sqrt(2)
    split = grid.r[owned[1][0]]
    assert abs(split - 1.0 / math.sqrt(2.0)) <= 0.5 * grid.delta_r + 1e-12

    grid = TorusGrid(tiny_params())
    owned = grid.radial_partition(2)
    assert owned == [(0, 4), (5, 8)]
    for k in range(1, 3):
        owned = grid.radial_partition(k)
        assert owned[0][0] == 0
        assert owned[-1][1] == grid.mpsi
        for (_, last), (first, _) in zip(owned[:-1], owned[1:]):
            assert first == last + 1
        assert all(b - a + 1 >= grid.nghost for a, b in owned)

    try:
        grid.radial_partition(4)
        assert False
    except PartitionError as e:
        assert "nghost=3" in str(e)


def test_windows():
    grid = TorusGrid(tiny_params())
    owned = grid.radial_partition(2)
    w = grid.window(1, 1, owned)
    assert (w.own_lo, w.own_hi, w.lo, w.hi) == (5, 8, 2, 8)
    assert w.node_lo == grid.igrid[2]
    assert w.n_local == grid.igrid[9] - grid.igrid[2]
    assert w.r_lo == grid.r[5]
    assert w.r_hi == grid.r_outer
    w0 = grid.window(0, 0, owned)
    assert (w0.lo, w0.hi) == (0, 7)
    assert w0.r_hi == grid.r[5]

    assert list(grid.radial_owner(np.array([0.1, 0.59, grid.r[5], 0.9]), owned)) == [0, 0, 1, 1]
    dz = grid.delta_zeta
    assert list(grid.toroidal_owner(np.array([0.0, dz - 1e-9, dz, -1e-3, TWO_PI]))) == [0, 0, 1, 1, 0]


def test_locate_weights():
    grid = TorusGrid(tiny_params(ntoroidal=4))
    rng = np.random.default_rng(3)
    n = 2000
    r = rng.uniform(grid.r_inner, grid.r_outer, n)
    theta = rng.uniform(-1.0, 7.0, n)
    zeta = rng.uniform(0.0, TWO_PI, n)
    cell = grid.locate(r, theta, zeta)
    assert cell.weights.shape == (8, n)
    assert np.all(cell.weights >= 0.0)
    assert np.allclose(np.sum(cell.weights, axis=0), 1.0, rtol=0.0, atol=1e-12)
    assert np.all(grid.canonical[cell.nodes])
    assert not np.any(cell.outside)


def test_locate_on_node():
    grid = TorusGrid(tiny_params(ntoroidal=4))
    node = int(grid.igrid[3]) + 2
    cell = grid.locate(np.array([grid.r[3]]), np.array([grid.node_theta[node]]), np.array([grid.delta_zeta]))
    k = int(np.argmax(cell.weights[:, 0]))
    assert k == 0
    assert cell.weights[k, 0] == pytest.approx(1.0, abs=1e-12)
    assert cell.nodes[k, 0] == node
    assert cell.planes[0, 0] == 1


def test_locate_in_window():
    grid = TorusGrid(tiny_params())
    owned = grid.radial_partition(2)
    w = grid.window(1, 1, owned)
    r = np.array([0.65, 0.15, 0.75])
    theta = np.array([1.0, 1.0, 6.0])
    zeta = np.array([1.2 * grid.delta_zeta, 1.5 * grid.delta_zeta, 0.9 * grid.delta_zeta])
    local = grid.locate(r, theta, zeta, window=w, plane_origin=1)
    assert list(local.outside) == [False, True, False]
    assert np.all(local.nodes >= 0) and np.all(local.nodes < w.n_local)
    # a point inside the window and wedge matches the global location
    full = grid.locate(r[:1], theta[:1], zeta[:1])
    assert np.array_equal(local.nodes[:, 0] + w.node_lo, full.nodes[:, 0])
    assert np.allclose(local.weights[:, 0], full.weights[:, 0], rtol=0.0, atol=1e-14)
    # zeta just before the wedge is clamped onto the left plane
    assert np.sum(local.weights[4:, 2]) == 0.0


def test_twist_offset():
    grid = TorusGrid(tiny_params(ntoroidal=7))
    total = grid.ntoroidal * grid.twist_offset
    assert np.allclose(total, TWO_PI / grid.qprofile, rtol=0.0, atol=1e-12)


def test_wrap_angle():
    a = wrap_angle(np.array([-1e-300, -TWO_PI, TWO_PI + 1.0, 3.0]))
    assert np.all(a >= 0.0) and np.all(a < TWO_PI)
    assert a[1] == 0.0
    assert a[3] == 3.0


def test_memory_footprint():
    m = memory_footprint(RunParams.preset("A"))
    assert m["mgrid"] == TorusGrid(RunParams.preset("A")).mgrid
    assert m["chargei_mib"] == pytest.approx(0.495, abs=0.005)
    assert m["evector_mib"] == pytest.approx(1.49, abs=0.01)
    assert m["particles_gib"] == pytest.approx(0.29, abs=0.005)
    assert m["total_particles"] == 64 * m["mgrid"] * 100
    d = memory_footprint(RunParams.preset("D"))
    assert d["chargei_mib"] == pytest.approx(31.30, abs=0.05)
    assert d["evector_mib"] == pytest.approx(93.91, abs=0.1)


def test_summary():
    grid = TorusGrid(tiny_params())
    text = grid.summary()
    lines = text.splitlines()
    assert lines[0].startswith("# mpsi=8")
    assert f"mgrid={grid.mgrid}" in lines[0]
    assert len(lines) == 2 + grid.mpsi + 1
    assert lines[2].split()[2] == "4"
