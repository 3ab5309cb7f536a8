import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import milestone_kit as mk
from milestone_kit.committor import (
    Ball, DisconnectedMilestoneError, HalfSpace, analytic_q,
    committor_milestones, density_field, extract_level_set, milestone_density,
    solve_backward_committor, solve_forward_committor, surface_integral_Z,
)
from milestone_kit.grids import Grid


@pytest.fixture(scope="module")
def bm_1d():
    """Free BM on [-0.25, 1.25] with A = {x<=0}, B = {x>=1}: q- = 1 - x."""
    m = mk.free_brownian(dim=1, box=((-0.25, 1.25),))
    grid = Grid(lo=(-0.25,), hi=(1.25,), shape=(97,))
    rho = density_field(m, grid)
    a_set = HalfSpace(0, 0.0, -1)
    b_set = HalfSpace(0, 1.0, +1)
    fld = solve_backward_committor(m, rho, a_set, b_set, grid)
    return m, grid, rho, a_set, b_set, fld


@pytest.fixture(scope="module")
def dw2d():
    """2D double well, A/B balls of radius 0.2 at the minima, 201^2 grid."""
    m = mk.make_benchmark("double_well_2d", beta=1.0)
    grid = Grid(lo=(-2.2, -1.6), hi=(2.2, 1.6), shape=(201, 201))
    rho = density_field(m, grid)
    a_set = Ball((-1.0, 0.0), 0.2)
    b_set = Ball((1.0, 0.0), 0.2)
    fld = solve_backward_committor(m, rho, a_set, b_set, grid)
    return m, grid, rho, a_set, b_set, fld


def test_free_bm_backward_committor_linear(bm_1d):
    m, grid, rho, a_set, b_set, fld = bm_1d
    x = grid.nodes()[:, 0]
    expected = np.clip(1.0 - x, 0.0, 1.0)
    assert np.abs(fld.values - expected).max() < 1e-10


def test_committor_boundary_values(bm_1d):
    _, grid, _, _, _, fld = bm_1d
    assert np.all(fld.values[fld.a_mask] == 1.0)
    assert np.all(fld.values[fld.b_mask] == 0.0)
    assert fld.values.min() >= 0.0 and fld.values.max() <= 1.0


def test_ou_backward_equals_one_minus_forward():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    grid = Grid(lo=(-3.0,), hi=(3.0,), shape=(257,))
    rho = density_field(m, grid)
    a_set = HalfSpace(0, -1.0, -1)
    b_set = HalfSpace(0, 1.0, +1)
    qb = solve_backward_committor(m, rho, a_set, b_set, grid)
    qf = solve_forward_committor(m, a_set, b_set, grid, rho=rho)
    assert np.abs(qb.values - (1.0 - qf.values)).max() < 1e-10


def test_free_bm_forward_committor_linear(bm_1d):
    m, grid, rho, a_set, b_set, _ = bm_1d
    qf = solve_forward_committor(m, a_set, b_set, grid, rho=rho)
    x = grid.nodes()[:, 0]
    assert np.abs(qf.values - np.clip(x, 0.0, 1.0)).max() < 1e-10


def test_nonreversible_breaks_committor_symmetry():
    m = mk.make_benchmark("nonrev_2d", beta=1.0, curl=0.5)
    grid = Grid(lo=(-2.2, -1.6), hi=(2.2, 1.6), shape=(101, 101))
    rho = mk.solve_invariant_density(m, grid)
    a_set = Ball((-1.0, 0.0), 0.2)
    b_set = Ball((1.0, 0.0), 0.2)
    qb = solve_backward_committor(m, rho, a_set, b_set, grid)
    qf = solve_forward_committor(m, a_set, b_set, grid, rho=rho)
    assert np.abs(qb.values - (1.0 - qf.values)).max() > 1e-3


def test_dw2d_half_level_passes_through_saddle(dw2d):
    _, grid, _, _, _, fld = dw2d
    mesh = extract_level_set(fld, 0.5)
    h = max(grid.spacing)
    assert np.abs(mesh.points[:, 0]).max() < 2 * h


def test_level_set_1d_linear(bm_1d):
    *_, fld = bm_1d
    mesh = extract_level_set(fld, 0.25)
    assert mesh.points.shape == (1, 1)
    assert mesh.points[0, 0] == pytest.approx(0.75, abs=1e-10)


def test_level_outside_unit_interval_rejected(bm_1d):
    *_, fld = bm_1d
    for z in (0.0, 1.0, -0.2, 1.4):
        with pytest.raises(ValueError):
            extract_level_set(fld, z)


def test_disconnected_level_rejected():
    # synthetic field whose 0.5 level has two components (1D committors are
    # monotone, so this cannot come out of a 1D solve)
    from milestone_kit.committor import CommittorField
    from milestone_kit.model import DensityField

    grid = Grid(lo=(-1.0,), hi=(1.0,), shape=(65,))
    x = grid.nodes()[:, 0]
    values = 1.0 - np.abs(x)
    rho = DensityField(grid=grid, values=np.ones(grid.shape))
    fld = CommittorField(grid=grid, values=values, rho=rho,
                         a_mask=np.zeros(grid.shape, bool),
                         b_mask=np.zeros(grid.shape, bool),
                         direction="backward", residual=0.0, overshoot=0.0)
    with pytest.raises(DisconnectedMilestoneError):
        extract_level_set(fld, 0.5)
    mesh = extract_level_set(fld, 0.5, allow_disconnected=True)
    assert len(mesh.points) >= 1


def test_surface_integral_constant_in_1d(bm_1d):
    m, grid, rho, _, _, fld = bm_1d
    zs = [0.2, 0.4, 0.6, 0.8]
    vals = [surface_integral_Z(m, rho, fld, extract_level_set(fld, z))
            for z in zs]
    # uniform rho = 1/1.5, unit slope, a = 1: integrand = 2/3 at every level
    assert np.allclose(vals, 2.0 / 3.0, rtol=1e-8)
    assert np.ptp(vals) < 1e-10


def test_surface_integrals_equal_2d(dw2d):
    m, grid, rho, _, _, fld = dw2d
    zs = [0.3, 0.5, 0.7]
    vals = np.array([surface_integral_Z(m, rho, fld, extract_level_set(fld, z))
                     for z in zs])
    spread = np.ptp(vals) / vals.mean()
    assert spread < 0.02


def test_milestone_density_normalized(dw2d):
    m, grid, rho, _, _, fld = dw2d
    mesh = extract_level_set(fld, 0.5)
    dens = milestone_density(m, rho, fld, mesh)
    total = np.sum(mesh.quad_weights() * dens.values)
    assert total == pytest.approx(1.0, abs=1e-6)
    # mass concentrates near the saddle (y = 0)
    mid = np.abs(mesh.points[:, 1]) < 0.3
    assert dens.values[mid].mean() > 3 * dens.values[~mid].mean()


def test_milestone_density_uniform_for_linear_strip():
    m = mk.free_brownian(dim=2, box=((-0.25, 1.25), (0.0, 1.0)))
    grid = Grid(lo=(-0.25, 0.0), hi=(1.25, 1.0), shape=(97, 33))
    rho = density_field(m, grid)
    fld = solve_backward_committor(m, rho, HalfSpace(0, 0.0, -1),
                                   HalfSpace(0, 1.0, +1), grid)
    mesh = extract_level_set(fld, 0.5)
    dens = milestone_density(m, rho, fld, mesh)
    assert np.ptp(dens.values) / dens.values.mean() < 1e-6


def test_analytic_q_uniform_levels():
    q = analytic_q([1.0, 0.5, 0.0])
    assert q[1, 0] == pytest.approx(0.5)
    assert q[1, 2] == pytest.approx(0.5)


def test_analytic_q_spec_values():
    q = analytic_q([1.0, 0.75, 0.25, 0.0])
    assert q[1, 0] == pytest.approx(2.0 / 3.0)
    assert q[1, 2] == pytest.approx(1.0 / 3.0)
    assert q[2, 1] == pytest.approx(1.0 / 3.0)
    assert q[2, 3] == pytest.approx(2.0 / 3.0)


def test_analytic_q_boundary_rows():
    q = analytic_q([0.9, 0.5, 0.2, 0.1])
    assert q[0, 1] == 1.0
    assert q[3, 2] == 1.0


def test_analytic_q_rejects_nondecreasing():
    with pytest.raises(ValueError):
        analytic_q([0.2, 0.4, 0.6])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=8, unique=True))
def test_analytic_q_rows_sum_to_one(levels):
    z = np.sort(np.asarray(levels))[::-1]
    q = analytic_q(z)
    assert np.all(q.sum(axis=1) == 1.0)
    assert np.all((q >= 0.0) & (q <= 1.0))


def test_committor_milestones_representatives(dw2d):
    *_, fld = dw2d
    mset, meshes = committor_milestones(fld, [0.7, 0.5, 0.3])
    for i, z in enumerate(mset.levels):
        p = mset.point_on(i)
        assert abs(mset.level_function.f_single(p) - z) < 1e-6
    assert len(meshes) == 3


def test_committor_export_roundtrip(bm_1d, tmp_path):
    *_, fld = bm_1d
    fld.to_binary(tmp_path / "q.bin")
    grid, vals = mk.read_binary_field(tmp_path / "q.bin")
    assert np.array_equal(vals, fld.values)
    fld.to_csv(tmp_path / "q.csv")
    data = np.loadtxt(tmp_path / "q.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 1], fld.values)
