import numpy as np
import pytest

import milestone_kit as mk
from milestone_kit.grids import Grid
from milestone_kit.surfaces import (
    Curve, identity_rescale, logistic_rescale, milestones_from_curve, project,
    smoothed_committor, smoothed_committor_field,
)


def test_project_straight_segment():
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert project(c, np.array([0.3, 5.0])) == pytest.approx(0.3, abs=1e-12)


def test_project_tie_returns_smallest_s():
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    s = project(c, np.array([0.0, 0.5]))   # equidistant from both ends
    assert s == pytest.approx(0.0)


def test_project_point_on_curve():
    c = Curve(np.array([[0.0, 0.0], [2.0, 1.0]]))
    p = c.at(0.37)[0]
    s = project(c, p)
    assert np.linalg.norm(p - c.at(s)[0]) < 1e-12


def test_project_orthogonality_residual():
    # at interior minima the connecting vector is orthogonal to the tangent
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.3], [2.0, 0.0]]))
    rng = np.random.default_rng(0)
    pts = rng.uniform([0.2, -1.0], [1.8, 1.0], size=(50, 2))
    n = len(c.points)
    for p in pts:
        s = project(c, p)
        if not 0.01 < s < 0.99:
            continue
        frac = s * (n - 1) - np.floor(s * (n - 1))
        if frac < 0.05 or frac > 0.95:
            continue      # projection on a polyline vertex: no orthogonality
        eps = 1e-8
        tangent = (c.at(s + eps)[0] - c.at(s - eps)[0]) / (2 * eps)
        resid = abs(tangent @ (p - c.at(s)[0]))
        dist = np.linalg.norm(p - c.at(s)[0])
        if dist > 1e-9:
            assert resid < 1e-8 * np.linalg.norm(tangent) * dist + 1e-12


def test_project_scale_consistent():
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 0.0]]))
    big = Curve(10.0 * np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 0.0]]))
    p = np.array([0.7, 1.3])
    assert project(c, p) == pytest.approx(project(big, 10.0 * p), abs=1e-12)


def test_curve_constant_speed():
    c = Curve(np.array([[0.0, 0.0], [0.1, 0.0], [2.0, 1.5]]))
    seg = np.linalg.norm(np.diff(c.points, axis=0), axis=1)
    assert np.ptp(seg) / seg.mean() < 0.01


def test_curve_rejects_degenerate():
    with pytest.raises(ValueError):
        Curve(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        Curve(np.array([[0.5, 0.5], [0.5, 0.5]]))


def test_smoothed_committor_linear_region():
    # Gaussian smoothing leaves the linear coordinate unchanged away from ends
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0]]))
    delta = 0.05
    xs = np.array([[0.4, 0.02], [0.5, -0.3], [0.6, 0.1]])
    f = smoothed_committor(c, identity_rescale, delta, xs)
    assert np.abs(f - xs[:, 0]).max() < 1e-6


def test_smoothed_committor_delta_to_zero():
    c = Curve(np.array([[0.0, 0.0], [0.7, 0.5], [1.4, 0.0]]))
    rng = np.random.default_rng(1)
    pts = rng.uniform([0.1, -0.5], [1.3, 0.8], size=(20, 2))
    s_direct = np.array([identity_rescale(project(c, p)) for p in pts])
    f = smoothed_committor(c, identity_rescale, 1e-3, pts)
    assert np.abs(f - s_direct).max() < 5e-4


def test_smoothed_committor_bounded():
    c = Curve(np.array([[0.0, 0.0], [1.0, 1.0]]))
    rng = np.random.default_rng(2)
    pts = rng.uniform(-3, 3, size=(50, 2))
    f = smoothed_committor(c, logistic_rescale(6.0), 0.3, pts)
    assert np.all((f >= 0.0) & (f <= 1.0))


def test_smoothed_committor_rejects_bad_inputs():
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        smoothed_committor(c, identity_rescale, 0.0, np.array([0.5, 0.0]))
    with pytest.raises(ValueError):
        smoothed_committor(c, lambda s: 1.0 - np.asarray(s), 0.1,
                           np.array([0.5, 0.0]))


def test_field_tabulation_matches_direct():
    c = Curve(np.array([[-1.0, 0.0], [0.0, 0.4], [1.0, 0.0]]))
    grid = Grid(lo=(-1.5, -1.0), hi=(1.5, 1.4), shape=(193, 161))
    delta = 0.1
    lf = smoothed_committor_field(c, identity_rescale, delta, grid)
    rng = np.random.default_rng(3)
    pts = rng.uniform([-0.8, -0.3], [0.8, 0.6], size=(15, 2))
    direct = smoothed_committor(c, identity_rescale, delta, pts)
    tab = lf(pts)
    assert np.abs(direct - tab).max() < 2e-3


def test_milestones_from_curve_straight_is_planar():
    # straight segment + identity rescale gives hyperplane milestones
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0]]))
    grid = Grid(lo=(-0.5, -0.6), hi=(1.5, 0.6), shape=(201, 121))
    mset = milestones_from_curve(c, identity_rescale, 0.05, [0.7, 0.5, 0.3], grid)
    assert mset.n == 3
    ys = np.linspace(-0.2, 0.2, 9)
    for i, z in enumerate(mset.levels):
        pts = np.column_stack([np.full_like(ys, z), ys])
        f = mset.level_function(pts)
        assert np.abs(f - z).max() < 1e-6
        rep = mset.point_on(i)
        assert abs(mset.level_function.f_single(rep) - z) < 1e-6


def test_milestones_from_curve_levels_ordered_along_curve():
    c = Curve(np.array([[-1.0, 0.0], [0.0, 0.4], [1.0, 0.0]]))
    grid = Grid(lo=(-1.5, -1.0), hi=(1.5, 1.4), shape=(129, 129))
    mset = milestones_from_curve(c, identity_rescale, 0.08,
                                 [0.8, 0.6, 0.4, 0.2], grid)
    s_reps = [project(c, mset.point_on(i)) for i in range(4)]
    assert np.all(np.diff(s_reps) < 0)    # decreasing levels, decreasing s


def test_milestones_from_curve_validates_levels():
    c = Curve(np.array([[0.0, 0.0], [1.0, 0.0]]))
    grid = Grid(lo=(-0.5, -0.5), hi=(1.5, 0.5), shape=(65, 33))
    with pytest.raises(ValueError):
        milestones_from_curve(c, identity_rescale, 0.05, [0.3, 0.7], grid)
    with pytest.raises(ValueError):
        milestones_from_curve(c, identity_rescale, 0.05, [1.2, 0.5], grid)
