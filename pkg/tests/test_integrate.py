import numpy as np
import pytest

import milestone_kit as mk
from milestone_kit import engine
from milestone_kit.integrate import (
    BlowUpError, CensoredError, StepTooLargeError, TrajectoryState, em_step,
    run_in_cell, run_until_hit,
)
from milestone_kit.milestones import LinearLevel, MilestoneSet
from milestone_kit.model import DiffusionModel


def _deterministic_model(drift_sign=-1.0):
    """1D model with b = drift_sign * x and zero noise."""

    def drift(x):
        return drift_sign * np.asarray(x, dtype=float)

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 1))

    return DiffusionModel(dim=1, drift=drift, diffusion=diffusion,
                          noise_factor=diffusion, sigma_scalar=0.0)


def test_em_step_increment_variance_matches_2dt():
    m = mk.free_brownian(dim=1)
    rng = mk.RngStream(0, 0)
    dt = 0.01
    incs = np.empty(100_000)
    st = TrajectoryState(np.array([0.0]))
    for k in range(len(incs)):
        new = em_step(m, st, dt, rng)
        incs[k] = new.position[0] - st.position[0]
        st = TrajectoryState(np.array([0.0]), new.time)
    var = incs.var()
    assert abs(var - 2 * dt) / (2 * dt) < 0.03


def test_em_step_rejects_nonpositive_dt():
    m = mk.free_brownian(dim=1)
    with pytest.raises(ValueError):
        em_step(m, TrajectoryState(np.array([0.0])), 0.0, mk.RngStream(0, 0))


def test_em_step_deterministic_limit_matches_explicit_euler():
    m = _deterministic_model(drift_sign=-1.0)
    rng = mk.RngStream(0, 0)
    st = TrajectoryState(np.array([1.0]))
    dt = 0.05
    for _ in range(20):
        st = em_step(m, st, dt, rng)
    x = 1.0
    for _ in range(20):
        x = x + (-x) * dt
    assert st.position[0] == pytest.approx(x, rel=1e-14)
    assert st.time == pytest.approx(1.0)


def test_em_step_blowup_reports_last_state():
    def drift(x):
        return 1e308 * np.ones_like(np.asarray(x, dtype=float))

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1] + (1, 1))

    m = DiffusionModel(dim=1, drift=drift, diffusion=diffusion,
                       noise_factor=diffusion, sigma_scalar=1.0)
    with pytest.raises(BlowUpError) as err:
        em_step(m, TrajectoryState(np.array([1.0])), 1e10, mk.RngStream(0, 0))
    assert np.isfinite(err.value.state.position).all()


def test_run_until_hit_gamblers_ruin():
    # free BM from 0.5 on (0, 1): hit probability of either side is 1/2
    m = mk.free_brownian(dim=1)
    f = LinearLevel([1.0])
    targets = [(0, 1.0), (1, 0.0)]
    rng = mk.RngStream(11, 0)
    n = 10_000
    hits_up = 0
    for _ in range(n):
        ev = run_until_hit(m, TrajectoryState(np.array([0.5])), targets, f,
                           dt=1e-3, rng=rng, max_time=1e4)
        hits_up += ev.index == 0
    p = hits_up / n
    se = 0.5 / np.sqrt(n)
    assert abs(p - 0.5) < 3 * se


def test_run_until_hit_immediate_when_on_target():
    m = mk.free_brownian(dim=1)
    f = LinearLevel([1.0])
    ev = run_until_hit(m, TrajectoryState(np.array([1.0]), time=2.0),
                       [(7, 1.0), (8, 0.0)], f, dt=1e-3,
                       rng=mk.RngStream(0, 0), max_time=10.0)
    assert ev.index == 7
    assert ev.time == 2.0


def test_run_until_hit_departing_excludes_start_level():
    m = mk.free_brownian(dim=1)
    f = LinearLevel([1.0])
    ev = run_until_hit(m, TrajectoryState(np.array([1.0])),
                       [(0, 1.0), (1, 0.0)], f, dt=1e-3,
                       rng=mk.RngStream(3, 1), max_time=1e4, departing=True)
    assert ev.index == 1
    assert ev.time > 0


def test_run_until_hit_censored_when_drifting_away():
    m = _deterministic_model(drift_sign=1.0)   # pushes away from 0
    f = LinearLevel([1.0])
    with pytest.raises(CensoredError) as err:
        run_until_hit(m, TrajectoryState(np.array([0.5])), [(0, 0.0)], f,
                      dt=1e-3, rng=mk.RngStream(0, 0), max_time=1.0)
    assert err.value.elapsed == pytest.approx(1.0, abs=1e-2)


def test_hit_times_interpolated_within_step():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    mset = mk.linear_milestones([-0.3, 0.0, 0.3])
    chain = mk.extract_chain(m, mset, [0.0], total_time=50.0, dt=1e-3,
                             rng=mk.RngStream(5, 0))
    frac = np.mod(chain.times, 1e-3)
    assert len(chain) > 50
    # interpolation places hits strictly inside the bracketing step
    inside = (frac > 0) & (frac < 1e-3)
    assert inside.mean() > 0.9


def test_run_in_cell_interior_matches_em_step():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    f = LinearLevel([1.0])
    cell = mk.MilestoneSet(f, np.array([5.0, -5.0])).cell(1)
    s1 = em_step(m, TrajectoryState(np.array([0.2])), 1e-3, mk.RngStream(2, 2))
    s2 = run_in_cell(m, TrajectoryState(np.array([0.2])),
                     mk.MilestoneSet(f, np.array([5.0, -5.0])).cell(1), f,
                     1e-3, mk.RngStream(2, 2))
    assert s1.position == pytest.approx(s2.position)


def test_run_in_cell_reflects_exactly_in_1d():
    m = _deterministic_model(drift_sign=1.0)     # pushes right, no noise
    f = LinearLevel([1.0])
    mset = mk.MilestoneSet(f, np.array([1.0, 0.0]))
    cell = mset.cell(1)      # band below 1.0
    st = TrajectoryState(np.array([0.99]))
    new = run_in_cell(m, st, cell, f, dt=1.0, rng=mk.RngStream(0, 0))
    proposal = 0.99 + 0.99   # euler step
    assert new.position[0] == pytest.approx(2 * 1.0 - proposal, rel=1e-12)


def test_run_in_cell_step_too_large():
    m = mk.free_brownian(dim=1)
    f = LinearLevel([1.0])
    thin = mk.MilestoneSet(f, np.array([0.02, 0.015, 0.01]))
    cell = thin.cell(1)      # band [0.01, 0.02], reflecting on both sides
    with pytest.raises(StepTooLargeError):
        # dt = 1 gives steps of size ~1.4 across a band of width 0.01
        for k in range(50):
            run_in_cell(m, TrajectoryState(np.array([0.015])), cell, f,
                        dt=1.0, rng=mk.RngStream(k, 0))


def test_reflected_bm_occupation_uniform():
    # stationary law of reflected BM on [0, 1] is uniform: KS < 0.02.
    # The mixing time (~0.1 time units = 1e3 steps) makes the KS noise floor
    # at 1e6 steps about 0.027, so the budget is 1e7 steps, recorded strided.
    m = mk.free_brownian(dim=1)
    f = LinearLevel([1.0])
    res = engine.run_chain(m, f, np.array([0.5]), np.array([0.5]), dt=1e-4,
                           rng=mk.RngStream(21, 0), reflect=(0.0, 1.0),
                           max_steps=10**7, rec_stride=10, rec_cap=10**6)
    xs = np.sort(res.recorded[1][:, 0])
    n = len(xs)
    assert n == 10**6
    assert xs.min() >= 0.0 and xs.max() <= 1.0
    ecdf = np.arange(1, n + 1) / n
    ks = np.abs(ecdf - xs).max()
    assert ks < 0.02


def test_engine_reproducible_and_parity():
    m = mk.make_benchmark("double_well_1d", beta=2.0)
    mset = mk.linear_milestones([-0.8, 0.0, 0.8])
    runs = []
    for eng in ("numba", "numba", "python"):
        rng = mk.RngStream(77, 4)
        runs.append(engine.run_chain(m, mset.level_function, mset.levels,
                                     np.array([0.0]), dt=1e-3, rng=rng,
                                     tmax=50.0, engine=eng))
    assert np.array_equal(runs[0].idx, runs[1].idx)
    assert np.array_equal(runs[0].times, runs[1].times)
    assert np.array_equal(runs[0].positions, runs[1].positions)
    # python twin consumes the same stream and reproduces events bit-for-bit
    assert np.array_equal(runs[0].idx, runs[2].idx)
    assert np.array_equal(runs[0].times, runs[2].times)
    assert np.array_equal(runs[0].positions, runs[2].positions)
    assert runs[0].position == pytest.approx(runs[2].position, abs=0)


def test_engine_parity_2d_grid_level():
    m = mk.make_benchmark("nonrev_2d", beta=1.0, curl=0.5)
    grid = mk.Grid(lo=(-2.0, -1.5), hi=(2.0, 1.5), shape=(65, 49))
    nodes = grid.nodes()
    vals = (np.tanh(nodes[:, 0]) * 0.4 + 0.5 + 0.05 * nodes[:, 1]).reshape(grid.shape)
    lf = mk.GridLevel(grid, vals)
    levels = np.array([0.7, 0.5, 0.3])
    out = []
    for eng in ("numba", "python"):
        rng = mk.RngStream(13, 9)
        out.append(engine.run_chain(m, lf, levels, np.array([0.0, 0.1]),
                                    dt=5e-4, rng=rng, tmax=20.0, engine=eng))
    assert np.array_equal(out[0].idx, out[1].idx)
    assert np.array_equal(out[0].times, out[1].times)
    assert np.array_equal(out[0].positions, out[1].positions)


def test_ou_single_step_moments():
    # empirical one-step mean and variance match the scheme's moments
    m = mk.make_benchmark("ou_1d", beta=2.0)
    rng = mk.RngStream(4, 4)
    dt, x0, n = 1e-3, 0.7, 200_000
    z = rng.normals(n)
    xn = x0 + (-x0) * dt + np.sqrt(2 * dt) * m.sigma_scalar * z
    a = 0.5
    se_mean = np.sqrt(2 * a * dt / n)
    assert abs(xn.mean() - (x0 - x0 * dt)) < 4 * se_mean
    var = xn.var()
    se_var = 2 * a * dt * np.sqrt(2.0 / n)
    assert abs(var - 2 * a * dt) < 4 * se_var
