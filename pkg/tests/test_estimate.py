import numpy as np
import pytest

import milestone_kit as mk
from milestone_kit.committor import analytic_q
from milestone_kit.estimate import (
    ReducibleChainError, TransitionStats, estimate_cells, estimate_kernel,
    estimate_long, hit_histogram, ks_distance, memory_diagnostic,
    stationary_index,
)
from milestone_kit.milestones import CoarseChain, linear_milestones


def _chain_from(idx, lags, dim=1):
    times = np.concatenate([[0.0], np.cumsum(lags)])
    return CoarseChain(np.asarray(idx, dtype=np.int64), times,
                       np.zeros((len(idx), dim)), total_time=float(times[-1]))


def test_stats_counting():
    chain = _chain_from([0, 1, 0, 1, 2, 1], [1.0, 2.0, 1.5, 0.5, 3.0])
    st = TransitionStats.from_chain(chain, 3)
    assert st.counts[0, 1] == 2
    assert st.counts[1, 0] == 1
    assert st.counts[1, 2] == 1
    assert st.counts[2, 1] == 1
    assert st.departures[1] == 2
    assert st.residence[1] == pytest.approx(2.0 + 0.5)
    assert st.t_hat()[1] == pytest.approx(1.25)
    # N_i = sum_j N_ij by construction; residence bounded by total time
    assert st.residence.sum() <= st.total_time + 1e-12
    assert np.all(st.counts.sum(axis=1) == st.departures)


def test_stats_merge_is_pooling():
    c1 = _chain_from([0, 1, 2, 1], [1.0, 2.0, 0.5])
    c2 = _chain_from([1, 0, 1, 2], [0.7, 0.3, 1.1])
    s1 = TransitionStats.from_chain(c1, 3)
    s2 = TransitionStats.from_chain(c2, 3)
    merged = s1 + s2
    both = _chain_from([0, 1, 2, 1], [1.0, 2.0, 0.5])
    pooled = TransitionStats.from_chain(both, 3) + TransitionStats.from_chain(c2, 3)
    assert np.array_equal(merged.counts, s2.merge(s1).counts)   # commutative
    assert np.allclose(merged.lag_sums, pooled.lag_sums)
    a = (s1 + s2)
    assert np.array_equal(a.counts, (s2 + s1).counts)
    # associativity of the counting part
    s3 = TransitionStats.from_chain(_chain_from([2, 1, 0], [0.2, 0.4]), 3)
    left = (s1 + s2) + s3
    right = s1 + (s2 + s3)
    assert np.array_equal(left.counts, right.counts)
    assert np.allclose(left.lag_sums, right.lag_sums)
    for i in range(3):
        assert np.array_equal(left.hit_times[i], right.hit_times[i])


def test_p_hat_rows_sum_to_one():
    chain = _chain_from([0, 1, 0, 1, 2, 1, 0], np.ones(6))
    st = TransitionStats.from_chain(chain, 3)
    p = st.p_hat()
    visited = st.departures > 0
    assert np.allclose(p[visited].sum(axis=1), 1.0)


def test_estimate_long_two_milestones_deterministic_p():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    pair = mk.linear_milestones([-0.4, 0.4])
    stats = estimate_long(m, pair, total_time=300.0, dt=1e-3,
                          rng=mk.RngStream(40, 0))
    p = stats.p_hat()
    assert p[0, 1] == 1.0
    assert p[1, 0] == 1.0
    t = stats.t_hat()
    assert np.all(t[stats.departures > 0] > 0)


def test_estimate_long_matches_analytic_q_ou():
    # isocommittor milestones: p_hat approaches the level-spacing matrix
    m = mk.make_benchmark("ou_1d", beta=1.0)
    grid = mk.Grid(lo=(-3.0,), hi=(3.0,), shape=(1025,))
    rho = mk.density_field(m, grid)
    fld = mk.solve_backward_committor(m, rho, mk.HalfSpace(0, -2.0, -1),
                                      mk.HalfSpace(0, 2.0, +1), grid)
    mset, _ = mk.committor_milestones(fld, [0.8, 0.6, 0.4, 0.2])
    stats = estimate_long(m, mset, total_time=4000.0, dt=1e-3,
                          rng=mk.RngStream(41, 0))
    q = analytic_q(mset.levels)
    p, se = stats.p_hat(), stats.p_stderr()
    assert stats.departures.min() > 500
    for i in range(4):
        for j in range(4):
            if q[i, j] > 0:
                assert abs(p[i, j] - q[i, j]) < 3 * se[i, j] + 1e-9


def test_cells_match_long_double_well():
    m = mk.make_benchmark("double_well_1d", beta=2.0)
    mset = linear_milestones([-1.0, -0.3, 0.3, 1.0])
    long_stats = estimate_long(m, mset, total_time=4000.0, dt=5e-4,
                               rng=mk.RngStream(42, 0))
    cell_stats = estimate_cells(m, mset, per_cell_transitions=3000, dt=5e-4,
                                rng=mk.RngStream(42, 1))
    p1, p2 = long_stats.p_hat(), cell_stats.p_hat()
    se = np.hypot(long_stats.p_stderr(), cell_stats.p_stderr())
    t1, t2 = long_stats.t_hat(), cell_stats.t_hat()
    tse = np.hypot(long_stats.t_stderr(), cell_stats.t_stderr())
    for i in range(4):
        for j in range(4):
            if p1[i, j] + p2[i, j] > 0.01:
                assert abs(p1[i, j] - p2[i, j]) < 3.5 * se[i, j] + 1e-9
        assert abs(t1[i] - t2[i]) < 3.5 * tse[i] + 0.02 * t1[i]


def test_cells_merge_independent_of_worker_order():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    mset = linear_milestones([-0.5, 0.0, 0.5])
    a = estimate_cells(m, mset, per_cell_transitions=300, dt=1e-3,
                       rng=mk.RngStream(43, 0))
    b = estimate_cells(m, mset, per_cell_transitions=300, dt=1e-3,
                       rng=mk.RngStream(43, 0))
    assert np.array_equal(a.counts, b.counts)
    assert np.allclose(a.lag_sums, b.lag_sums, rtol=0, atol=0)


def test_stationary_index_two_state():
    pi = stationary_index(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(pi, [0.5, 0.5])


def test_stationary_index_birth_death_oracle():
    q = analytic_q([1.0, 0.5, 0.0])
    pi = stationary_index(q)
    # oracle: Cesaro-averaged power iteration (the chain has period two)
    ref = np.full(3, 1.0 / 3.0)
    for _ in range(20_000):
        ref = 0.5 * (ref + ref @ q)
    assert np.allclose(pi, ref, atol=1e-10)
    assert np.allclose(pi, [0.25, 0.5, 0.25])


def test_stationary_index_rejects_reducible():
    p = np.eye(4)
    with pytest.raises(ReducibleChainError):
        stationary_index(p)


def test_empirical_pi_matches_stationary():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    mset = linear_milestones([-0.6, 0.0, 0.6])
    stats = estimate_long(m, mset, total_time=2000.0, dt=1e-3,
                          rng=mk.RngStream(44, 0))
    pi_emp = stats.empirical_pi()
    pi = stationary_index(stats.p_hat())
    n = stats.departures.sum()
    se = np.sqrt(pi * (1 - pi) / n)
    assert np.abs(pi_emp - pi).max() < 4 * se.max()
    # balance residual
    resid = np.abs(pi_emp - pi_emp @ stats.p_hat()).max()
    assert resid < 4 * se.max()


def test_hit_histogram_1d_trivial():
    chain = _chain_from([0, 1] * 600, np.ones(1199))
    st = TransitionStats.from_chain(chain, 2)
    mesh = mk.LevelSetMesh(level=0.5, points=np.array([[0.3]]),
                           normals=np.array([[1.0]]),
                           grad_norms=np.array([1.0]))
    hist = hit_histogram(st, 0, mesh)
    assert np.allclose(hist.masses, [1.0])


def test_hit_histogram_requires_samples():
    chain = _chain_from([0, 1, 0], [1.0, 1.0])
    st = TransitionStats.from_chain(chain, 2)
    mesh = mk.LevelSetMesh(level=0.5, points=np.array([[0.3]]),
                           normals=np.array([[1.0]]), grad_norms=np.array([1.0]))
    with pytest.raises(ValueError):
        hit_histogram(st, 0, mesh)


def test_estimate_kernel_1d_reduces_to_p_and_t():
    m = mk.make_benchmark("ou_1d", beta=1.0)
    grid = mk.Grid(lo=(-3.0,), hi=(3.0,), shape=(513,))
    rho = mk.density_field(m, grid)
    fld = mk.solve_backward_committor(m, rho, mk.HalfSpace(0, -2.0, -1),
                                      mk.HalfSpace(0, 2.0, +1), grid)
    mset, meshes = mk.committor_milestones(fld, [0.7, 0.5, 0.3])
    kern = estimate_kernel(m, mset, meshes, samples_per_bin=400, dt=1e-3,
                           rng=mk.RngStream(45, 0))
    # row stochastic by construction, zero mass on the source milestone
    off = kern.global_offsets()
    for i in range(3):
        assert kern.nu[i].sum() == pytest.approx(1.0)
        assert kern.nu[i][0, off[i]:off[i + 1]].sum() == 0.0
        assert kern.tau[i][0] > 0
    # interior milestone: jump probabilities near the analytic values
    p1 = kern.p_rows(1)[0]
    se = np.sqrt(0.25 / 400)
    q = analytic_q(mset.levels)
    assert abs(p1[0] - q[1, 0]) < 4 * se
    assert abs(p1[2] - q[1, 2]) < 4 * se
    assert kern.censored_fraction < 1e-3


def _synthetic_chain(rng, n_events, levels, mu_scale, replicas):
    """Vectorized synthetic Markov index chains with (i,j)-dependent lags."""
    q = analytic_q(levels)
    n = len(levels)
    q_down = np.array([q[i, i - 1] if i > 0 else 0.0 for i in range(n)])
    states = rng.integers(0, n, replicas)
    idx = np.empty((n_events, replicas), dtype=np.int64)
    lag = np.empty((n_events - 1, replicas))
    idx[0] = states
    for k in range(1, n_events):
        u = rng.random(replicas)
        down = u < q_down[idx[k - 1]]
        idx[k] = np.where(down, idx[k - 1] - 1, idx[k - 1] + 1)
        mean = mu_scale[idx[k - 1], idx[k]]
        lag[k - 1] = rng.exponential(mean)
    chains = []
    for r in range(replicas):
        times = np.concatenate([[0.0], np.cumsum(lag[:, r])])
        chains.append(CoarseChain(idx[:, r], times, np.zeros((n_events, 1)),
                                  total_time=times[-1]))
    return chains


def test_memory_diagnostic_markov_null():
    rng = np.random.default_rng(7)
    levels = np.array([0.9, 0.65, 0.4, 0.15])
    mu = rng.uniform(0.5, 2.0, size=(4, 4))
    chains = _synthetic_chain(rng, 20_000, levels, mu, replicas=10)
    pvals, zs = [], []
    for chain in chains:
        diag = memory_diagnostic(chain)
        assert not diag.rejected(alpha=1e-3)
        pvals.extend(c.p_value for c in diag.cells)
        zs.extend(abs(c.z) for c in diag.lag_cells)
    pvals = np.asarray(pvals)
    # p-values roughly uniform under the null
    assert abs((pvals < 0.5).mean() - 0.5) < 0.2
    assert max(zs) < 5.0


def test_memory_diagnostic_detects_second_order_dependence():
    # lag means that depend on the previous index violate memorylessness
    rng = np.random.default_rng(8)
    levels = np.array([0.9, 0.6, 0.3])
    q = analytic_q(levels)
    n_events = 20_000
    idx = np.empty(n_events, dtype=np.int64)
    idx[0] = 1
    for k in range(1, n_events):
        idx[k] = idx[k - 1] - 1 if rng.random() < q[idx[k - 1], max(idx[k - 1] - 1, 0)] \
            else idx[k - 1] + 1
    lags = rng.exponential(1.0, n_events - 1)
    # lag of the (n -> n+1) jump tripled whenever the index before n was 0
    lags[1:] *= np.where(idx[:-2] == 0, 3.0, 1.0)
    chain = CoarseChain(idx, np.concatenate([[0.0], np.cumsum(lags)]),
                        np.zeros((n_events, 1)), total_time=float(np.sum(lags)))
    diag = memory_diagnostic(chain)
    assert diag.max_lag_z() > 6.0


def test_memory_diagnostic_requires_length():
    with pytest.raises(ValueError):
        memory_diagnostic(_chain_from([0, 1], [1.0]))
