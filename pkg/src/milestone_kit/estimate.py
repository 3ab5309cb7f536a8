"""Estimators for everything milestoning consumes.

Transition probabilities and mean residence times come from the ergodic
counting estimators p_ij = N_ij / N_i, t_i = R_i / N_i, fed either by one
long trajectory or by reflective-cell runs that sample only their own row.
Exact milestoning additionally needs binned hit-point kernels, estimated by
short runs launched on the milestones.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.stats import chi2 as chi2_dist

from . import _kernels as K
from . import engine as _eng
from .committor import LevelSetMesh, MilestoneDensity
from .milestones import CoarseChain, MilestoneSet
from .rng import NS_CELL, NS_KERNEL, RngStream, substream

DEFAULT_HIT_CAP = 100_000


class ReducibleChainError(RuntimeError):
    def __init__(self, unreachable):
        super().__init__(f"index chain is reducible; states outside the main "
                         f"component: {sorted(unreachable)}")
        self.unreachable = sorted(unreachable)


@dataclass
class TransitionStats:
    """Sufficient statistics of the coarse chain.

    counts[i, j] is the number of i -> j transitions, lag_sums[i, j] the
    summed lags of those transitions. Residence time R_i is the row sum of
    lag_sums (time assigned to milestone i between events). Hits are the
    retained arrival positions per milestone, thinned to ``hit_cap`` by
    even striding in time order so merges stay deterministic.
    """

    n: int
    counts: np.ndarray
    lag_sums: np.ndarray
    lag_sumsq: np.ndarray
    hit_times: list
    hit_positions: list
    total_time: float = 0.0
    hit_cap: int = DEFAULT_HIT_CAP
    batches: list = field(default_factory=list)   # (counts, lag_sums) tuples

    @classmethod
    def empty(cls, n: int, dim: int = 1, hit_cap: int = DEFAULT_HIT_CAP):
        return cls(n=n, counts=np.zeros((n, n), dtype=np.int64),
                   lag_sums=np.zeros((n, n)), lag_sumsq=np.zeros((n, n)),
                   hit_times=[np.empty(0) for _ in range(n)],
                   hit_positions=[np.empty((0, dim)) for _ in range(n)],
                   total_time=0.0, hit_cap=hit_cap, batches=[])

    @classmethod
    def from_chain(cls, chain: CoarseChain, n: int,
                   rows: Optional[Sequence[int]] = None,
                   hit_cap: int = DEFAULT_HIT_CAP, n_batches: int = 10):
        """Accumulate counts, lags, and hit positions from one coarse chain.

        ``rows`` restricts accumulation to transitions leaving the listed
        milestones (used by cell sampling, which owns one row per cell);
        hits are then kept only for those same milestones.
        """
        dim = chain.positions.shape[1] if chain.positions.size else 1
        st = cls.empty(n, dim=dim, hit_cap=hit_cap)
        st.total_time = chain.total_time if np.isfinite(chain.total_time) else (
            float(chain.times[-1] - chain.times[0]) if len(chain) > 1 else 0.0)
        if len(chain) < 2:
            return st
        src = chain.indices[:-1]
        dst = chain.indices[1:]
        lag = chain.lags
        keep = np.ones(len(src), dtype=bool)
        if rows is not None:
            keep = np.isin(src, np.asarray(rows, dtype=np.int64))
        flat = src[keep] * n + dst[keep]
        np.add.at(st.counts.reshape(-1), flat, 1)
        np.add.at(st.lag_sums.reshape(-1), flat, lag[keep])
        np.add.at(st.lag_sumsq.reshape(-1), flat, lag[keep] ** 2)
        hit_rows = set(int(r) for r in rows) if rows is not None else None
        for i in range(n):
            if hit_rows is not None and i not in hit_rows:
                continue
            mask = chain.indices == i
            st.hit_times[i] = chain.times[mask]
            st.hit_positions[i] = chain.positions[mask]
        st._thin_hits()
        # contiguous event batches for batch-means standard errors
        edges = np.linspace(0, len(src[keep]), n_batches + 1).astype(int)
        s, d, a = src[keep], dst[keep], lag[keep]
        for b in range(n_batches):
            sl = slice(edges[b], edges[b + 1])
            c = np.zeros((n, n), dtype=np.int64)
            ls = np.zeros((n, n))
            fl = s[sl] * n + d[sl]
            np.add.at(c.reshape(-1), fl, 1)
            np.add.at(ls.reshape(-1), fl, a[sl])
            st.batches.append((c, ls))
        return st

    def _thin_hits(self):
        for i in range(self.n):
            m = len(self.hit_times[i])
            if m > self.hit_cap:
                pick = np.linspace(0, m - 1, self.hit_cap).astype(int)
                self.hit_times[i] = self.hit_times[i][pick]
                self.hit_positions[i] = self.hit_positions[i][pick]

    def merge(self, other: "TransitionStats") -> "TransitionStats":
        """Pooled statistics; hit reservoirs are merged in time order, so the
        result does not depend on the merge order."""
        if self.n != other.n:
            raise ValueError("cannot merge stats over different index sets")
        out = TransitionStats(
            n=self.n, counts=self.counts + other.counts,
            lag_sums=self.lag_sums + other.lag_sums,
            lag_sumsq=self.lag_sumsq + other.lag_sumsq,
            hit_times=[], hit_positions=[],
            total_time=self.total_time + other.total_time,
            hit_cap=self.hit_cap,
            batches=self.batches + other.batches)
        for i in range(self.n):
            t = np.concatenate([self.hit_times[i], other.hit_times[i]])
            p = np.vstack([np.atleast_2d(self.hit_positions[i]),
                           np.atleast_2d(other.hit_positions[i])]) \
                if t.size else self.hit_positions[i]
            order = np.argsort(t, kind="stable")
            out.hit_times.append(t[order])
            out.hit_positions.append(p[order] if t.size else p)
        out._thin_hits()
        return out

    def __add__(self, other):
        return self.merge(other)

    # ---- estimators -----------------------------------------------------

    @property
    def departures(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def arrivals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def residence(self) -> np.ndarray:
        return self.lag_sums.sum(axis=1)

    def p_hat(self) -> np.ndarray:
        n_i = self.departures.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts / n_i[:, None]
        return np.nan_to_num(p)

    def p_stderr(self) -> np.ndarray:
        n_i = np.maximum(self.departures.astype(float), 1.0)
        p = self.p_hat()
        return np.sqrt(p * (1.0 - p) / n_i[:, None])

    def t_hat(self) -> np.ndarray:
        n_i = self.departures.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = self.residence / n_i
        return np.nan_to_num(t)

    def t_stderr(self) -> np.ndarray:
        """Batch-means standard error of t_i (lags along a trajectory are
        correlated, so the naive iid formula is not used)."""
        out = np.zeros(self.n)
        for i in range(self.n):
            means = []
            for c, ls in self.batches:
                ni = c[i].sum()
                if ni > 0:
                    means.append(ls[i].sum() / ni)
            if len(means) > 1:
                out[i] = np.std(means, ddof=1) / np.sqrt(len(means))
        return out

    def pair_t_hat(self) -> np.ndarray:
        """Mean lag per ordered transition (i, j)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            t = self.lag_sums / self.counts
        return np.nan_to_num(t)

    def empirical_pi(self) -> np.ndarray:
        """Visit frequencies of the index chain (fraction of departures)."""
        n_i = self.departures.astype(float)
        return n_i / n_i.sum() if n_i.sum() > 0 else n_i

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "p_hat": self.p_hat().tolist(),
            "p_stderr": self.p_stderr().tolist(),
            "t_hat": self.t_hat().tolist(),
            "t_stderr": self.t_stderr().tolist(),
            "residence": self.residence.tolist(),
            "departures": self.departures.tolist(),
            "pi_hat": self.empirical_pi().tolist(),
            "total_time": self.total_time,
        }


# ---------------------------------------------------------------------------
# Long-trajectory and cell-parallel sampling
# ---------------------------------------------------------------------------

def _warn_undersampled(stats: TransitionStats, floor: int = 100):
    low = np.nonzero(stats.departures < floor)[0]
    if low.size:
        warnings.warn(f"undersampled milestones (fewer than {floor} departures): "
                      f"{low.tolist()}", stacklevel=3)


def estimate_long(model, mset: MilestoneSet, total_time: float, dt: float,
                  rng: RngStream, initial=None, engine: str = "auto",
                  hit_cap: int = DEFAULT_HIT_CAP, n_batches: int = 10,
                  return_chain: bool = False):
    """One unbiased trajectory of length ``total_time``, folded into stats."""
    if initial is None:
        initial = mset.point_on(mset.n // 2)
    res = _eng.run_chain(model, mset.level_function, mset.levels,
                         np.asarray(initial, dtype=float), dt=dt, rng=rng,
                         tmax=total_time, engine=engine)
    chain = CoarseChain(res.idx, res.times, res.positions, total_time=res.time)
    stats = TransitionStats.from_chain(chain, mset.n, hit_cap=hit_cap,
                                       n_batches=n_batches)
    _warn_undersampled(stats)
    return (stats, chain) if return_chain else stats


def _run_one_cell(args):
    (model, mset, i, per_cell_transitions, dt, rng, burn_in_events,
     hit_cap, n_batches, engine, max_steps) = args
    cell = mset.cell(i)
    local = list(cell.local_indices)
    li = local.index(i)
    sub = mset.restrict(local)
    start = mset.point_on(i)
    pos = np.asarray(start, dtype=float)
    t0 = 0.0
    prev = li
    idx_parts, t_parts, p_parts = [], [], []
    needed = per_cell_transitions + burn_in_events
    target_events = 2 * needed + 8
    while True:
        res = _eng.run_chain(model, sub.level_function, sub.levels, pos,
                             dt=dt, rng=rng, t0=t0, prev=prev,
                             ev_target=target_events,
                             reflect=(cell.f_lo, cell.f_hi),
                             max_steps=max_steps, engine=engine)
        idx_parts.append(res.idx)
        t_parts.append(res.times)
        p_parts.append(res.positions)
        n_dep = sum(int(np.sum(ix[:-1] == li)) for ix in [np.concatenate(idx_parts)])
        if n_dep >= needed or res.status != K.COUNT_REACHED:
            break
        pos, t0, prev = res.position, res.time, res.prev_index
        target_events += needed
    idx = np.concatenate(idx_parts)
    times = np.concatenate(t_parts)
    positions = np.vstack(p_parts)
    # burn-in: discard the first events so the start point bias washes out
    b = min(burn_in_events, max(len(idx) - 2, 0))
    chain = CoarseChain(np.asarray([local[k] for k in idx[b:]], dtype=np.int64),
                        times[b:], positions[b:],
                        total_time=times[-1] - times[b] if len(idx) > b else 0.0)
    return TransitionStats.from_chain(chain, mset.n, rows=[i], hit_cap=hit_cap,
                                      n_batches=n_batches)


def estimate_cells(model, mset: MilestoneSet, per_cell_transitions: int,
                   dt: float, rng: RngStream, burn_in_events: int = 100,
                   workers: int = 1, hit_cap: int = DEFAULT_HIT_CAP,
                   n_batches: int = 10, engine: str = "auto",
                   max_steps: int = 2**62) -> TransitionStats:
    """Reflective-cell sampling: one confined run per cell, merged row-wise.

    Each cell i simulates in the band between its neighboring milestones with
    mirror reflection, builds the local chain against {M_{i-1}, M_i, M_{i+1}},
    and contributes only row i of the statistics. Workers get substreams keyed
    by cell index, so the merged result is independent of scheduling.
    """
    jobs = [(model, mset, i, per_cell_transitions, dt,
             substream(rng, NS_CELL, i), burn_in_events, hit_cap, n_batches,
             engine, max_steps) for i in range(mset.n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_one_cell, jobs))
    else:
        parts = [_run_one_cell(job) for job in jobs]
    out = parts[0]
    for p in parts[1:]:
        out = out.merge(p)
    _warn_undersampled(out, floor=min(100, per_cell_transitions))
    return out


def stationary_index(p: np.ndarray) -> np.ndarray:
    """Stationary distribution of the index chain: pi = pi P, sum pi = 1."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if p.shape != (n, n):
        raise ValueError("p must be square")
    visited = p.sum(axis=1) > 0
    if not np.allclose(p[visited].sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("p must be row-stochastic on visited rows")
    ncomp, labels = connected_components(sp.csr_matrix(p > 0), directed=True,
                                         connection="strong")
    if ncomp > 1:
        main = np.bincount(labels).argmax()
        raise ReducibleChainError(np.nonzero(labels != main)[0].tolist())
    a = (p.T - np.eye(n)).copy()
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(a, rhs)
    if pi.min() < -1e-10:
        raise ValueError("stationary solve produced negative mass")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


# ---------------------------------------------------------------------------
# Hit histograms
# ---------------------------------------------------------------------------

@dataclass
class HitHistogram:
    """Normalized arc-length histogram of hit positions on one milestone."""

    edges: np.ndarray
    masses: np.ndarray        # probability mass per bin, sums to 1
    arcs: np.ndarray          # retained projected samples

    @property
    def density(self) -> np.ndarray:
        return self.masses / np.diff(self.edges)


def hit_histogram(stats: TransitionStats, i: int, mesh: LevelSetMesh,
                  bins: int = 50, min_samples: int = 500) -> HitHistogram:
    """Project retained hits of milestone i onto the mesh arc length and bin."""
    pos = np.atleast_2d(stats.hit_positions[i])
    if len(pos) < min_samples:
        raise ValueError(f"only {len(pos)} hit positions retained for milestone "
                         f"{i}; need at least {min_samples}")
    if mesh.dim == 1:
        return HitHistogram(edges=np.array([0.0, 1.0]), masses=np.array([1.0]),
                            arcs=np.zeros(len(pos)))
    arcs = mesh.project_arc(pos)
    total = mesh.arclength[-1]
    edges = np.linspace(0.0, total, bins + 1)
    masses, _ = np.histogram(arcs, bins=edges)
    return HitHistogram(edges=edges, masses=masses / masses.sum(), arcs=arcs)


def ks_distance(density: MilestoneDensity, arcs: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between hit samples and a milestone density."""
    arcs = np.sort(np.asarray(arcs, dtype=float))
    m = len(arcs)
    cdf = density.cdf_at_arc(arcs)
    ecdf_hi = np.arange(1, m + 1) / m
    ecdf_lo = np.arange(0, m) / m
    return float(np.max(np.maximum(np.abs(ecdf_hi - cdf), np.abs(cdf - ecdf_lo))))


# ---------------------------------------------------------------------------
# Exact-milestoning kernel estimation
# ---------------------------------------------------------------------------

@dataclass
class KernelEstimate:
    """Binned first-hitting kernel and residence times.

    Bin (i, b) covers one arc-length interval of milestone i. ``nu[i]`` has
    one row per source bin and one column per global bin; rows sum to one
    over nonempty rows and assign zero mass to the source milestone.
    """

    n: int
    edges: list            # per milestone: bin-edge array in arc length
    tau: list              # per milestone: mean elapsed per bin
    tau_se: list
    tau_counts: list
    nu: list               # per milestone: (n_bins_i, total_bins)
    start_weights: list    # per milestone: weight per bin (mode dependent)
    censored_fraction: float
    mode: str
    samples: Optional[list] = None   # per milestone: (bin, elapsed, dest col) rows

    @property
    def bins_per_milestone(self) -> list:
        return [len(e) - 1 for e in self.edges]

    def global_offsets(self) -> np.ndarray:
        nb = self.bins_per_milestone
        return np.concatenate([[0], np.cumsum(nb)])

    def p_rows(self, i: int) -> np.ndarray:
        """P_{i,j}(bin): probability the next milestone is j, per source bin."""
        off = self.global_offsets()
        nb = self.bins_per_milestone
        out = np.zeros((nb[i], self.n))
        for j in range(self.n):
            out[:, j] = self.nu[i][:, off[j]:off[j + 1]].sum(axis=1)
        return out


def _bin_centers(edges):
    return 0.5 * (edges[:-1] + edges[1:])


def estimate_kernel(model, mset: MilestoneSet, meshes: Sequence[LevelSetMesh],
                    samples_per_bin: int, dt: float, rng: RngStream,
                    bins: Optional[int] = None, mode: str = "centers",
                    stats: Optional[TransitionStats] = None,
                    max_time: float = np.inf, engine: str = "auto") -> KernelEstimate:
    """Estimate the binned hit kernel nu and residence times tau.

    Trajectories start from bin centers (default) or, in "empirical-start"
    mode, from retained hit positions inside each bin, and run until they hit
    a different milestone. Arrivals are binned on the target mesh.
    """
    if mode not in ("centers", "empirical"):
        raise ValueError("mode must be 'centers' or 'empirical'")
    if mode == "empirical" and stats is None:
        raise ValueError("empirical-start mode needs a TransitionStats with hits")
    n = mset.n
    if bins is None:
        bins = 1 if model.dim == 1 else 20
    edges = []
    for mesh in meshes:
        total = mesh.arclength[-1] if mesh.dim == 2 else 1.0
        nb = bins if mesh.dim == 2 else 1
        edges.append(np.linspace(0.0, total, nb + 1))
    offsets = np.concatenate([[0], np.cumsum([len(e) - 1 for e in edges])])
    total_bins = int(offsets[-1])
    tau_sum = [np.zeros(len(e) - 1) for e in edges]
    tau_sq = [np.zeros(len(e) - 1) for e in edges]
    counts = [np.zeros(len(e) - 1) for e in edges]
    nu_counts = [np.zeros((len(e) - 1, total_bins)) for e in edges]
    weights = [np.ones(len(e) - 1) / (len(e) - 1) for e in edges]
    samples = [[] for _ in range(n)]
    n_censored = 0
    n_runs = 0
    stream_idx = 0
    for i in range(n):
        mesh = meshes[i]
        nb = len(edges[i]) - 1
        if mode == "empirical":
            arcs_all = mesh.project_arc(np.atleast_2d(stats.hit_positions[i])) \
                if mesh.dim == 2 else np.zeros(len(stats.hit_positions[i]))
            w = np.histogram(arcs_all, bins=edges[i])[0].astype(float)
            weights[i] = w / w.sum() if w.sum() else weights[i]
        for b in range(nb):
            sub = substream(rng, NS_KERNEL, stream_idx)
            stream_idx += 1
            if mode == "centers" or mesh.dim == 1:
                starts = np.repeat(mesh.point_at_arc(_bin_centers(edges[i])[b:b + 1])
                                   if mesh.dim == 2 else mesh.points[:1],
                                   samples_per_bin, axis=0)
            else:
                in_bin = np.nonzero((arcs_all >= edges[i][b])
                                    & (arcs_all < edges[i][b + 1]))[0]
                if in_bin.size == 0:
                    continue
                pick = in_bin[sub.integers(0, in_bin.size, samples_per_bin)]
                starts = np.atleast_2d(stats.hit_positions[i])[pick]
            for s in range(samples_per_bin):
                n_runs += 1
                res = _eng.run_chain(model, mset.level_function, mset.levels,
                                     starts[s], dt=dt, rng=sub, prev=i,
                                     ev_target=1, tmax=max_time, engine=engine)
                if len(res.idx) == 0:
                    n_censored += 1
                    continue
                j = int(res.idx[0])
                elapsed = float(res.times[0])
                if meshes[j].dim == 2:
                    arc = float(meshes[j].project_arc(res.positions[:1])[0])
                    bj = min(int(np.searchsorted(edges[j], arc, side="right")) - 1,
                             len(edges[j]) - 2)
                    bj = max(bj, 0)
                else:
                    bj = 0
                tau_sum[i][b] += elapsed
                tau_sq[i][b] += elapsed ** 2
                counts[i][b] += 1
                nu_counts[i][b, offsets[j] + bj] += 1
                samples[i].append((b, elapsed, offsets[j] + bj))
    tau, tau_se, nu = [], [], []
    for i in range(n):
        with np.errstate(invalid="ignore", divide="ignore"):
            m = tau_sum[i] / counts[i]
            var = tau_sq[i] / counts[i] - m ** 2
            se = np.sqrt(np.maximum(var, 0.0) / np.maximum(counts[i], 1.0))
            rows = nu_counts[i] / nu_counts[i].sum(axis=1, keepdims=True)
        tau.append(np.nan_to_num(m))
        tau_se.append(np.nan_to_num(se))
        nu.append(np.nan_to_num(rows))
        empty = np.nonzero(counts[i] == 0)[0]
        if empty.size:
            warnings.warn(f"milestone {i}: empty kernel bins {empty.tolist()}",
                          stacklevel=2)
    return KernelEstimate(n=n, edges=edges, tau=tau, tau_se=tau_se,
                          tau_counts=counts, nu=nu, start_weights=weights,
                          censored_fraction=n_censored / max(n_runs, 1),
                          mode=mode,
                          samples=[np.asarray(rows).reshape(-1, 3)
                                   for rows in samples])


# ---------------------------------------------------------------------------
# Markovianity / memorylessness diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MemoryCell:
    prev: int
    src: int
    chi2: float
    dof: int
    p_value: float


@dataclass
class LagCell:
    prev: int
    src: int
    dst: int
    mean: float
    pooled_mean: float
    z: float
    count: int


@dataclass
class MemoryDiagnostic:
    cells: list
    lag_cells: list
    excluded: list

    def min_p_value(self) -> float:
        return min((c.p_value for c in self.cells), default=1.0)

    def max_lag_z(self) -> float:
        return max((abs(c.z) for c in self.lag_cells), default=0.0)

    def rejected(self, alpha: float = 1e-3) -> list:
        """Cells rejected at the Bonferroni-corrected level alpha."""
        m = max(len(self.cells), 1)
        return [c for c in self.cells if c.p_value < alpha / m]


def memory_diagnostic(chain: CoarseChain, min_count: int = 25) -> MemoryDiagnostic:
    """Second-order diagnostics of the index chain.

    For each (prev, src) cell, a two-sample chi-square compares the next-index
    distribution after that history against the distribution after all other
    histories. For each (prev, src, dst) triple, the conditional lag mean is
    compared to the pooled (src, dst) mean with an overlap-corrected variance.
    Under an invariant family of milestone distributions both show no memory.
    """
    if len(chain) < 3:
        raise ValueError("chain too short for a memory diagnostic")
    n = int(chain.indices.max()) + 1
    prev = chain.indices[:-2]
    src = chain.indices[1:-1]
    dst = chain.indices[2:]
    lag = chain.lags[1:]
    code = (prev * n + src) * n + dst
    cnt = np.zeros(n ** 3)
    sums = np.zeros(n ** 3)
    sq = np.zeros(n ** 3)
    np.add.at(cnt, code, 1)
    np.add.at(sums, code, lag)
    np.add.at(sq, code, lag ** 2)
    cnt = cnt.reshape(n, n, n)
    sums = sums.reshape(n, n, n)
    sq = sq.reshape(n, n, n)
    cells, lag_cells, excluded = [], [], []
    for i in range(n):
        table = cnt[:, i, :]
        js = np.nonzero(table.sum(axis=0) > 0)[0]
        ks = np.nonzero(table.sum(axis=1) > 0)[0]
        if len(js) < 2:
            for k in ks:
                excluded.append((int(k), i, "single successor"))
            continue
        for k in ks:
            n1 = table[k, js]
            n2 = table[ks, :][:, js].sum(axis=0) - n1
            if n1.sum() < min_count or n2.sum() < min_count:
                excluded.append((int(k), i, "insufficient counts"))
                continue
            tot = n1 + n2
            big = n1.sum() + n2.sum()
            stat = 0.0
            for g, ng in ((n1, n1.sum()), (n2, n2.sum())):
                exp = ng * tot / big
                stat += float(np.sum((g - exp) ** 2 / np.where(exp > 0, exp, 1.0)))
            dof = len(js) - 1
            cells.append(MemoryCell(prev=int(k), src=int(i), chi2=stat, dof=dof,
                                    p_value=float(chi2_dist.sf(stat, dof))))
        # lag-mean memorylessness per (prev, src, dst)
        for j in js:
            c_kj = cnt[:, i, j]
            tot_c = c_kj.sum()
            if tot_c == 0:
                continue
            pooled_mean = sums[:, i, j].sum() / tot_c
            with np.errstate(invalid="ignore", divide="ignore"):
                mean_k = sums[:, i, j] / c_kj
                var_k = sq[:, i, j] / c_kj - mean_k ** 2
            for k in ks:
                if c_kj[k] < min_count:
                    continue
                w = c_kj / tot_c
                var_terms = np.where(c_kj > 0, np.nan_to_num(var_k) / np.maximum(c_kj, 1), 0.0)
                v = (1.0 - w[k]) ** 2 * var_terms[k]
                v += float(np.sum((w ** 2 * var_terms)[np.arange(n) != k]))
                if v <= 0:
                    continue
                z = (mean_k[k] - pooled_mean) / np.sqrt(v)
                lag_cells.append(LagCell(prev=int(k), src=int(i), dst=int(j),
                                         mean=float(mean_k[k]),
                                         pooled_mean=float(pooled_mean),
                                         z=float(z), count=int(c_kj[k])))
    return MemoryDiagnostic(cells=cells, lag_cells=lag_cells, excluded=excluded)
