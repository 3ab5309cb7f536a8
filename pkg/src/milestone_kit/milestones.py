"""Milestone geometry as nested level sets and the coarse-grained chain.

Milestones are kept implicit as (level function f, strictly decreasing levels
z_0 > ... > z_N); index 0 is the highest level. Trajectory processing needs
only f values, so crossing detection never touches a mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from . import engine
from .grids import Grid
from .rng import RngStream


class LevelFunction:
    """Scalar field with a gradient; subclasses pack themselves for the kernels."""

    fcode: Optional[int] = None   # None: python engine only

    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points) -> np.ndarray:
        raise NotImplementedError

    def packed(self):
        raise NotImplementedError

    def grad_bound_sq(self) -> float:
        """Upper bound on |grad f|^2, used to screen bridge touch tests."""
        return np.inf

    # Scalar entry points shared by both engines (identical arithmetic).
    def f_single(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.fcode is not None:
            fpar, vals, gxa, gya = self.packed()
            return float(K._feval(self.fcode, fpar, vals, x.size,
                                  x[0], x[1] if x.size == 2 else 0.0))
        return float(self(x[None, :])[0])

    def grad_single(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.fcode is not None:
            fpar, vals, gxa, gya = self.packed()
            gx, gy = K._geval(self.fcode, fpar, gxa, gya, x.size,
                              x[0], x[1] if x.size == 2 else 0.0)
            return np.array([gx, gy])[:x.size]
        return np.asarray(self.gradient(x[None, :]), dtype=float)[0]


class LinearLevel(LevelFunction):
    """f(x) = coeffs . x + offset; exact planar milestones."""

    fcode = K.F_LIN

    def __init__(self, coeffs, offset: float = 0.0):
        self.coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
        self.offset = float(offset)
        if self.coeffs.size not in (1, 2):
            raise ValueError("only 1D and 2D level functions are supported")
        if not np.any(self.coeffs != 0.0):
            raise ValueError("zero gradient")
        c = np.zeros(2)
        c[:self.coeffs.size] = self.coeffs
        self._fpar = np.array([c[0], c[1], self.offset])
        self._dummy = np.zeros((2, 2))

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.coeffs + self.offset

    def gradient(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.broadcast_to(self.coeffs, pts.shape).copy()

    def packed(self):
        return self._fpar, self._dummy, self._dummy, self._dummy

    def grad_bound_sq(self) -> float:
        return float(self.coeffs @ self.coeffs)

    def point_at(self, z: float) -> np.ndarray:
        """A point on the level set {f = z} (minimum-norm solution)."""
        c2 = float(self.coeffs @ self.coeffs)
        return (z - self.offset) / c2 * self.coeffs


class GridLevel(LevelFunction):
    """Multilinear interpolant of a nodal field, clamped outside the box.

    The gradient interpolates precomputed central-difference node gradients,
    so it is continuous across cells.
    """

    fcode = K.F_GRID

    def __init__(self, grid: Grid, values: np.ndarray):
        self.grid = grid
        self.values = np.ascontiguousarray(values, dtype=float).reshape(grid.shape)
        grads = grid.gradient(self.values)
        if grid.dim == 1:
            self._vals2 = self.values[:, None].copy()
            self._gx2 = grads[0][:, None].copy()
            self._gy2 = np.zeros_like(self._vals2)
            self._fpar = np.array([grid.lo[0], grid.spacing[0], 0.0, 1.0])
        else:
            self._vals2 = self.values
            self._gx2 = grads[0]
            self._gy2 = grads[1]
            self._fpar = np.array([grid.lo[0], grid.spacing[0],
                                   grid.lo[1], grid.spacing[1]])
        self._grads = grads

    def __call__(self, points):
        return np.atleast_1d(self.grid.interpolate(self.values, points))

    def gradient(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.column_stack([self.grid.interpolate(g, pts) for g in self._grads])

    def packed(self):
        return self._fpar, self._vals2, self._gx2, self._gy2

    def grad_bound_sq(self) -> float:
        # bilinear interpolation is a convex combination of node values
        return float(np.max(self._gx2 ** 2) + np.max(self._gy2 ** 2))


@dataclass(frozen=True)
class CellRegion:
    """The band between the neighbors of milestone i (one-sided at the ends)."""

    index: int
    f_lo: float
    f_hi: float
    local_indices: tuple[int, ...]   # global milestone indices of the local set


@dataclass
class MilestoneSet:
    """A level function together with strictly decreasing milestone levels."""

    level_function: LevelFunction
    levels: np.ndarray
    representative_points: Optional[list] = None   # one point on each milestone

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float).reshape(-1)
        if self.levels.size < 1:
            raise ValueError("need at least one level")
        if self.levels.size > 1 and not np.all(np.diff(self.levels) < 0):
            raise ValueError("levels must be strictly decreasing")

    @property
    def n(self) -> int:
        return self.levels.size

    @property
    def index_set(self) -> range:
        return range(self.levels.size)

    def cell(self, i: int) -> CellRegion:
        """Region between the neighboring milestones of M_i; the outer side of
        an end cell is unbounded (the sampling box confines it in practice)."""
        if not 0 <= i < self.n:
            raise IndexError(f"milestone index {i} outside 0..{self.n - 1}")
        f_hi = np.inf if i == 0 else float(self.levels[i - 1])
        f_lo = -np.inf if i == self.n - 1 else float(self.levels[i + 1])
        local = tuple(j for j in (i - 1, i, i + 1) if 0 <= j < self.n)
        return CellRegion(index=i, f_lo=f_lo, f_hi=f_hi, local_indices=local)

    def restrict(self, subset: Sequence[int]) -> "MilestoneSet":
        """Milestone set keeping only the selected indices (order preserved)."""
        subset = list(subset)
        if not subset:
            raise ValueError("subset must be nonempty")
        if sorted(subset) != subset:
            raise ValueError("subset must be sorted")
        pts = None
        if self.representative_points is not None:
            pts = [self.representative_points[i] for i in subset]
        return MilestoneSet(self.level_function, self.levels[subset],
                            representative_points=pts)

    def point_on(self, i: int) -> np.ndarray:
        """A representative point on milestone i."""
        if self.representative_points is not None:
            return np.asarray(self.representative_points[i], dtype=float)
        lf = self.level_function
        if isinstance(lf, LinearLevel):
            return lf.point_at(float(self.levels[i]))
        raise ValueError("no representative points stored for this milestone set")

    def check_regularity(self, points, threshold: float = 1e-8) -> None:
        g = np.atleast_2d(self.level_function.gradient(points))
        norms = np.linalg.norm(g, axis=1)
        if norms.min() <= threshold:
            raise ValueError("level function has vanishing gradient on a milestone")


def linear_milestones(points: Sequence[float], axis: int = 0, dim: int = 1) -> MilestoneSet:
    """Planar milestones at the given coordinates, ascending along the axis.

    Index 0 is the smallest coordinate. Internally f = -x[axis], which makes
    the stored levels strictly decreasing as required.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size > 1 and not np.all(np.diff(pts) > 0):
        raise ValueError("milestone coordinates must be strictly increasing")
    coeffs = np.zeros(dim)
    coeffs[axis] = -1.0
    lf = LinearLevel(coeffs)
    reps = []
    for p in pts:
        r = np.zeros(dim)
        r[axis] = p
        reps.append(r)
    return MilestoneSet(lf, -pts, representative_points=reps)


@dataclass
class CoarseChain:
    """Recorded milestone events: indices, jump times, and hit positions."""

    indices: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    total_time: float = np.nan    # simulated time, >= times[-1] - start

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if len(self.indices) != len(self.times):
            raise ValueError("indices and times differ in length")
        if len(self.times) > 1:
            if not np.all(np.diff(self.times) > 0):
                raise ValueError("jump times must be strictly increasing")
            if np.any(self.indices[1:] == self.indices[:-1]):
                raise ValueError("consecutive events must change milestone")

    def __len__(self):
        return len(self.indices)

    @property
    def lags(self) -> np.ndarray:
        return np.diff(self.times)

    def nearest_neighbor_fraction(self) -> float:
        """Fraction of jumps with |delta index| == 1 (should be 1.0)."""
        if len(self.indices) < 2:
            return 1.0
        return float(np.mean(np.abs(np.diff(self.indices)) == 1))


def assign_index(f_value: float, previous_index: Optional[int], levels) -> Optional[int]:
    """Index-process update for a single f sample.

    Returns the index of the last level reached given that the trajectory was
    assigned to ``previous_index`` (None before the first hit). Re-touching
    the previous level does not change the assignment.
    """
    levels = np.asarray(levels, dtype=float)
    if previous_index is None:
        hits = np.nonzero(levels == f_value)[0]
        return int(hits[0]) if hits.size else None
    z_prev = levels[previous_index]
    if f_value > z_prev:
        # moving up: last level reached is the largest one <= f_value
        k = int(np.searchsorted(-levels, -f_value))
        if k < previous_index:
            return k
    elif f_value < z_prev:
        # moving down: last level reached is the smallest one >= f_value
        k = int(np.searchsorted(-levels, -f_value, side="right")) - 1
        if k > previous_index:
            return k
    return previous_index


def extract_chain(model, mset: MilestoneSet, initial, total_time: float,
                  dt: float, rng: RngStream, engine_name: str = "auto") -> CoarseChain:
    """Simulate from ``initial`` for ``total_time`` and record milestone hits."""
    res = engine.run_chain(model, mset.level_function, mset.levels,
                           np.asarray(initial, dtype=float), dt=dt, rng=rng,
                           tmax=total_time, engine=engine_name)
    return CoarseChain(indices=res.idx, times=res.times, positions=res.positions,
                       total_time=res.time)
