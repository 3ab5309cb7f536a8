"""Backward/forward committor fields on grids, isocommittor milestones,
invariant-family densities, and the analytic transition probabilities.

Both committor problems are discretized from the same divergence form,

    rho * L  q = div(rho a grad q) + J . grad q,
    rho * L+ q = div(rho a grad q) - J . grad q,

where J = rho b - a grad rho is the stationary probability current. Under
detailed balance J vanishes identically, which makes the two discrete
operators equal and the identity q_backward = 1 - q_forward exact at solver
precision. Only diagonal diffusion tensors are discretized (the built-in
models all have constant scalar a).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from skimage.measure import find_contours

from .grids import Grid, write_binary_field, write_csv_field
from .milestones import GridLevel, MilestoneSet
from .model import DensityField, DiffusionModel, invariant_density, solve_invariant_density

__all__ = [
    "Grid", "Ball", "HalfSpace", "CommittorField", "LevelSetMesh",
    "MilestoneDensity", "CommittorSolveError", "IrregularLevelError",
    "DisconnectedMilestoneError", "density_field", "solve_backward_committor",
    "solve_forward_committor", "extract_level_set", "surface_integral_Z",
    "milestone_density", "analytic_q", "committor_milestones",
]


class CommittorSolveError(RuntimeError):
    pass


class IrregularLevelError(RuntimeError):
    """The committor gradient vanishes somewhere on the requested level."""


class DisconnectedMilestoneError(RuntimeError):
    """The requested level set has more than one connected component."""


# ---------------------------------------------------------------------------
# A/B region predicates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(pts - c, axis=1) <= self.radius


@dataclass(frozen=True)
class HalfSpace:
    """Points with x[axis] <= threshold (side=-1) or >= threshold (side=+1)."""

    axis: int
    threshold: float
    side: int

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.side < 0:
            return pts[:, self.axis] <= self.threshold
        return pts[:, self.axis] >= self.threshold


def density_field(model: DiffusionModel, grid: Grid) -> DensityField:
    """Invariant density on the grid: analytic for reversible models,
    otherwise the discrete stationary solve."""
    if model.reversible and model.potential is not None:
        vals = np.exp(-model.beta * model.potential(grid.nodes())).reshape(grid.shape)
        return DensityField(grid=grid, values=vals)
    if model.density is not None and model.density.grid == grid:
        return model.density
    return solve_invariant_density(model, grid)


# ---------------------------------------------------------------------------
# Committor solves
# ---------------------------------------------------------------------------

@dataclass
class CommittorField:
    """Nodal committor values in [0, 1] with Dirichlet sets A and B."""

    grid: Grid
    values: np.ndarray
    rho: DensityField
    a_mask: np.ndarray
    b_mask: np.ndarray
    direction: str            # "backward" or "forward"
    residual: float
    overshoot: float          # max distance of the raw solution outside [0,1]

    def __post_init__(self):
        self._grads = None

    def __call__(self, points):
        return self.grid.interpolate(self.values, points)

    def gradient_at(self, points) -> np.ndarray:
        if self._grads is None:
            self._grads = self.grid.gradient(self.values)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.column_stack([self.grid.interpolate(g, pts) for g in self._grads])
        return out if np.ndim(points) > 1 else out[0]

    def level_function(self) -> GridLevel:
        return GridLevel(self.grid, self.values)

    def to_csv(self, path):
        write_csv_field(path, self.grid, self.values, header="q")

    def to_binary(self, path):
        write_binary_field(path, self.grid, self.values)


def _nodal_current(model, rho_nodes, grid):
    """J = rho b - a grad rho on the nodes (identically zero if reversible)."""
    if model.reversible:
        return [np.zeros(grid.shape) for _ in range(grid.dim)]
    nodes = grid.nodes()
    b = np.asarray(model.drift(nodes), dtype=float)
    a = np.asarray(model.diffusion(nodes), dtype=float)
    grads = grid.gradient(rho_nodes)
    out = []
    for k in range(grid.dim):
        adg = np.zeros(len(nodes))
        for m in range(grid.dim):
            adg += a[:, k, m] * grads[m].reshape(-1)
        jk = rho_nodes.reshape(-1) * b[:, k] - adg
        out.append(jk.reshape(grid.shape))
    return out


def _solve_committor(model, rho, a_set, b_set, grid, sign, advection, dirichlet):
    nodes = grid.nodes()
    n = len(nodes)
    shape = grid.shape
    rho_nodes = rho.values if rho.grid == grid else \
        np.asarray(rho(nodes), dtype=float).reshape(shape)
    a_mask = np.asarray(a_set(nodes), dtype=bool).reshape(shape)
    b_mask = np.asarray(b_set(nodes), dtype=bool).reshape(shape)
    if not a_mask.any() or not b_mask.any():
        raise ValueError("A and B must each contain at least one grid node")
    if (a_mask & b_mask).any():
        raise ValueError("A and B must be disjoint")
    a_diag = np.asarray(model.diffusion(nodes), dtype=float)
    if grid.dim == 2 and np.abs(a_diag[:, 0, 1]).max() > 1e-14:
        raise NotImplementedError("off-diagonal diffusion tensors are not discretized")
    current = _nodal_current(model, rho_nodes, grid)
    rho_safe = np.maximum(rho_nodes, 1e-300)

    idx = np.arange(n).reshape(shape)
    fixed = a_mask | b_mask
    rows, cols, vals = [], [], []
    diag = np.zeros(shape)

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    for axis in range(grid.dim):
        h = grid.spacing[axis]
        w = rho_safe * a_diag[:, axis, axis].reshape(shape)
        sl_lo = tuple(slice(0, shape[axis] - 1) if k == axis else slice(None)
                      for k in range(grid.dim))
        sl_hi = tuple(slice(1, shape[axis]) if k == axis else slice(None)
                      for k in range(grid.dim))
        w_face = 0.5 * (w[sl_lo] + w[sl_hi])
        i_lo, i_hi = idx[sl_lo], idx[sl_hi]
        c_face = w_face / h**2
        # conservative diffusion: each interior face couples its two nodes
        add(i_lo, i_hi, c_face)
        add(i_hi, i_lo, c_face)
        np.add.at(diag, sl_lo, -c_face)
        np.add.at(diag, sl_hi, -c_face)
        # advection sign: -J.grad for the backward problem, +J.grad forward
        v = sign * current[axis]
        pe = np.abs(v) * h / np.maximum(2.0 * w, 1e-300)
        if advection == "centered":
            upwind = np.zeros(shape, dtype=bool)
        elif advection == "upwind":
            upwind = np.ones(shape, dtype=bool)
        elif advection == "auto":
            upwind = pe > 1.0
        else:
            raise ValueError(f"unknown advection scheme {advection!r}")
        interior = np.zeros(shape, dtype=bool)
        sl_int = tuple(slice(1, shape[axis] - 1) if k == axis else slice(None)
                       for k in range(grid.dim))
        interior[sl_int] = True       # no normal advection at no-flux edges
        cen = interior & ~upwind
        if cen.any():
            r = idx[cen]
            shift = np.zeros(grid.dim, dtype=int)
            shift[axis] = 1
            nb_p = idx[tuple((np.argwhere(cen) + shift).T)]
            nb_m = idx[tuple((np.argwhere(cen) - shift).T)]
            vv = v[cen] / (2.0 * h)
            add(r, nb_p, vv)
            add(r, nb_m, -vv)
        upw = interior & upwind
        if upw.any():
            r = idx[upw]
            shift = np.zeros(grid.dim, dtype=int)
            shift[axis] = 1
            nb_p = idx[tuple((np.argwhere(upw) + shift).T)]
            nb_m = idx[tuple((np.argwhere(upw) - shift).T)]
            vv = v[upw]
            vp = np.maximum(vv, 0.0) / h
            vm = np.minimum(vv, 0.0) / h
            add(r, nb_p, vp)
            add(r, nb_m, -vm)
            diag.reshape(-1)[r] += (vm - vp)

    add(idx, idx, diag)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    # scale each balance row by 1/rho (the operator itself) for conditioning
    scale = sp.diags(1.0 / rho_safe.reshape(-1))
    mat = scale @ mat
    # Dirichlet rows
    fixed_flat = fixed.reshape(-1)
    keep = sp.diags((~fixed_flat).astype(float))
    mat = keep @ mat + sp.diags(fixed_flat.astype(float))
    rhs = np.zeros(n)
    val_a, val_b = dirichlet
    rhs[a_mask.reshape(-1)] = val_a
    rhs[b_mask.reshape(-1)] = val_b
    try:
        q = spla.spsolve(mat.tocsr(), rhs)
    except Exception as exc:
        raise CommittorSolveError(f"sparse solve failed: {exc}") from exc
    if not np.all(np.isfinite(q)):
        raise CommittorSolveError("committor solve produced non-finite values")
    res = np.abs(mat @ q - rhs).max() / max(np.abs(q).max(), 1.0)
    if res > 1e-8:
        raise CommittorSolveError(f"committor solve did not converge: residual {res:.2e}")
    overshoot = max(0.0, float(-q.min()), float(q.max() - 1.0))
    if overshoot > 1e-6:
        warnings.warn(f"committor overshoots [0,1] by {overshoot:.2e}; "
                      "consider advection='upwind' or a finer grid")
    q = np.clip(q, 0.0, 1.0)
    return q.reshape(shape), a_mask, b_mask, res, overshoot


def solve_backward_committor(model, rho: DensityField, a_set, b_set, grid: Grid,
                             advection: str = "auto") -> CommittorField:
    """Solve the backward-committor Dirichlet problem: 1 on A, 0 on B,
    no-flux on the outer box."""
    q, a_mask, b_mask, res, over = _solve_committor(
        model, rho, a_set, b_set, grid, sign=-1.0, advection=advection,
        dirichlet=(1.0, 0.0))
    return CommittorField(grid=grid, values=q, rho=rho, a_mask=a_mask,
                          b_mask=b_mask, direction="backward", residual=res,
                          overshoot=over)


def solve_forward_committor(model, a_set, b_set, grid: Grid,
                            rho: Optional[DensityField] = None,
                            advection: str = "auto") -> CommittorField:
    """Solve the forward-committor problem: 0 on A, 1 on B."""
    if rho is None:
        rho = density_field(model, grid)
    q, a_mask, b_mask, res, over = _solve_committor(
        model, rho, a_set, b_set, grid, sign=+1.0, advection=advection,
        dirichlet=(0.0, 1.0))
    return CommittorField(grid=grid, values=q, rho=rho, a_mask=a_mask,
                          b_mask=b_mask, direction="forward", residual=res,
                          overshoot=over)


# ---------------------------------------------------------------------------
# Level-set meshes and surface quadrature
# ---------------------------------------------------------------------------

@dataclass
class LevelSetMesh:
    """Ordered points on a committor level set with local normals.

    In 2D this is a marching-squares polyline (closed when the first and last
    points coincide); in 1D a list of isolated points. ``arclength`` holds the
    cumulative coordinate used for histograms and binned kernels.
    """

    level: float
    points: np.ndarray          # (m, d)
    normals: np.ndarray         # unit grad q
    grad_norms: np.ndarray      # |grad q|
    closed: bool = False

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def arclength(self) -> np.ndarray:
        if self.dim == 1 or len(self.points) == 1:
            return np.zeros(len(self.points))
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1]) if self.dim == 2 else float(len(self.points))

    def quad_weights(self) -> np.ndarray:
        """Trapezoidal weights along the polyline (1 per point in 1D)."""
        if self.dim == 1 or len(self.points) == 1:
            return np.ones(len(self.points))
        seg = np.diff(self.arclength)
        w = np.zeros(len(self.points))
        w[:-1] += 0.5 * seg
        w[1:] += 0.5 * seg
        return w

    def point_at_arc(self, s) -> np.ndarray:
        """Linear interpolation of the polyline at arc-length coordinate(s)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        arc = self.arclength
        out = np.empty((len(s), self.dim))
        for k in range(self.dim):
            out[:, k] = np.interp(s, arc, self.points[:, k])
        return out

    def project_arc(self, points) -> np.ndarray:
        """Arc-length coordinate of the closest polyline point for each input."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.dim == 1 or len(self.points) == 1:
            return np.zeros(len(pts))
        a = self.points[:-1]
        b = self.points[1:]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        denom = np.where(denom > 0, denom, 1.0)
        diff = pts[:, None, :] - a[None, :, :]
        t = np.einsum("pij,ij->pi", diff, ab) / denom
        t = np.clip(t, 0.0, 1.0)
        proj = a[None, :, :] + t[..., None] * ab[None, :, :]
        d2 = np.sum((pts[:, None, :] - proj) ** 2, axis=2)
        seg = np.argmin(d2, axis=1)
        arc = self.arclength
        return arc[seg] + t[np.arange(len(pts)), seg] * (arc[seg + 1] - arc[seg])


def extract_level_set(fld: CommittorField, z: float,
                      allow_disconnected: bool = False,
                      grad_threshold: float = 1e-8) -> LevelSetMesh:
    """Extract the level set {q = z} as a mesh.

    1D: root bracketing with linear interpolation per sign-change interval.
    2D: marching squares; returns a polyline whose orientation and first
    point fix the arc-length parametrization.
    """
    if not 0.0 < z < 1.0:
        raise ValueError("level must lie strictly between the boundary values")
    grid = fld.grid
    if grid.dim == 1:
        v = fld.values - z
        sign_change = np.nonzero(v[:-1] * v[1:] <= 0)[0]
        roots = []
        for i in sign_change:
            if v[i] == v[i + 1]:
                continue
            t = v[i] / (v[i] - v[i + 1])
            if 0.0 <= t < 1.0 or (i == len(v) - 2 and t == 1.0):
                roots.append(grid.lo[0] + (i + t) * grid.spacing[0])
        roots = sorted(set(roots))
        if not roots:
            raise ValueError(f"level {z} not attained on the grid")
        if len(roots) > 1 and not allow_disconnected:
            raise DisconnectedMilestoneError(
                f"level {z} has {len(roots)} components; optimal milestones must be connected")
        pts = np.asarray(roots)[:, None]
    else:
        contours = find_contours(fld.values, level=z)
        if not contours:
            raise ValueError(f"level {z} not attained on the grid")
        if len(contours) > 1 and not allow_disconnected:
            raise DisconnectedMilestoneError(
                f"level {z} has {len(contours)} components; optimal milestones must be connected")
        c = max(contours, key=len)
        pts = np.column_stack([grid.lo[0] + c[:, 0] * grid.spacing[0],
                               grid.lo[1] + c[:, 1] * grid.spacing[1]])
    grads = fld.gradient_at(pts)
    norms = np.linalg.norm(np.atleast_2d(grads), axis=1)
    if norms.min() <= grad_threshold:
        raise IrregularLevelError(
            f"irregular level {z}: |grad q| = {norms.min():.2e} on the mesh")
    normals = np.atleast_2d(grads) / norms[:, None]
    closed = bool(grid.dim == 2 and len(pts) > 2
                  and np.allclose(pts[0], pts[-1]))
    return LevelSetMesh(level=float(z), points=pts, normals=normals,
                        grad_norms=norms, closed=closed)


def _flux_integrand(model, rho, fld, mesh) -> np.ndarray:
    """rho / |grad q| * <a grad q, grad q> at the mesh points."""
    pts = mesh.points
    rho_v = np.atleast_1d(rho(pts))
    grads = np.atleast_2d(fld.gradient_at(pts))
    a = np.asarray(model.diffusion(pts), dtype=float)
    quad = np.einsum("pi,pij,pj->p", grads, a, grads)
    return rho_v / mesh.grad_norms * quad


def surface_integral_Z(model, rho: DensityField, fld: CommittorField,
                       mesh: LevelSetMesh) -> float:
    """Surface integral of rho |grad q|^-1 <a grad q, grad q> over the mesh."""
    g = _flux_integrand(model, rho, fld, mesh)
    return float(np.sum(mesh.quad_weights() * g))


@dataclass
class MilestoneDensity:
    """Normalized hitting density on a milestone mesh."""

    mesh: LevelSetMesh
    values: np.ndarray
    normalization: float

    def cdf_at_arc(self, s) -> np.ndarray:
        """Cumulative distribution along the arc-length coordinate."""
        arc = self.mesh.arclength
        w = self.mesh.quad_weights() * self.values
        cum = np.concatenate([[0.0], np.cumsum(
            0.5 * (self.values[:-1] + self.values[1:]) * np.diff(arc))])
        cum = cum / cum[-1] if cum[-1] > 0 else cum
        return np.interp(np.atleast_1d(s), arc, cum)

    def sample_weights_at(self, arcs) -> np.ndarray:
        arc = self.mesh.arclength
        return np.interp(np.atleast_1d(arcs), arc, self.values)


def milestone_density(model, rho: DensityField, fld: CommittorField,
                      mesh: LevelSetMesh) -> MilestoneDensity:
    """The invariant-family hitting density on the mesh, normalized by the
    same quadrature rule as the surface integral."""
    g = _flux_integrand(model, rho, fld, mesh)
    znorm = float(np.sum(mesh.quad_weights() * g))
    if not znorm > 0 or not np.isfinite(znorm):
        raise ValueError(f"degenerate surface normalization {znorm!r}")
    return MilestoneDensity(mesh=mesh, values=g / znorm, normalization=znorm)


def analytic_q(levels) -> np.ndarray:
    """Transition matrix of the index chain on isocommittor milestones.

    For strictly decreasing committor levels the jump probabilities depend
    only on level spacing: q[i, i-1] = (z_i - z_{i+1}) / (z_{i-1} - z_{i+1})
    with the conventions z_{-1} = -inf, z_{N+1} = +inf, hence
    q[0, 1] = q[N, N-1] = 1. Rows sum to one exactly.
    """
    z = np.asarray(levels, dtype=float).reshape(-1)
    n = z.size
    if n < 2:
        raise ValueError("need at least two levels")
    if not np.all(np.diff(z) < 0):
        raise ValueError("levels must be strictly decreasing")
    q = np.zeros((n, n))
    q[0, 1] = 1.0
    q[n - 1, n - 2] = 1.0
    for i in range(1, n - 1):
        q[i, i - 1] = (z[i] - z[i + 1]) / (z[i - 1] - z[i + 1])
        q[i, i + 1] = 1.0 - q[i, i - 1]
    return q


def committor_milestones(fld: CommittorField, levels: Sequence[float],
                         allow_disconnected: bool = False):
    """Build the isocommittor milestone set plus its level-set meshes.

    Returns (MilestoneSet, [LevelSetMesh]); representative points are the
    mid-arc mesh points.
    """
    levels = np.asarray(levels, dtype=float).reshape(-1)
    meshes = [extract_level_set(fld, z, allow_disconnected=allow_disconnected)
              for z in levels]
    reps = []
    for mesh in meshes:
        if mesh.dim == 1:
            reps.append(mesh.points[0])
        else:
            reps.append(mesh.point_at_arc(0.5 * mesh.arclength[-1])[0])
    mset = MilestoneSet(fld.level_function(), levels, representative_points=reps)
    return mset, meshes
