"""Uniform tensor grids for 1D/2D fields: coordinates, quadrature, interpolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OutsideGridError(ValueError):
    """A point fell outside the grid bounding box."""


@dataclass(frozen=True)
class Grid:
    """Uniform node-centered grid over a bounding box.

    ``lo``/``hi`` are per-axis bounds and ``shape`` the node counts
    (at least 32 per axis). Nodes include both endpoints, so the spacing
    on axis k is (hi[k] - lo[k]) / (shape[k] - 1).
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.shape)):
            raise ValueError("lo, hi, shape must have equal lengths")
        if self.dim not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        for a, b, n in zip(self.lo, self.hi, self.shape):
            if not b > a:
                raise ValueError(f"empty axis [{a}, {b}]")
            if n < 32:
                raise ValueError("need at least 32 nodes per axis")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / (n - 1) for a, b, n in zip(self.lo, self.hi, self.shape))

    def axis(self, k: int) -> np.ndarray:
        return np.linspace(self.lo[k], self.hi[k], self.shape[k])

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, dim), row-major in node index."""
        axes = [self.axis(k) for k in range(self.dim)]
        if self.dim == 1:
            return axes[0][:, None]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def quad_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights per node, same shape as a field."""
        ws = []
        for k in range(self.dim):
            w = np.full(self.shape[k], self.spacing[k])
            w[0] *= 0.5
            w[-1] *= 0.5
            ws.append(w)
        if self.dim == 1:
            return ws[0]
        return np.outer(ws[0], ws[1])

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.quad_weights() * values))

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        ok = np.ones(len(pts), dtype=bool)
        for k in range(self.dim):
            ok &= (pts[:, k] >= self.lo[k]) & (pts[:, k] <= self.hi[k])
        return ok

    def interpolate(self, values: np.ndarray, points: np.ndarray, clamp: bool = True) -> np.ndarray:
        """Multilinear interpolation of a nodal field at arbitrary points.

        With ``clamp`` (default) points outside the box take the edge value,
        which extends fields constantly; otherwise raises OutsideGridError.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have {self.dim} columns")
        if not clamp and not self.contains(pts).all():
            raise OutsideGridError("point outside grid bounding box")
        idx = []
        frac = []
        for k in range(self.dim):
            h = self.spacing[k]
            s = (pts[:, k] - self.lo[k]) / h
            s = np.clip(s, 0.0, self.shape[k] - 1.0)
            i0 = np.minimum(s.astype(np.int64), self.shape[k] - 2)
            idx.append(i0)
            frac.append(s - i0)
        vals = np.asarray(values)
        if self.dim == 1:
            i0, t = idx[0], frac[0]
            out = (1 - t) * vals[i0] + t * vals[i0 + 1]
        else:
            i0, j0 = idx
            tx, ty = frac
            out = ((1 - tx) * (1 - ty) * vals[i0, j0]
                   + tx * (1 - ty) * vals[i0 + 1, j0]
                   + (1 - tx) * ty * vals[i0, j0 + 1]
                   + tx * ty * vals[i0 + 1, j0 + 1])
        return out if np.ndim(points) > 1 else out[0] if out.shape == (1,) else out

    def gradient(self, values: np.ndarray) -> list[np.ndarray]:
        """Central-difference nodal gradient (one-sided at the box edges)."""
        vals = np.asarray(values, dtype=float)
        if self.dim == 1:
            return [np.gradient(vals, self.spacing[0])]
        gx = np.gradient(vals, self.spacing[0], axis=0)
        gy = np.gradient(vals, self.spacing[1], axis=1)
        return [gx, gy]


def write_binary_field(path, grid: Grid, values: np.ndarray) -> None:
    """Compact binary grid format: little-endian header (dims, shape, box) + row-major float64 payload."""
    with open(path, "wb") as fh:
        fh.write(np.int32(grid.dim).astype("<i4").tobytes())
        fh.write(np.asarray(grid.shape, dtype="<i8").tobytes())
        fh.write(np.asarray(grid.lo, dtype="<f8").tobytes())
        fh.write(np.asarray(grid.hi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_binary_field(path) -> tuple[Grid, np.ndarray]:
    with open(path, "rb") as fh:
        dim = int(np.frombuffer(fh.read(4), dtype="<i4")[0])
        shape = tuple(int(n) for n in np.frombuffer(fh.read(8 * dim), dtype="<i8"))
        lo = tuple(float(v) for v in np.frombuffer(fh.read(8 * dim), dtype="<f8"))
        hi = tuple(float(v) for v in np.frombuffer(fh.read(8 * dim), dtype="<f8"))
        n = int(np.prod(shape))
        values = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    return Grid(lo=lo, hi=hi, shape=shape), values


def write_csv_field(path, grid: Grid, values: np.ndarray, header: str = "value") -> None:
    """Node coordinates + value as CSV rows."""
    nodes = grid.nodes()
    flat = np.asarray(values).reshape(-1)
    cols = [nodes[:, k] for k in range(grid.dim)] + [flat]
    names = [f"x{k + 1}" for k in range(grid.dim)] + [header]
    np.savetxt(path, np.column_stack(cols), delimiter=",",
               header=",".join(names), comments="")
