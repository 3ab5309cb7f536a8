"""Curve-based milestones: projection onto a parametrized curve and a
kernel-smoothed committor surrogate, approximating isocommittor surfaces
inside a reaction tube without a PDE solve."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .grids import Grid
from .milestones import GridLevel, MilestoneSet


@dataclass
class Curve:
    """Constant-speed polyline phi(s), s in [0, 1].

    Input points are resampled by arc length so that segment speeds agree to
    about a percent, matching the normalized-arclength parametrization.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(pts) < 2:
            raise ValueError("a curve needs at least two distinct points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg == 0):
            raise ValueError("consecutive curve points must be distinct")
        n = max(2 * len(pts), 128)
        # iterate arc-length resampling until chord lengths even out
        for _ in range(4):
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            arc = np.concatenate([[0.0], np.cumsum(seg)])
            if arc[-1] == 0:
                raise ValueError("degenerate curve of zero length")
            s_new = np.linspace(0.0, arc[-1], n)
            pts = np.column_stack(
                [np.interp(s_new, arc, pts[:, k]) for k in range(pts.shape[1])])
        self.points = pts
        self.length = float(arc[-1])
        self.s = np.linspace(0.0, 1.0, n)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.column_stack(
            [np.interp(s, self.s, self.points[:, k]) for k in range(self.dim)])


def project(curve: Curve, x) -> np.ndarray:
    """Normalized parameter of the closest curve point, smallest s on ties."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    a = curve.points[:-1]
    b = curve.points[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    diff = pts[:, None, :] - a[None, :, :]
    t = np.einsum("pij,ij->pi", diff, ab) / denom
    t = np.clip(t, 0.0, 1.0)
    proj = a[None, :, :] + t[..., None] * ab[None, :, :]
    d2 = np.sum((pts[:, None, :] - proj) ** 2, axis=2)
    seg = np.argmin(d2, axis=1)          # first minimum = smallest parameter
    ds = curve.s[1] - curve.s[0]
    s = curve.s[seg] + t[np.arange(len(pts)), seg] * ds
    return s if np.ndim(x) > 1 else float(s[0])


def identity_rescale(s):
    return np.asarray(s, dtype=float)


def logistic_rescale(steepness: float = 8.0) -> Callable:
    """Monotone rescale mapping [0,1] onto [0,1] with a logistic profile."""

    def q(s):
        s = np.asarray(s, dtype=float)
        lo = 1.0 / (1.0 + np.exp(steepness / 2.0))
        hi = 1.0 / (1.0 + np.exp(-steepness / 2.0))
        v = 1.0 / (1.0 + np.exp(-steepness * (s - 0.5)))
        return (v - lo) / (hi - lo)

    return q


def smoothed_committor(curve: Curve, rescale: Callable, delta: float, x) -> np.ndarray:
    """Gaussian smoothing of the rescaled curve coordinate at point(s) x.

    f(x) = int K_delta(x - y) Q(s(y)) dy with a Gaussian kernel of width
    delta, evaluated by midpoint quadrature on a local grid of half-width
    4 delta and spacing delta / 4; the discrete kernel is renormalized so f
    always lies in [0, 1].
    """
    if not delta > 0:
        raise ValueError("smoothing width must be positive")
    _check_rescale(rescale)
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    d = curve.dim
    h = delta / 4.0
    offs_1d = np.arange(-16, 17) * h
    if d == 1:
        offs = offs_1d[:, None]
    else:
        ox, oy = np.meshgrid(offs_1d, offs_1d, indexing="ij")
        offs = np.column_stack([ox.ravel(), oy.ravel()])
    w = np.exp(-0.5 * np.sum(offs ** 2, axis=1) / delta ** 2)
    w = w / w.sum()
    out = np.empty(len(pts))
    for k, p in enumerate(pts):
        s = project(curve, p[None, :] + offs)
        out[k] = float(w @ rescale(s))
    return out if np.ndim(x) > 1 else float(out[0])


def _check_rescale(rescale: Callable) -> None:
    s = np.linspace(0.0, 1.0, 33)
    v = np.asarray(rescale(s), dtype=float)
    if abs(v[0]) > 1e-9 or abs(v[-1] - 1.0) > 1e-9 or np.any(np.diff(v) <= 0):
        raise ValueError("rescale must be strictly increasing with Q(0)=0, Q(1)=1")


def smoothed_committor_field(curve: Curve, rescale: Callable, delta: float,
                             grid: Grid) -> GridLevel:
    """Tabulate the smoothed committor surrogate on a grid.

    The separable Gaussian filter over a fine tabulation of Q(s(y)) realizes
    the same convolution as :func:`smoothed_committor` (clamped outside the
    grid), cheap enough to use as a simulation level function.
    """
    if not delta > 0:
        raise ValueError("smoothing width must be positive")
    _check_rescale(rescale)
    raw = np.asarray(rescale(project(curve, grid.nodes())), dtype=float)
    raw = raw.reshape(grid.shape)
    sigmas = [delta / h for h in grid.spacing]
    smooth = gaussian_filter(raw, sigma=sigmas, mode="nearest", truncate=4.0)
    return GridLevel(grid, smooth)


def milestones_from_curve(curve: Curve, rescale: Callable, delta: float,
                          levels, grid: Grid) -> MilestoneSet:
    """Package the smoothed curve coordinate as a milestone set.

    ``levels`` must be strictly decreasing in (0, 1); representative points
    are found on the curve and Newton-projected onto each level set.
    """
    levels = np.asarray(levels, dtype=float).reshape(-1)
    if np.any(levels <= 0) or np.any(levels >= 1):
        raise ValueError("levels must lie strictly inside (0, 1)")
    if levels.size > 1 and not np.all(np.diff(levels) < 0):
        raise ValueError("levels must be strictly decreasing")
    lf = smoothed_committor_field(curve, rescale, delta, grid)
    f_on_curve = np.asarray([lf.f_single(p) for p in curve.points])
    reps = []
    for z in levels:
        k = int(np.argmin(np.abs(f_on_curve - z)))
        p = curve.points[k].copy()
        for _ in range(40):
            r = lf.f_single(p) - z
            if abs(r) < 1e-10:
                break
            g = lf.grad_single(p)
            g2 = float(g @ g)
            if g2 < 1e-14:
                break
            p = p - (r / g2) * g
        if abs(lf.f_single(p) - z) > 1e-6:
            raise ValueError(f"could not locate level {z} near the curve; "
                             "check that levels lie in the range of f")
        reps.append(p)
    return MilestoneSet(lf, levels, representative_points=reps)
