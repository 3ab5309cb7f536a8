"""Diffusion models: drift/diffusion fields, invariant densities, probability currents.

Conventions. A model describes the Ito process

    dX = (b(X) + div a(X)) dt + sqrt(2) sigma(X) dW,      sigma sigma^T = a,

whose generator acts as div(a grad f) + b . grad f. The invariant density
solves div(a grad rho - b rho) = 0. Reversible models carry a potential V and
inverse temperature beta with b = -a beta grad V, so rho is proportional to
exp(-beta V). All point arguments are arrays of shape (..., d).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grids import Grid, OutsideGridError

BUILTIN_MODELS = ("ou_1d", "double_well_1d", "double_well_2d", "nonrev_2d")


class DensityUnavailableError(RuntimeError):
    """Raised when neither an analytic nor a numeric invariant density exists."""


class DensitySolveError(RuntimeError):
    """Raised when the discrete stationary problem cannot be solved reliably."""


@dataclass
class DensityField:
    """Invariant density values on a grid, normalized to unit mass."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.min() < -1e-12 * max(vals.max(), 1.0):
            raise ValueError("density has significantly negative values")
        vals = np.clip(vals, 0.0, None)
        total = self.grid.integrate(vals)
        if not total > 0:
            raise ValueError("density integrates to zero")
        self.values = vals / total
        self._grad = None

    def __call__(self, points) -> np.ndarray:
        return self.grid.interpolate(self.values, points)

    def gradient_at(self, points) -> np.ndarray:
        """Central-difference gradient interpolated at the given points."""
        if self._grad is None:
            self._grad = self.grid.gradient(self.values)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.column_stack([self.grid.interpolate(g, pts) for g in self._grad])
        return out if np.ndim(points) > 1 else out[0]


@dataclass
class DiffusionModel:
    """Uniformly elliptic diffusion on R^d (d = 1 or 2)."""

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]        # a(x): (..., d, d)
    noise_factor: Callable[[np.ndarray], np.ndarray]     # sigma(x): (..., d, d)
    reversible: bool = False
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    beta: Optional[float] = None
    box: Optional[tuple[tuple[float, float], ...]] = None
    name: str = "custom"
    # Fast paths used by the simulation kernels; generic models leave these unset.
    sigma_scalar: Optional[float] = None                 # sigma = s * Identity
    drift_code: int = -1
    drift_params: tuple = ()
    div_diffusion: Optional[Callable[[np.ndarray], np.ndarray]] = None
    density: Optional[DensityField] = None

    def __post_init__(self):
        self._zcache: dict = {}

    def with_density(self, density: DensityField) -> "DiffusionModel":
        """Copy of the model with a numeric invariant density attached."""
        return replace(self, density=density)

    def points(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        if pts.ndim == 0:
            pts = pts[None]
        if pts.shape[-1] != self.dim:
            if self.dim == 1 and pts.ndim == 1:
                pts = pts[:, None]
            else:
                raise ValueError(f"points must have last dimension {self.dim}")
        return pts

    def default_grid(self, nodes_per_axis: int = 257) -> Grid:
        if self.box is None:
            raise ValueError("model has no default bounding box")
        lo = tuple(b[0] for b in self.box)
        hi = tuple(b[1] for b in self.box)
        return Grid(lo=lo, hi=hi, shape=(nodes_per_axis,) * self.dim)


def make_overdamped_langevin(potential, grad_potential, beta: float, dim: int = 1,
                             box=None, name: str = "custom") -> DiffusionModel:
    """Position-space Langevin model for a potential at inverse temperature beta.

    Friction and mass are standardized to identity, giving b = -grad V,
    a = Identity / beta and sigma = sqrt(1/beta) * Identity.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    inv_beta = 1.0 / beta
    eye = np.eye(dim)

    def drift(x):
        return -np.asarray(grad_potential(x), dtype=float)

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(inv_beta * eye, x.shape[:-1] + (dim, dim))

    def noise_factor(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.sqrt(inv_beta) * eye, x.shape[:-1] + (dim, dim))

    return DiffusionModel(
        dim=dim, drift=drift, diffusion=diffusion, noise_factor=noise_factor,
        reversible=True, potential=potential, grad_potential=grad_potential,
        beta=beta, box=box, name=name, sigma_scalar=float(np.sqrt(inv_beta)),
    )


# ---------------------------------------------------------------------------
# Built-in benchmark systems
# ---------------------------------------------------------------------------

def _ou_potential(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * x[..., 0] ** 2


def _ou_grad(x):
    return np.asarray(x, dtype=float).copy()


def _dw1_potential(x):
    q = np.asarray(x, dtype=float)[..., 0]
    return (q * q - 1.0) ** 2


def _dw1_grad(x):
    q = np.asarray(x, dtype=float)[..., 0]
    return (4.0 * q * (q * q - 1.0))[..., None]


def _dw2_potential(x):
    x = np.asarray(x, dtype=float)
    q, y = x[..., 0], x[..., 1]
    return (q * q - 1.0) ** 2 + 2.0 * y * y


def _dw2_grad(x):
    x = np.asarray(x, dtype=float)
    q, y = x[..., 0], x[..., 1]
    return np.stack([4.0 * q * (q * q - 1.0), 4.0 * y], axis=-1)


def free_brownian(dim: int = 1, a: float = 1.0, box=None) -> DiffusionModel:
    """Driftless diffusion with constant scalar a; useful only on bounded cells."""
    if box is None:
        box = ((-6.0 * np.sqrt(a), 6.0 * np.sqrt(a)),) * dim

    def zero_potential(x):
        return np.zeros(np.asarray(x, dtype=float).shape[:-1])

    def zero_grad(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    m = make_overdamped_langevin(zero_potential, zero_grad, 1.0 / a, dim=dim,
                                 box=box, name="free")
    return replace(m, drift_code=4, drift_params=())


def make_benchmark(name: str, beta: float = 1.0, curl: float = 0.0) -> DiffusionModel:
    """Construct one of the built-in benchmark models.

    ``ou_1d``            V = x^2/2
    ``double_well_1d``   V = (x^2-1)^2
    ``double_well_2d``   V = (x^2-1)^2 + 2 y^2
    ``nonrev_2d``        double_well_2d drift plus curl * (-dV/dy, dV/dx);
                         non-reversible but with the same invariant density.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    sd = 1.0 / np.sqrt(beta)
    if name == "ou_1d":
        m = make_overdamped_langevin(_ou_potential, _ou_grad, beta, dim=1,
                                     box=((-6.0 * sd, 6.0 * sd),), name=name)
        return replace(m, drift_code=0, drift_params=())
    if name == "double_well_1d":
        w = 6.0 / np.sqrt(8.0 * beta)     # 6 standard deviations of a well
        m = make_overdamped_langevin(_dw1_potential, _dw1_grad, beta, dim=1,
                                     box=((-1.0 - w, 1.0 + w),), name=name)
        return replace(m, drift_code=1, drift_params=())
    if name == "double_well_2d" or name == "nonrev_2d":
        wx = 6.0 / np.sqrt(8.0 * beta)
        wy = 6.0 / np.sqrt(4.0 * beta)
        box = ((-1.0 - wx, 1.0 + wx), (-wy, wy))
        m = make_overdamped_langevin(_dw2_potential, _dw2_grad, beta, dim=2,
                                     box=box, name=name)
        if name == "double_well_2d":
            return replace(m, drift_code=2, drift_params=())
        c = float(curl)

        def drift(x):
            g = _dw2_grad(x)
            rot = np.stack([-g[..., 1], g[..., 0]], axis=-1)
            return -g + c * rot

        return replace(m, drift=drift, reversible=False, name=name,
                       drift_code=3, drift_params=(c,))
    raise ValueError(f"unknown model name {name!r}; expected one of {BUILTIN_MODELS}")


# ---------------------------------------------------------------------------
# Invariant densities
# ---------------------------------------------------------------------------

def _analytic_normalization(model: DiffusionModel, n: int = 4097) -> float:
    """Normalization of exp(-beta V) over the model box by Simpson quadrature."""
    key = (model.box, n)
    if key in model._zcache:
        return model._zcache[key]
    from scipy.integrate import simpson

    if model.dim == 1:
        xs = np.linspace(model.box[0][0], model.box[0][1], n)
        vals = np.exp(-model.beta * model.potential(xs[:, None]))
        z = float(simpson(vals, x=xs))
    else:
        m = 769
        xs = np.linspace(model.box[0][0], model.box[0][1], m)
        ys = np.linspace(model.box[1][0], model.box[1][1], m)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        vals = np.exp(-model.beta * model.potential(np.stack([X, Y], axis=-1)))
        z = float(simpson(simpson(vals, x=ys, axis=1), x=xs))
    model._zcache[key] = z
    return z


def invariant_density(model: DiffusionModel, x) -> np.ndarray:
    """Invariant density at x: analytic exp(-beta V)/Z for reversible models,
    otherwise interpolated from an attached DensityField."""
    pts = model.points(x)
    if model.reversible and model.potential is not None and model.beta is not None:
        z = _analytic_normalization(model)
        out = np.exp(-model.beta * model.potential(pts)) / z
    elif model.density is not None:
        out = model.density(pts)
    else:
        raise DensityUnavailableError("density unavailable")
    return out if np.ndim(x) > 1 else float(out[0]) if np.shape(out) == (1,) else out


def _bernoulli(t: np.ndarray) -> np.ndarray:
    """B(t) = t / (exp(t) - 1), the exponential-fitting flux weight."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    small = np.abs(t) < 1e-10
    out[small] = 1.0 - 0.5 * t[small]
    ts = t[~small]
    out[~small] = ts / np.expm1(ts)
    return out


def _axis_face_coeffs(model: DiffusionModel, grid: Grid, axis: int):
    """Exponential-fitted flux weights through the faces normal to an axis.

    Returns (wm, wp) such that the outward flux through face (i, i+1) is
    (a/h) * (wp * rho_{i+1} - wm * rho_i), evaluated at face midpoints.
    """
    h = grid.spacing[axis]
    if grid.dim == 1:
        x = grid.axis(0)
        mid = 0.5 * (x[:-1] + x[1:])[:, None]
    else:
        xs, ys = grid.axis(0), grid.axis(1)
        if axis == 0:
            mx = 0.5 * (xs[:-1] + xs[1:])
            X, Y = np.meshgrid(mx, ys, indexing="ij")
        else:
            my = 0.5 * (ys[:-1] + ys[1:])
            X, Y = np.meshgrid(xs, my, indexing="ij")
        mid = np.stack([X, Y], axis=-1)
    a_face = model.diffusion(mid)[..., axis, axis]
    b_face = model.drift(mid)[..., axis]
    t = b_face * h / a_face
    wp = _bernoulli(t) * a_face / h
    wm = _bernoulli(-t) * a_face / h
    return wm, wp


def _assemble_stationary_operator(model: DiffusionModel, grid: Grid) -> sp.csr_matrix:
    """Discrete div(a grad rho - b rho) with no-flux outer boundary.

    Conservative flux-difference form with exponential (Scharfetter-Gummel)
    fitting, which keeps the stationary solve an M-matrix problem and the
    null vector positive at any cell Peclet number.
    """
    shape = grid.shape
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    for axis in range(grid.dim):
        h = grid.spacing[axis]
        wm, wp = _axis_face_coeffs(model, grid, axis)
        lo = tuple(slice(None) if k != axis else slice(0, shape[axis] - 1)
                   for k in range(grid.dim))
        hi = tuple(slice(None) if k != axis else slice(1, shape[axis])
                   for k in range(grid.dim))
        i_lo, i_hi = idx[lo], idx[hi]
        # Flux through each interior face enters the two adjacent balances.
        add(i_lo, i_hi, wp / h)
        add(i_lo, i_lo, -wm / h)
        add(i_hi, i_hi, -wp / h)
        add(i_hi, i_lo, wm / h)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return mat.tocsr()


def solve_invariant_density(model: DiffusionModel, grid: Grid) -> DensityField:
    """Solve the discrete stationary problem on the grid and normalize to mass 1.

    The null vector is computed by replacing one balance row with the
    quadrature normalization; the relative residual of the unmodified
    operator must come out below 1e-8.
    """
    op = _assemble_stationary_operator(model, grid)
    n = op.shape[0]
    w = grid.quad_weights().reshape(-1)
    pin = n // 2
    mod = op.tolil()
    mod[pin, :] = w
    rhs = np.zeros(n)
    rhs[pin] = 1.0
    try:
        rho = spla.spsolve(mod.tocsr(), rhs)
    except Exception as exc:  # pragma: no cover - propagated solver failure
        raise DensitySolveError(f"sparse solve failed: {exc}") from exc
    if not np.all(np.isfinite(rho)):
        raise DensitySolveError("singular discrete system (non-finite solution)")
    scale = spla.norm(op, np.inf) * np.abs(rho).max()
    residual = np.abs(op @ rho).max() / scale
    if residual > 1e-8:
        raise DensitySolveError(
            f"ill-conditioned stationary solve: relative residual {residual:.2e}"
        )
    return DensityField(grid=grid, values=rho.reshape(grid.shape))


def stationary_current(model: DiffusionModel, density: DensityField, x) -> np.ndarray:
    """Stationary probability current J = rho b - a grad rho at x.

    The density gradient uses central differences on the grid; x must lie
    inside the grid box. Vanishes identically under detailed balance.
    """
    pts = np.atleast_2d(model.points(x))
    if not density.grid.contains(pts).all():
        raise OutsideGridError("point outside the density grid")
    rho = np.atleast_1d(density(pts))
    grad = np.atleast_2d(density.gradient_at(pts))
    b = model.drift(pts)
    a = model.diffusion(pts)
    j = rho[:, None] * b - np.einsum("...ij,...j->...i", a, grad)
    return j if np.ndim(x) > 1 else j[0]
