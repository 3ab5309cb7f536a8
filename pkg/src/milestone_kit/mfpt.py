"""Mean first passage times: the milestoning linear system, the exact
(kernel) equation, direct ergodic estimation, and an independent 1D oracle."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad

from . import engine as _eng
from .estimate import KernelEstimate
from .milestones import MilestoneSet
from .rng import NS_REPLICA, RngStream, substream

RESIDUAL_TOL = 1e-10


class InconsistentInputsError(RuntimeError):
    """The linear system produced nonpositive passage times."""


@dataclass
class MFPTSolution:
    """Passage times to one target milestone from every other one."""

    target: int
    values: np.ndarray          # T[i] = MFPT from milestone i; T[target] = 0
    residual: float
    provenance: str             # optimal | exact | empirical | oracle
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values[self.target] != 0.0:
            raise ValueError("passage time to the target itself must be zero")


@dataclass
class ExactMFPTField:
    """Binned passage times along each milestone (zero on the target)."""

    target: int
    edges: list
    values: list                # per milestone: array over bins


def solve_optimal(p: np.ndarray, t: np.ndarray, j: int,
                  t_stderr: Optional[np.ndarray] = None) -> MFPTSolution:
    """Solve T_i = t_i + sum_k p_ik T_k with T_j = 0 by row/column deletion.

    Accepts either sampled estimates (p_hat, t_hat) or the analytic
    level-spacing transition matrix. If ``t_stderr`` is given, the linear map
    propagates it to a per-component standard error (p treated as exact).
    """
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    n = p.shape[0]
    if p.shape != (n, n) or t.shape != (n,):
        raise ValueError("shape mismatch between p and t")
    if not 0 <= j < n:
        raise IndexError("target outside index set")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("p must be row-stochastic")
    if np.any(t <= 0):
        raise ValueError("residence times must be positive")
    keep = np.arange(n) != j
    a = np.eye(n - 1) - p[np.ix_(keep, keep)]
    try:
        sol = np.linalg.solve(a, t[keep])
        minv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise InconsistentInputsError(
            f"singular system: milestone {j} unreachable from some index") from exc
    values = np.zeros(n)
    values[keep] = sol
    if np.any(sol <= 0):
        raise InconsistentInputsError("inconsistent inputs: nonpositive passage time")
    residual = float(np.abs(a @ sol - t[keep]).max() / max(np.abs(sol).max(), 1.0))
    if residual > RESIDUAL_TOL:
        raise InconsistentInputsError(f"solver residual {residual:.2e} too large")
    stderr = None
    if t_stderr is not None:
        se = np.asarray(t_stderr, dtype=float).reshape(-1)[keep]
        stderr = np.zeros(n)
        stderr[keep] = np.sqrt((minv ** 2) @ (se ** 2))
    return MFPTSolution(target=j, values=values, residual=residual,
                        provenance="optimal", stderr=stderr)


def solve_exact(kernel: KernelEstimate, j: int, mu: Optional[list] = None,
                method: str = "direct", tol: float = 1e-10,
                max_iter: int = 100_000):
    """Solve the binned exact-milestoning equation tau = (I - nu) T, T = 0 on j.

    Returns (ExactMFPTField, MFPTSolution). The reduction to per-milestone
    values averages the binned field with the weights ``mu`` (defaults to the
    kernel's start weights; pass hit-histogram masses for the empirical
    hitting measure).
    """
    n = kernel.n
    if not 0 <= j < n:
        raise IndexError("target outside index set")
    offsets = kernel.global_offsets()
    nb = kernel.bins_per_milestone
    src = [i for i in range(n) if i != j]
    rows = []
    for i in src:
        if np.any(kernel.tau_counts[i] == 0):
            raise ValueError(f"kernel rows incomplete for milestone {i}")
        rows.append(np.arange(offsets[i], offsets[i + 1]))
    unknown = np.concatenate(rows)
    m = np.vstack([kernel.nu[i] for i in src])[:, unknown]
    tau = np.concatenate([kernel.tau[i] for i in src])
    a = np.eye(len(unknown)) - m
    if method == "iterate":
        tvec = np.zeros(len(unknown))
        converged = False
        for _ in range(max_iter):
            nxt = tau + m @ tvec
            if np.abs(nxt - tvec).max() < tol:
                tvec = nxt
                converged = True
                break
            tvec = nxt
        if not converged:
            warnings.warn("fixed-point iteration did not converge; "
                          "falling back to the direct solve")
            tvec = np.linalg.solve(a, tau)
    elif method == "direct":
        try:
            tvec = np.linalg.solve(a, tau)
        except np.linalg.LinAlgError as exc:
            raise InconsistentInputsError("singular exact-milestoning system") from exc
    else:
        raise ValueError("method must be 'direct' or 'iterate'")
    residual = float(np.abs(a @ tvec - tau).max() / max(np.abs(tvec).max(), 1.0))
    fields = []
    pos = 0
    for i in range(n):
        if i == j:
            fields.append(np.zeros(nb[i]))
        else:
            fields.append(tvec[pos:pos + nb[i]].copy())
            pos += nb[i]
    weights = mu if mu is not None else kernel.start_weights
    values = np.zeros(n)
    for i in range(n):
        if i == j:
            continue
        w = np.asarray(weights[i], dtype=float)
        w = w / w.sum()
        values[i] = float(w @ fields[i])
    field_out = ExactMFPTField(target=j, edges=kernel.edges, values=fields)
    sol = MFPTSolution(target=j, values=values, residual=residual,
                       provenance="exact")
    return field_out, sol


@dataclass
class EmpiricalMFPT:
    value: float
    stderr: float
    n_transitions: int
    replica_means: np.ndarray
    censored: int = 0


def mfpt_empirical(model, mset_pair: MilestoneSet, n_transitions: int,
                   dt: float, rng: RngStream, source: int = 0,
                   replicas: int = 10, burn_in_events: int = 10,
                   engine: str = "auto", max_steps: int = 2**62) -> EmpiricalMFPT:
    """Ergodic two-milestone estimate of the passage time from the source.

    Runs the coarse chain of the pair set and averages the lags that follow
    visits to the source milestone; the standard error pools per-replica
    batch means.
    """
    if mset_pair.n != 2:
        raise ValueError("mfpt_empirical needs a two-milestone set")
    if n_transitions < replicas:
        replicas = max(1, n_transitions)
    per_rep = int(np.ceil(n_transitions / replicas))
    means = []
    weights = []
    total = 0
    for r in range(replicas):
        sub = substream(rng, NS_REPLICA, r)
        start = mset_pair.point_on(source)
        # events alternate between the two milestones, so one source->target
        # lag needs two events; run a margin past the burn-in
        res = _eng.run_chain(model, mset_pair.level_function, mset_pair.levels,
                             start, dt=dt, rng=sub, prev=source,
                             ev_target=2 * per_rep + burn_in_events + 2,
                             max_steps=max_steps, engine=engine)
        idx = res.idx[burn_in_events:]
        times = res.times[burn_in_events:]
        if len(idx) < 2:
            continue
        lags = np.diff(times)
        sel = idx[:-1] == source
        if not sel.any():
            continue
        means.append(float(lags[sel].mean()))
        weights.append(int(sel.sum()))
        total += int(sel.sum())
    if not means:
        raise RuntimeError("no transitions observed; increase the budget")
    means = np.asarray(means)
    weights = np.asarray(weights, dtype=float)
    value = float(np.average(means, weights=weights))
    stderr = float(np.std(means, ddof=1) / np.sqrt(len(means))) if len(means) > 1 else np.nan
    return EmpiricalMFPT(value=value, stderr=stderr, n_transitions=total,
                         replica_means=means)


def _confinement_check(model, lo: float, hi: float) -> None:
    eps = 1e-4 * (hi - lo)
    for edge, sign in ((hi, 1.0), (lo, -1.0)):
        g1 = float(model.grad_potential(np.array([[edge]])).reshape(-1)[0])
        g0 = float(model.grad_potential(np.array([[edge - sign * eps]])).reshape(-1)[0])
        curv = (g1 - g0) / (sign * eps)
        if curv <= 0 or sign * g1 <= 0:
            raise ValueError("potential is not confining at the box edge; "
                             "the passage-time quadrature has no finite limit")


def mfpt_quadrature_1d(model, x_start: float, x_target: float,
                       epsrel: float = 1e-11) -> float:
    """Independent quadrature oracle for 1D reversible passage times.

    Integrates T = int_start^target dy exp(beta V(y))/a * int_box^y
    exp(-beta V(z)) dz on the truncated domain (reflecting at the far box
    edge), by adaptive quadrature. Requires a confining potential.
    """
    if model.dim != 1 or not model.reversible:
        raise ValueError("quadrature oracle needs a 1D reversible model")
    beta = model.beta
    a = float(np.asarray(model.diffusion(np.array([[x_start]])))[..., 0, 0].reshape(-1)[0])
    lo, hi = model.box[0]
    _confinement_check(model, lo, hi)

    def vpot(y):
        return float(model.potential(np.array([[y]])).reshape(-1)[0])

    if x_start < x_target:
        def inner(y):
            val, _ = quad(lambda z: np.exp(-beta * vpot(z)), lo, y,
                          epsabs=0.0, epsrel=epsrel, limit=400)
            return val

        outer, _ = quad(lambda y: np.exp(beta * vpot(y)) / a * inner(y),
                        x_start, x_target, epsabs=0.0, epsrel=epsrel, limit=400)
    else:
        def inner(y):
            val, _ = quad(lambda z: np.exp(-beta * vpot(z)), y, hi,
                          epsabs=0.0, epsrel=epsrel, limit=400)
            return val

        outer, _ = quad(lambda y: np.exp(beta * vpot(y)) / a * inner(y),
                        x_target, x_start, epsabs=0.0, epsrel=epsrel, limit=400)
    return float(outer)
