"""Time-discrete simulation: Euler-Maruyama steps, hitting detection, cells.

The public single-step and run-until-hit operations here are thin wrappers
over :mod:`milestone_kit.engine`; estimators drive the engine directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import engine as _eng
from .engine import BlowUpError, CensoredError, StepTooLargeError
from .milestones import CellRegion, LevelFunction
from .rng import RngStream

__all__ = [
    "TrajectoryState", "HitEvent", "RngStream", "em_step", "run_until_hit",
    "run_in_cell", "BlowUpError", "CensoredError", "StepTooLargeError",
]

CROSSING_TOL = 1e-9


@dataclass
class TrajectoryState:
    position: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(-1)


@dataclass(frozen=True)
class HitEvent:
    index: int
    position: np.ndarray
    time: float


def em_step(model, state: TrajectoryState, dt: float, rng: RngStream) -> TrajectoryState:
    """One Euler-Maruyama step of dX = (b + div a) dt + sqrt(2) sigma dW."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = state.position
    z = rng.normals(model.dim)
    b = np.asarray(model.drift(x[None, :]), dtype=float)[0]
    if model.div_diffusion is not None:
        b = b + np.asarray(model.div_diffusion(x[None, :]), dtype=float)[0]
    if model.sigma_scalar is not None:
        noise = np.sqrt(2.0 * dt) * model.sigma_scalar * z
    else:
        sig = np.asarray(model.noise_factor(x[None, :]), dtype=float)[0]
        noise = np.sqrt(2.0 * dt) * (sig @ z)
    xn = x + b * dt + noise
    if not np.all(np.isfinite(xn)):
        raise BlowUpError(state)
    return TrajectoryState(xn, state.time + dt)


def run_until_hit(model, state: TrajectoryState, targets, f: LevelFunction,
                  dt: float, rng: RngStream, max_time: float,
                  departing: bool = False, engine: str = "auto") -> HitEvent:
    """Step until f(X) crosses one of the target levels.

    ``targets`` is a list of (index, level) pairs. Hitting times and positions
    are interpolated linearly in f along the bracketing step and the hit point
    is Newton-projected onto the level set. If the state starts on a target
    and ``departing`` is unset, that target is hit at time zero; with
    ``departing`` the starting milestone stays excluded until another
    milestone is hit. Exceeding ``max_time`` raises CensoredError.
    """
    targets = list(targets)
    indices = [int(i) for i, _ in targets]
    levels = np.array([float(z) for _, z in targets])
    order = np.argsort(-levels)
    levels_sorted = levels[order]
    index_map = [indices[k] for k in order]
    f0 = f.f_single(state.position)
    prev = -1
    on = np.nonzero(np.abs(levels_sorted - f0) <= CROSSING_TOL)[0]
    if on.size:
        if not departing:
            return HitEvent(index=index_map[on[0]], position=state.position.copy(),
                            time=state.time)
        prev = int(on[0])
    res = _eng.run_chain(model, f, levels_sorted, state.position, dt=dt, rng=rng,
                         t0=state.time, prev=prev, tmax=state.time + max_time,
                         ev_target=1, engine=engine)
    if res.status == K.TIME_LIMIT or len(res.idx) == 0:
        raise CensoredError(res.time - state.time)
    return HitEvent(index=index_map[int(res.idx[0])],
                    position=res.positions[0], time=float(res.times[0]))


def run_in_cell(model, state: TrajectoryState, cell: CellRegion,
                f: LevelFunction, dt: float, rng: RngStream) -> TrajectoryState:
    """One step confined to the cell by mirror reflection at its bounding levels.

    The level-function value of an exiting proposal is reflected,
    f(x') <- 2 z_bound - f(x'), by mirroring the position across the level set
    along the local gradient direction (exact for planar level sets).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    proposal = em_step(model, state, dt, rng)
    fv = f.f_single(proposal.position)
    if cell.f_lo <= fv <= cell.f_hi:
        return proposal
    zb = cell.f_hi if fv > cell.f_hi else cell.f_lo
    g = f.grad_single(proposal.position)
    g2 = float(g @ g)
    if g2 < 1e-16:
        raise StepTooLargeError("vanishing level-function gradient at proposal")
    xm = proposal.position + (2.0 * (zb - fv) / g2) * g
    fm = f.f_single(xm)
    if not (cell.f_lo - 1e-8 <= fm <= cell.f_hi + 1e-8):
        raise StepTooLargeError("step too large: proposal crossed both cell bounds")
    return TrajectoryState(xm, proposal.time)
