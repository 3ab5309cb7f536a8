"""Chain-extraction engine: compiled fast path plus a generic python twin.

Both engines implement the same algorithm: Euler-Maruyama steps, crossing
detection by sign change of f - z with linear-in-f interpolation, Newton
projection of hit points onto the level set, and mirror reflection at
confining levels. They consume normals from the same chunked stream in the
same order, so built-in models produce identical trajectories either way.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .rng import RngStream

START_CHUNK = 1 << 12          # chunk sizes double per refill up to the max;
MAX_CHUNK = 1 << 20             # the schedule is fixed so runs stay reproducible
EV_CAP = 1 << 16

_MASK64 = (1 << 64) - 1


def _mix64_py(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _bridge_salt(rng: RngStream) -> int:
    """Salt of the hash-derived bridge uniforms: reproducible from the stream
    identity and its position, identical for both engines."""
    s = _mix64_py(rng.seed & _MASK64)
    s = _mix64_py(s ^ (rng.stream & _MASK64))
    return _mix64_py(s ^ (rng.counter & _MASK64))


def _step_uniform_py(salt: int, step: int, direction: int) -> float:
    h = _mix64_py(_mix64_py(salt ^ (step & _MASK64)) ^ (direction + 1))
    return (h >> 11) * (1.0 / 9007199254740992.0)


class BlowUpError(RuntimeError):
    """Trajectory left the representable range; carries the last finite state."""

    def __init__(self, state):
        super().__init__("blow-up: non-finite position produced")
        self.state = state


class StepTooLargeError(RuntimeError):
    """A single proposal crossed both confining levels of a cell."""


class CensoredError(RuntimeError):
    """Time budget exhausted before the requested hit; carries elapsed time."""

    def __init__(self, elapsed):
        super().__init__(f"censored after t={elapsed:g}")
        self.elapsed = elapsed


@dataclass
class ChainResult:
    """Hit events plus the final trajectory state of one engine run."""

    idx: np.ndarray          # milestone index per event (position in levels)
    times: np.ndarray
    positions: np.ndarray    # (n_events, dim)
    status: int
    position: np.ndarray     # final position
    time: float
    f_value: float
    prev_index: int
    steps: int
    recorded: Optional[tuple] = None   # (t, positions) when rec_stride > 0


def _can_compile(model, pack) -> bool:
    return (model.drift_code >= 0 and model.sigma_scalar is not None
            and model.div_diffusion is None and pack.fcode is not None)


def run_chain(model, pack, levels, start, *, dt: float, rng: RngStream,
              t0: float = 0.0, prev: int = -1, tmax: float = np.inf,
              ev_target: int = -1, reflect=(-np.inf, np.inf),
              max_steps: int = 2**62, engine: str = "auto",
              rec_stride: int = 0, rec_cap: int = 0,
              bridge: bool = True) -> ChainResult:
    """Run the trajectory until an event target, time budget, or error stop.

    ``levels`` must be strictly decreasing; event indices refer to positions
    in that array. ``prev`` is the index of the milestone the trajectory is
    currently assigned to (-1 before the first hit); hits of ``prev`` are not
    events. ``reflect`` confines f between the two given level values.
    ``bridge`` keeps the Brownian-bridge recovery of within-step touches on.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    levels = np.ascontiguousarray(levels, dtype=float)
    if levels.size > 1 and not np.all(np.diff(levels) < 0):
        raise ValueError("levels must be strictly decreasing")
    start = np.asarray(start, dtype=float).reshape(-1)
    if engine == "auto":
        engine = "numba" if _can_compile(model, pack) else "python"
    if engine == "numba":
        if not _can_compile(model, pack):
            raise ValueError("model/level function not supported by the compiled engine")
        return _run_numba(model, pack, levels, start, dt, rng, t0, prev, tmax,
                          ev_target, reflect, max_steps, rec_stride, rec_cap,
                          bridge)
    if engine != "python":
        raise ValueError(f"unknown engine {engine!r}")
    return _run_python(model, pack, levels, start, dt, rng, t0, prev, tmax,
                       ev_target, reflect, max_steps, rec_stride, rec_cap,
                       bridge)


def _finish(status, idx, times, pos, st, ist, dim, rec):
    if status == K.BLOWUP:
        from .integrate import TrajectoryState

        raise BlowUpError(TrajectoryState(np.array(st[:dim]), float(st[2])))
    if status == K.STEP_TOO_LARGE:
        raise StepTooLargeError("step too large: proposal crossed both cell bounds")
    return ChainResult(
        idx=np.asarray(idx, dtype=np.int64),
        times=np.asarray(times, dtype=float),
        positions=np.asarray(pos, dtype=float).reshape(-1, dim),
        status=status,
        position=np.array(st[:dim]),
        time=float(st[2]),
        f_value=float(st[3]),
        prev_index=int(ist[0]),
        steps=int(ist[3]),
        recorded=rec,
    )


def _run_numba(model, pack, levels, start, dt, rng, t0, prev, tmax,
               ev_target, reflect, max_steps, rec_stride, rec_cap, bridge):
    dim = model.dim
    namp = np.sqrt(2.0 * dt) * model.sigma_scalar
    dpar = np.asarray(model.drift_params, dtype=float)
    if dpar.size == 0:
        dpar = np.zeros(1)
    salt = np.uint64(_bridge_salt(rng))
    fpar, vals, gxa, gya = pack.packed()
    gmax2 = pack.grad_bound_sq()
    x0 = start[0]
    y0 = start[1] if dim == 2 else 0.0
    f0 = float(K._feval(pack.fcode, fpar, vals, dim, x0, y0))
    st = np.array([x0, y0, t0, f0], dtype=float)
    ist = np.array([prev, 0, 0, 0, 0], dtype=np.int64)
    cap = EV_CAP if ev_target < 0 else \
        max(64, min(EV_CAP, 2 * ev_target + 8 * levels.size + 16))
    ev_idx = np.empty(cap, dtype=np.int64)
    ev_t = np.empty(cap)
    ev_x = np.empty(cap)
    ev_y = np.empty(cap)
    n_rec = rec_cap if rec_stride > 0 else 1
    rec_t = np.empty(n_rec)
    rec_x = np.empty(n_rec)
    rec_y = np.empty(n_rec)
    normals = np.empty(0)
    chunk = START_CHUNK
    all_idx, all_t, all_pos = [], [], []

    def drain():
        n = int(ist[1])
        if n:
            all_idx.append(ev_idx[:n].copy())
            all_t.append(ev_t[:n].copy())
            pos = np.column_stack([ev_x[:n], ev_y[:n]])[:, :dim].copy()
            all_pos.append(pos)
        ist[1] = 0

    while True:
        status = K.chain_loop(
            dim, model.drift_code, dpar, pack.fcode, fpar, vals, gxa, gya,
            levels, dt, namp, reflect[0], reflect[1], tmax,
            -1 if ev_target < 0 else ev_target - sum(len(a) for a in all_idx),
            max_steps, rec_stride, 1 if bridge else 0, salt, gmax2,
            normals, st, ist, ev_idx, ev_t, ev_x, ev_y, rec_t, rec_x, rec_y)
        if status == K.NEED_NORMALS:
            normals = rng.normals(chunk)
            chunk = min(2 * chunk, MAX_CHUNK)
            ist[2] = 0
            continue
        if status == K.EVENTS_FULL:
            drain()
            continue
        drain()
        break
    rec = None
    if rec_stride > 0:
        nr = int(ist[4])
        rec = (rec_t[:nr].copy(),
               np.column_stack([rec_x[:nr], rec_y[:nr]])[:, :dim].copy())
    idx = np.concatenate(all_idx) if all_idx else np.empty(0, dtype=np.int64)
    times = np.concatenate(all_t) if all_t else np.empty(0)
    pos = np.concatenate(all_pos) if all_pos else np.empty((0, dim))
    return _finish(status, idx, times, pos, st, ist, dim, rec)


# ---------------------------------------------------------------------------
# Generic python twin (custom drifts / level functions; mirrors the kernel)
# ---------------------------------------------------------------------------

class _Normals:
    """Chunked normal supply replicating the compiled engine's consumption."""

    def __init__(self, rng):
        self.rng = rng
        self.buf = np.empty(0)
        self.off = 0
        self.chunk = START_CHUNK

    def ensure(self, d):
        """Refill (discarding the tail) unless d values are available."""
        if self.off + d > self.buf.shape[0]:
            self.buf = self.rng.normals(self.chunk)
            self.chunk = min(2 * self.chunk, MAX_CHUNK)
            self.off = 0

    def take(self, d):
        out = self.buf[self.off:self.off + d]
        self.off += d
        return out


def _py_project(pack, x, z):
    for _ in range(12):
        r = pack.f_single(x) - z
        if -K.PROJECT_TOL < r < K.PROJECT_TOL:
            break
        g = pack.grad_single(x)
        g2 = float(g @ g)
        if g2 < 1e-16:
            break
        x = x - (r / g2) * g
    return x


def _py_scan_leg(pack, levels, xa, fa, ta, xb, fb, tb, prev, events):
    nlev = levels.shape[0]
    if fb > fa:
        order = range(nlev - 1, -1, -1)
    elif fb < fa:
        order = range(nlev)
    else:
        return prev
    for k in order:
        z = levels[k]
        if fb > fa:
            if z <= fa:
                continue
            if z > fb:
                break
        else:
            if z >= fa:
                continue
            if z < fb:
                break
        if k != prev:
            th = (z - fa) / (fb - fa)
            xh = xa + th * (xb - xa)
            xh = _py_project(pack, xh, z)
            events.append((k, ta + th * (tb - ta), xh))
        prev = k
    return prev


def _py_bridge_cascade(pack, levels, nearest, inward, u, f1, f2, vdt,
                       x, xn, t_base, tb, prev, events):
    nlev = levels.shape[0]
    deepest = -1
    k = nearest
    while 0 <= k < nlev:
        z = levels[k]
        d = (z - f1) * (z - f2) / vdt
        if not (2.0 * d < 34.0) or u >= np.exp(-2.0 * d):
            break
        deepest = k
        k += inward
    if deepest < 0:
        return prev
    depth = (deepest - nearest) * inward
    seq_len = 2 * depth + 1
    for m in range(seq_len):
        k = nearest + inward * (m if m <= depth else 2 * depth - m)
        if k != prev:
            z = levels[k]
            src = x if abs(f1 - z) <= abs(f2 - z) else xn
            xh = _py_project(pack, src.copy(), z)
            events.append((k, t_base + (m + 1.0) / (seq_len + 1.0) * (tb - t_base), xh))
        prev = k
    return prev


def _run_python(model, pack, levels, start, dt, rng, t0, prev, tmax,
                ev_target, reflect, max_steps, rec_stride, rec_cap, bridge):
    dim = model.dim
    sqrt2dt = np.sqrt(2.0 * dt)
    namp = sqrt2dt * model.sigma_scalar if model.sigma_scalar is not None else None
    rlo, rhi = reflect
    salt = _bridge_salt(rng)
    gmax2 = pack.grad_bound_sq()
    supply = _Normals(rng)
    x = start.copy()
    t = t0
    f1 = pack.f_single(x)
    steps = 0
    events: list = []
    rec_t, rec_p = [], []
    status = K.TIME_LIMIT
    while True:
        if 0 <= ev_target <= len(events):
            status = K.COUNT_REACHED
            break
        if t >= tmax or steps >= max_steps:
            status = K.TIME_LIMIT
            break
        supply.ensure(dim)
        z = supply.take(dim)
        b = np.asarray(model.drift(x[None, :]), dtype=float)[0]
        if model.div_diffusion is not None:
            b = b + np.asarray(model.div_diffusion(x[None, :]), dtype=float)[0]
        if namp is not None:
            xn = x + b * dt + namp * z
        else:
            sig = np.asarray(model.noise_factor(x[None, :]), dtype=float)[0]
            xn = x + b * dt + sqrt2dt * (sig @ z)
        steps += 1
        if not np.all(np.isfinite(xn)):
            status = K.BLOWUP
            break
        tb = t + dt
        nev0 = len(events)
        f2 = pack.f_single(xn)
        prev = _py_scan_leg(pack, levels, x, f1, t, xn, f2, tb, prev, events)
        reflected = f2 > rhi or f2 < rlo
        if bridge and not reflected:
            fmin, fmax = min(f1, f2), max(f1, f2)
            above = np.nonzero(levels > fmax)[0]
            below = np.nonzero(levels < fmin)[0]
            k_up = int(above[-1]) if above.size else -1
            k_dn = int(below[0]) if below.size else -1
            if namp is not None and np.isfinite(gmax2):
                vmax = namp * namp * gmax2
                near = False
                if k_up >= 0:
                    zl = levels[k_up]
                    near = (zl - f1) * (zl - f2) < 17.0 * vmax
                if not near and k_dn >= 0:
                    zl = levels[k_dn]
                    near = (zl - f1) * (zl - f2) < 17.0 * vmax
            else:
                near = k_up >= 0 or k_dn >= 0
            if near:
                g = pack.grad_single(xn)
                if namp is not None:
                    vdt = namp * namp * float(g @ g)
                else:
                    sig = np.asarray(model.noise_factor(xn[None, :]), dtype=float)[0]
                    vdt = 2.0 * dt * float(g @ (sig @ sig.T) @ g)
                if vdt > 0.0:
                    t_base = events[-1][1] if len(events) > nev0 else t
                    if k_up >= 0:
                        u = _step_uniform_py(salt, steps, 0)
                        prev = _py_bridge_cascade(pack, levels, k_up, -1, u,
                                                  f1, f2, vdt, x, xn, t_base,
                                                  tb, prev, events)
                    if k_dn >= 0:
                        t_base = events[-1][1] if len(events) > nev0 else t
                        u = _step_uniform_py(salt, steps, 1)
                        prev = _py_bridge_cascade(pack, levels, k_dn, +1, u,
                                                  f1, f2, vdt, x, xn, t_base,
                                                  tb, prev, events)
        if reflected:
            zb = rhi if f2 > rhi else rlo
            thb = (zb - f1) / (f2 - f1)
            xb = _py_project(pack, x + thb * (xn - x), zb)
            g = pack.grad_single(xn)
            g2 = float(g @ g)
            if g2 < 1e-16:
                status = K.STEP_TOO_LARGE
                break
            xm = xn + (2.0 * (zb - f2) / g2) * g
            fm = pack.f_single(xm)
            if fm > rhi or fm < rlo:
                xm = _py_project(pack, xm, zb)
                fm = pack.f_single(xm)
                if fm > rhi + 1e-8 or fm < rlo - 1e-8:
                    status = K.STEP_TOO_LARGE
                    break
            prev = _py_scan_leg(pack, levels, xb, zb, t + thb * dt, xm, fm, tb,
                                prev, events)
            xn, f2 = xm, fm
        x, t, f1 = xn, tb, f2
        if rec_stride > 0 and steps % rec_stride == 0 and len(rec_t) < rec_cap:
            rec_t.append(t)
            rec_p.append(x.copy())
    st = np.array([x[0], x[1] if dim == 2 else 0.0, t, f1])
    ist = np.array([prev, len(events), 0, steps, len(rec_t)], dtype=np.int64)
    if events:
        idx = np.array([e[0] for e in events], dtype=np.int64)
        times = np.array([e[1] for e in events])
        pos = np.vstack([e[2] for e in events])
    else:
        idx, times, pos = np.empty(0, dtype=np.int64), np.empty(0), np.empty((0, dim))
    rec = None
    if rec_stride > 0:
        rec = (np.array(rec_t), np.vstack(rec_p) if rec_p else np.empty((0, dim)))
    return _finish(status, idx, times, pos, st, ist, dim, rec)
