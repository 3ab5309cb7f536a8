"""Hot simulation loops, numba-compiled with integer-coded dispatch.

The chain loop advances an Euler-Maruyama trajectory with scalar noise,
detects level crossings by sign change of f - z between steps (interpolated
linearly in f, then Newton-projected onto the level set), optionally reflects
at two confining levels, and appends hit events to preallocated buffers.
Built-in drifts are selected by ``drift_code``; anything else goes through
the pure-python twin in ``engine.py`` which mirrors this file operation for
operation so that both engines consume the same normals and agree exactly.
Near-miss excursions that cross a level and return within one step are
recovered by a Brownian-bridge test: a level z outside the leg's f-range is
touched with probability exp(-2 (z - f1)(z - f2) / (v dt)) where
v = 2 <grad f, a grad f>. Without this correction the sampled jump
probabilities carry an O(sqrt(dt)) bias that exceeds their statistical error
at practical budgets. The test consumes no normals: each (step, direction)
gets one hash-derived uniform, shared by all levels on that side, so the
excursion depths are nested and the decision for a given level does not
depend on which other milestones exist. Trajectories and touch events of a
restricted milestone set therefore coincide path-by-path with the filtered
events of the full set under a shared seed.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# Engine status codes.
NEED_NORMALS = 0
EVENTS_FULL = 1
TIME_LIMIT = 2
COUNT_REACHED = 3
BLOWUP = 4
STEP_TOO_LARGE = 5

# Drift codes (mirrors model.drift_code).
DRIFT_OU = 0
DRIFT_DW1 = 1
DRIFT_DW2 = 2
DRIFT_NONREV = 3
DRIFT_FREE = 4

# Level-function codes.
F_LIN = 0
F_GRID = 1

PROJECT_TOL = 1e-9

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(inline="always", cache=True)
def _mix64(z):
    """SplitMix64 finalizer (wrapping uint64 arithmetic)."""
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _step_uniform(salt, step, direction):
    """Counter-based uniform for the bridge test of one step and side."""
    h = _mix64(_mix64(salt ^ np.uint64(step)) ^ np.uint64(direction + 1))
    return (h >> np.uint64(11)) * _INV_2_53


@njit(inline="always", cache=True)
def _drift(code, par, x, y):
    if code == 0:
        return -x, 0.0
    if code == 1:
        return -4.0 * x * (x * x - 1.0), 0.0
    if code == 2:
        return -4.0 * x * (x * x - 1.0), -4.0 * y
    if code == 3:
        vx = 4.0 * x * (x * x - 1.0)
        vy = 4.0 * y
        c = par[0]
        return -vx - c * vy, -vy + c * vx
    return 0.0, 0.0


@njit(inline="always", cache=True)
def _feval(fcode, fpar, vals, dim, x, y):
    if fcode == 0:
        return fpar[0] * x + fpar[1] * y + fpar[2]
    n0 = vals.shape[0]
    sx = (x - fpar[0]) / fpar[1]
    if sx < 0.0:
        sx = 0.0
    if sx > n0 - 1.0:
        sx = n0 - 1.0
    i = int(sx)
    if i > n0 - 2:
        i = n0 - 2
    tx = sx - i
    if dim == 1:
        return (1.0 - tx) * vals[i, 0] + tx * vals[i + 1, 0]
    n1 = vals.shape[1]
    sy = (y - fpar[2]) / fpar[3]
    if sy < 0.0:
        sy = 0.0
    if sy > n1 - 1.0:
        sy = n1 - 1.0
    j = int(sy)
    if j > n1 - 2:
        j = n1 - 2
    ty = sy - j
    return ((1.0 - tx) * (1.0 - ty) * vals[i, j]
            + tx * (1.0 - ty) * vals[i + 1, j]
            + (1.0 - tx) * ty * vals[i, j + 1]
            + tx * ty * vals[i + 1, j + 1])


@njit(inline="always", cache=True)
def _geval(fcode, fpar, gxa, gya, dim, x, y):
    if fcode == 0:
        return fpar[0], fpar[1]
    gx = _feval(1, fpar, gxa, dim, x, y)
    if dim == 1:
        return gx, 0.0
    gy = _feval(1, fpar, gya, dim, x, y)
    return gx, gy


@njit(inline="always", cache=True)
def _project(fcode, fpar, vals, gxa, gya, dim, x, y, z):
    """Newton-project (x, y) onto the level set {f = z} along grad f."""
    for _ in range(12):
        r = _feval(fcode, fpar, vals, dim, x, y) - z
        if -PROJECT_TOL < r < PROJECT_TOL:
            break
        gx, gy = _geval(fcode, fpar, gxa, gya, dim, x, y)
        g2 = gx * gx + gy * gy
        if g2 < 1e-16:
            break
        s = r / g2
        x -= s * gx
        if dim == 2:
            y -= s * gy
    return x, y


@njit(cache=True)
def _scan_leg(fcode, fpar, vals, gxa, gya, dim, levels,
              xa, ya, fa, ta, xb, yb, fb, tb,
              prev, nev, ev_idx, ev_t, ev_x, ev_y):
    """Record milestone crossings along one leg, in travel order.

    A touch of the previous milestone is a crossing but not an event
    (re-hits of the same milestone leave the index process unchanged).
    """
    nlev = levels.shape[0]
    if fb > fa:
        for k in range(nlev - 1, -1, -1):        # ascending level values
            z = levels[k]
            if z <= fa:
                continue
            if z > fb:
                break
            if k != prev:
                th = (z - fa) / (fb - fa)
                xh = xa + th * (xb - xa)
                yh = ya + th * (yb - ya)
                xh, yh = _project(fcode, fpar, vals, gxa, gya, dim, xh, yh, z)
                ev_idx[nev] = k
                ev_t[nev] = ta + th * (tb - ta)
                ev_x[nev] = xh
                ev_y[nev] = yh
                nev += 1
            prev = k
    elif fb < fa:
        for k in range(nlev):                    # descending level values
            z = levels[k]
            if z >= fa:
                continue
            if z < fb:
                break
            if k != prev:
                th = (z - fa) / (fb - fa)
                xh = xa + th * (xb - xa)
                yh = ya + th * (yb - ya)
                xh, yh = _project(fcode, fpar, vals, gxa, gya, dim, xh, yh, z)
                ev_idx[nev] = k
                ev_t[nev] = ta + th * (tb - ta)
                ev_x[nev] = xh
                ev_y[nev] = yh
                nev += 1
            prev = k
    return prev, nev


@njit(inline="always", cache=True)
def _bridge_cascade(fcode, fpar, vals, gxa, gya, dim, levels, nearest, inward,
                    u, f1, f2, vdt, x, y, xn, yn, t_base, tb,
                    prev, nev, ev_idx, ev_t, ev_x, ev_y):
    """Emit the touch events of one within-step excursion past ``nearest``.

    The shared uniform ``u`` makes the fired depths nested: a level fires
    only if all levels between it and the leg fired too. The excursion
    touches the levels outward to the deepest fired one and back; events are
    placed at ordered times inside the remaining step interval.
    """
    nlev = levels.shape[0]
    deepest = -1
    k = nearest
    while k >= 0 and k < nlev:
        z = levels[k]
        d = (z - f1) * (z - f2) / vdt
        if not (2.0 * d < 34.0) or u >= np.exp(-2.0 * d):
            break
        deepest = k
        k += inward
    if deepest < 0:
        return prev, nev
    depth = (deepest - nearest) * inward
    seq_len = 2 * depth + 1
    for m in range(seq_len):
        k = nearest + inward * (m if m <= depth else 2 * depth - m)
        if k != prev:
            z = levels[k]
            if abs(f1 - z) <= abs(f2 - z):
                xh, yh = _project(fcode, fpar, vals, gxa, gya, dim, x, y, z)
            else:
                xh, yh = _project(fcode, fpar, vals, gxa, gya, dim, xn, yn, z)
            ev_idx[nev] = k
            ev_t[nev] = t_base + (m + 1.0) / (seq_len + 1.0) * (tb - t_base)
            ev_x[nev] = xh
            ev_y[nev] = yh
            nev += 1
        prev = k
    return prev, nev


@njit(cache=True)
def chain_loop(dim, dcode, dpar, fcode, fpar, vals, gxa, gya, levels,
               dt, namp, rlo, rhi, tmax, ev_target, max_steps, rec_stride,
               bridge, salt, gmax2, normals, st, ist, ev_idx, ev_t, ev_x, ev_y,
               rec_t, rec_x, rec_y):
    """Advance the trajectory until a buffer, budget, or error stop.

    State: st = [x, y, t, f]; ist = [prev_index, n_events, normal_offset,
    steps, n_recorded]. rlo/rhi are reflecting levels in f-units (+-inf
    disables reflection). ``bridge`` enables the Brownian-bridge touch test,
    whose per-step uniforms are hashed from ``salt`` and the step counter.
    Returns a status code; the caller refills the normals buffer or drains
    events and re-enters with the same state.
    """
    x = st[0]
    y = st[1]
    t = st[2]
    f1 = st[3]
    prev = ist[0]
    nev = ist[1]
    noff = ist[2]
    steps = ist[3]
    nrec = ist[4]
    nlev = levels.shape[0]
    cap = ev_idx.shape[0]
    nn = normals.shape[0]
    status = NEED_NORMALS
    while True:
        if ev_target >= 0 and nev >= ev_target:
            status = COUNT_REACHED
            break
        if nev + 6 * nlev + 8 > cap:
            status = EVENTS_FULL
            break
        if t >= tmax:
            status = TIME_LIMIT
            break
        if steps >= max_steps:
            status = TIME_LIMIT
            break
        if noff + dim > nn:
            status = NEED_NORMALS
            break
        bx, by = _drift(dcode, dpar, x, y)
        xn = x + bx * dt + namp * normals[noff]
        yn = y
        if dim == 2:
            yn = y + by * dt + namp * normals[noff + 1]
        noff += dim
        steps += 1
        if not (np.isfinite(xn) and np.isfinite(yn)):
            status = BLOWUP
            break
        tb = t + dt
        nev0 = nev
        f2 = _feval(fcode, fpar, vals, dim, xn, yn)
        prev, nev = _scan_leg(fcode, fpar, vals, gxa, gya, dim, levels,
                              x, y, f1, t, xn, yn, f2, tb,
                              prev, nev, ev_idx, ev_t, ev_x, ev_y)
        reflected = f2 > rhi or f2 < rlo
        if bridge == 1 and not reflected:
            fmin = f1 if f1 < f2 else f2
            fmax = f1 if f1 > f2 else f2
            # nearest levels strictly outside the leg's f-range
            k_up = -1
            for k in range(nlev - 1, -1, -1):
                if levels[k] > fmax:
                    k_up = k
                    break
            k_dn = -1
            for k in range(nlev):
                if levels[k] < fmin:
                    k_dn = k
                    break
            # conservative screen: |grad f|^2 <= gmax2 everywhere, so a level
            # with (z - f1)(z - f2) > 17 namp^2 gmax2 can never fire
            vmax = namp * namp * gmax2
            near = False
            if k_up >= 0:
                z = levels[k_up]
                near = (z - f1) * (z - f2) < 17.0 * vmax
            if not near and k_dn >= 0:
                z = levels[k_dn]
                near = (z - f1) * (z - f2) < 17.0 * vmax
            if near:
                gx, gy = _geval(fcode, fpar, gxa, gya, dim, xn, yn)
                # f-step variance: v dt = 2 <grad f, a grad f> dt = namp^2 |grad f|^2
                vdt = namp * namp * (gx * gx + gy * gy)
                if vdt > 0.0:
                    t_base = ev_t[nev - 1] if nev > nev0 else t
                    if k_up >= 0:
                        u = _step_uniform(salt, steps, 0)
                        prev, nev = _bridge_cascade(
                            fcode, fpar, vals, gxa, gya, dim, levels,
                            k_up, -1, u, f1, f2, vdt, x, y, xn, yn,
                            t_base, tb, prev, nev, ev_idx, ev_t, ev_x, ev_y)
                    if k_dn >= 0:
                        t_base = ev_t[nev - 1] if nev > nev0 else t
                        u = _step_uniform(salt, steps, 1)
                        prev, nev = _bridge_cascade(
                            fcode, fpar, vals, gxa, gya, dim, levels,
                            k_dn, +1, u, f1, f2, vdt, x, y, xn, yn,
                            t_base, tb, prev, nev, ev_idx, ev_t, ev_x, ev_y)
        if reflected:
            zb = rhi if f2 > rhi else rlo
            thb = (zb - f1) / (f2 - f1)
            tb0 = t + thb * dt
            xb = x + thb * (xn - x)
            yb = y + thb * (yn - y)
            xb, yb = _project(fcode, fpar, vals, gxa, gya, dim, xb, yb, zb)
            gx, gy = _geval(fcode, fpar, gxa, gya, dim, xn, yn)
            g2 = gx * gx + gy * gy
            if g2 < 1e-16:
                status = STEP_TOO_LARGE
                break
            s = 2.0 * (zb - f2) / g2
            xm = xn + s * gx
            ym = yn
            if dim == 2:
                ym = yn + s * gy
            fm = _feval(fcode, fpar, vals, dim, xm, ym)
            if fm > rhi or fm < rlo:
                # curvature pushed the mirror image out again: land on the wall
                xm, ym = _project(fcode, fpar, vals, gxa, gya, dim, xm, ym, zb)
                fm = _feval(fcode, fpar, vals, dim, xm, ym)
                if fm > rhi + 1e-8 or fm < rlo - 1e-8:
                    status = STEP_TOO_LARGE
                    break
            prev, nev = _scan_leg(fcode, fpar, vals, gxa, gya, dim, levels,
                                  xb, yb, zb, tb0, xm, ym, fm, tb,
                                  prev, nev, ev_idx, ev_t, ev_x, ev_y)
            xn, yn, f2 = xm, ym, fm
        x, y, t, f1 = xn, yn, tb, f2
        if rec_stride > 0 and steps % rec_stride == 0 and nrec < rec_t.shape[0]:
            rec_t[nrec] = t
            rec_x[nrec] = x
            rec_y[nrec] = y
            nrec += 1
    st[0] = x
    st[1] = y
    st[2] = t
    st[3] = f1
    ist[0] = prev
    ist[1] = nev
    ist[2] = noff
    ist[3] = steps
    ist[4] = nrec
    return status
