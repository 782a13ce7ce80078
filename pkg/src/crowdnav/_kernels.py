"""Compiled lower-level kernels: ORCA rows, exact projection, sensitivities, rollout.

These mirror the numpy reference code in ``crowdnav.orca``, ``crowdnav.refine``
and ``crowdnav.sicnav.rollout`` one-to-one; the tests cross-check them.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_EPS = 1e-12
INACTIVE_OFFSET = -1e9   # row used when two agents coincide; never binding

# layout of the scalar parameter vector passed to the rollout kernel
P_DT, P_HR, P_RR, P_TAU, P_TAU_OBST, P_RESP, P_ESC, P_VMAX, P_PEN, P_SIGMA, P_FLOOR = range(11)


@njit(cache=True)
def _circle(px, py, vx, vy, svx, svy, R, inv_t, resp, Jn_P, Jn_V):
    wx = vx - inv_t * px
    wy = vy - inv_t * py
    wlen = math.hypot(wx, wy)
    if wlen < _EPS:
        dist = math.hypot(px, py)
        nx, ny = -px / dist, -py / dist
        Jn_P[0, 0] = -(1.0 - nx * nx) / dist
        Jn_P[0, 1] = nx * ny / dist
        Jn_P[1, 0] = nx * ny / dist
        Jn_P[1, 1] = -(1.0 - ny * ny) / dist
        Jn_V[:, :] = 0.0
    else:
        nx, ny = wx / wlen, wy / wlen
        a00 = (1.0 - nx * nx) / wlen
        a01 = -nx * ny / wlen
        a11 = (1.0 - ny * ny) / wlen
        Jn_V[0, 0] = a00
        Jn_V[0, 1] = a01
        Jn_V[1, 0] = a01
        Jn_V[1, 1] = a11
        Jn_P[0, 0] = -inv_t * a00
        Jn_P[0, 1] = -inv_t * a01
        Jn_P[1, 0] = -inv_t * a01
        Jn_P[1, 1] = -inv_t * a11
    b = nx * svx + ny * svy + resp * (R * inv_t - wlen)
    dbPx = svx * Jn_P[0, 0] + svy * Jn_P[1, 0] + resp * inv_t * nx
    dbPy = svx * Jn_P[0, 1] + svy * Jn_P[1, 1] + resp * inv_t * ny
    dbVx = svx * Jn_V[0, 0] + svy * Jn_V[1, 0] - resp * nx
    dbVy = svx * Jn_V[0, 1] + svy * Jn_V[1, 1] - resp * ny
    return nx, ny, b, dbPx, dbPy, dbVx, dbVy


@njit(cache=True)
def _leg(px, py, vx, vy, svx, svy, R, resp, left, Jn_P, Jn_V):
    D = px * px + py * py
    L = math.sqrt(max(D - R * R, 0.0))
    Ls = max(L, _EPS)
    if left:
        mx, my = px * L - py * R, px * R + py * L
        d00, d01 = L + px * px / Ls, px * py / Ls - R
        d10, d11 = R + py * px / Ls, L + py * py / Ls
        sgn = 1.0
    else:
        mx, my = px * L + py * R, -px * R + py * L
        d00, d01 = L + px * px / Ls, px * py / Ls + R
        d10, d11 = -R + py * px / Ls, L + py * py / Ls
        sgn = -1.0
    dx, dy = sgn * mx / D, sgn * my / D
    D2 = D * D
    j00 = sgn * (d00 / D - mx * 2.0 * px / D2)
    j01 = sgn * (d01 / D - mx * 2.0 * py / D2)
    j10 = sgn * (d10 / D - my * 2.0 * px / D2)
    j11 = sgn * (d11 / D - my * 2.0 * py / D2)
    # n = rot90(d)
    nx, ny = -dy, dx
    Jn_P[0, 0] = -j10
    Jn_P[0, 1] = -j11
    Jn_P[1, 0] = j00
    Jn_P[1, 1] = j01
    Jn_V[:, :] = 0.0
    tx, ty = svx - resp * vx, svy - resp * vy
    b = nx * tx + ny * ty
    dbPx = tx * Jn_P[0, 0] + ty * Jn_P[1, 0]
    dbPy = tx * Jn_P[0, 1] + ty * Jn_P[1, 1]
    return nx, ny, b, dbPx, dbPy, -resp * nx, -resp * ny


@njit(cache=True)
def agent_row(spx, spy, svx, svy, opx, opy, ovx, ovy, R, tau, resp, esc, Jn, db):
    """ORCA row for ``self`` against ``other``; fills ``Jn`` (2, 8) and ``db`` (8,)."""
    px, py = opx - spx, opy - spy
    vx, vy = svx - ovx, svy - ovy
    dist_sq = px * px + py * py
    if dist_sq < _EPS * _EPS:
        Jn[:, :] = 0.0
        db[:] = 0.0
        return 1.0, 0.0, INACTIVE_OFFSET
    Jn_P = np.zeros((2, 2))
    Jn_V = np.zeros((2, 2))
    if dist_sq > R * R:
        inv_t = 1.0 / tau
        wx, wy = vx - inv_t * px, vy - inv_t * py
        dot1 = wx * px + wy * py
        if dot1 < 0.0 and dot1 * dot1 > R * R * (wx * wx + wy * wy):
            nx, ny, b, dPx, dPy, dVx, dVy = _circle(px, py, vx, vy, svx, svy, R, inv_t, resp, Jn_P, Jn_V)
        else:
            left = (px * wy - py * wx) > 0.0
            nx, ny, b, dPx, dPy, dVx, dVy = _leg(px, py, vx, vy, svx, svy, R, resp, left, Jn_P, Jn_V)
    else:
        nx, ny, b, dPx, dPy, dVx, dVy = _circle(px, py, vx, vy, svx, svy, R, 1.0 / esc, resp, Jn_P, Jn_V)
    for r in range(2):
        for c in range(2):
            Jn[r, c] = -Jn_P[r, c]
            Jn[r, 2 + c] = Jn_V[r, c]
            Jn[r, 4 + c] = Jn_P[r, c]
            Jn[r, 6 + c] = -Jn_V[r, c]
    db[0], db[1] = -dPx, -dPy
    db[2], db[3] = dVx + nx, dVy + ny
    db[4], db[5] = dPx, dPy
    db[6], db[7] = -dVx, -dVy
    return nx, ny, b


@njit(cache=True)
def obstacle_row(px, py, ax, ay, bx, by, radius, tau_obst, esc, Jn, db):
    """Nearest-feature wall row; ``Jn`` (2, 2) and ``db`` (2,) are w.r.t. the agent position."""
    sx, sy = bx - ax, by - ay
    t = ((px - ax) * sx + (py - ay) * sy) / (sx * sx + sy * sy)
    t = min(max(t, 0.0), 1.0)
    qx, qy = ax + t * sx, ay + t * sy
    dx, dy = px - qx, py - qy
    dist = math.hypot(dx, dy)
    if dist < _EPS:
        sl = math.hypot(sx, sy)
        nx, ny = -sy / sl, sx / sl
        Jn[:, :] = 0.0
    else:
        nx, ny = dx / dist, dy / dist
        if 0.0 < t < 1.0:
            Jn[:, :] = 0.0
        else:
            Jn[0, 0] = (1.0 - nx * nx) / dist
            Jn[0, 1] = -nx * ny / dist
            Jn[1, 0] = -nx * ny / dist
            Jn[1, 1] = (1.0 - ny * ny) / dist
    inv_t = 1.0 / tau_obst if dist >= radius else 1.0 / esc
    db[0], db[1] = -inv_t * nx, -inv_t * ny
    return nx, ny, (radius - dist) * inv_t


@njit(cache=True)
def _try_active(M, b, z0, r0, G, idx, size, tol, z, lam):
    """Candidate with rows ``idx[:size]`` active; returns squared distance or inf."""
    if size == 1:
        g = G[idx[0], idx[0]]
        if g < 1e-14:
            return np.inf
        lam[0] = r0[idx[0]] / g
    elif size == 2:
        a, c, d = G[idx[0], idx[0]], G[idx[0], idx[1]], G[idx[1], idx[1]]
        det = a * d - c * c
        if abs(det) < 1e-12 * a * d:
            return np.inf
        lam[0] = (d * r0[idx[0]] - c * r0[idx[1]]) / det
        lam[1] = (a * r0[idx[1]] - c * r0[idx[0]]) / det
    else:
        A3 = np.empty((3, 3))
        rhs = np.empty(3)
        for p in range(3):
            rhs[p] = r0[idx[p]]
            for q in range(3):
                A3[p, q] = G[idx[p], idx[q]]
        det = np.linalg.det(A3)
        if abs(det) < 1e-12 * A3[0, 0] * A3[1, 1] * A3[2, 2]:
            return np.inf
        sol = np.linalg.solve(A3, rhs)
        lam[0], lam[1], lam[2] = sol[0], sol[1], sol[2]
    mag = 0.0
    for q in range(size):
        if lam[q] < -tol:
            return np.inf
        mag += abs(lam[q])
    # rounding in z grows with the multiplier size
    tol = tol + 1e-13 * mag
    z[0], z[1], z[2] = z0[0], z0[1], z0[2]
    for q in range(size):
        for c2 in range(3):
            z[c2] += lam[q] * M[idx[q], c2]
    for i in range(M.shape[0]):
        if M[i, 0] * z[0] + M[i, 1] * z[1] + M[i, 2] * z[2] - b[i] < -tol:
            return np.inf
    return (z[0] - z0[0]) ** 2 + (z[1] - z0[1]) ** 2 + (z[2] - z0[2]) ** 2


@njit(cache=True)
def _project(M, b, z0, z_out, ell_out):
    """Projection of ``z0`` onto ``{M z >= b}`` in R^3 by active-set enumeration.

    Every projection in three dimensions has an optimal active set of at most
    three independent rows, so checking all of them is exact. Returns False
    if no candidate is feasible.
    """
    k = M.shape[0]
    r0 = np.empty(k)
    scale = 1.0
    for i in range(k):
        r0[i] = b[i] - (M[i, 0] * z0[0] + M[i, 1] * z0[1] + M[i, 2] * z0[2])
        scale = max(scale, abs(b[i]))
    tol = 1e-11 * scale
    if r0.max() <= 0.0 if k else True:
        z_out[:] = z0
        ell_out[:] = 0.0
        return True
    G = M @ M.T
    best = np.inf
    z = np.empty(3)
    lam = np.empty(3)
    idx = np.empty(3, dtype=np.int64)
    best_idx = np.empty(3, dtype=np.int64)
    best_lam = np.zeros(3)
    best_size = 0
    for i0 in range(k):
        idx[0] = i0
        for size in range(1, 4):
            # enumerate supersets of i0 with increasing indices
            if size == 1:
                dist = _try_active(M, b, z0, r0, G, idx, 1, tol, z, lam)
                if dist < best:
                    best, best_size = dist, 1
                    best_idx[:] = idx
                    best_lam[:] = lam
                    z_out[:] = z
            elif size == 2:
                for i1 in range(i0 + 1, k):
                    idx[1] = i1
                    dist = _try_active(M, b, z0, r0, G, idx, 2, tol, z, lam)
                    if dist < best:
                        best, best_size = dist, 2
                        best_idx[:] = idx
                        best_lam[:] = lam
                        z_out[:] = z
            else:
                for i1 in range(i0 + 1, k):
                    idx[1] = i1
                    for i2 in range(i1 + 1, k):
                        idx[2] = i2
                        dist = _try_active(M, b, z0, r0, G, idx, 3, tol, z, lam)
                        if dist < best:
                            best, best_size = dist, 3
                            best_idx[:] = idx
                            best_lam[:] = lam
                            z_out[:] = z
    ell_out[:] = 0.0
    for q in range(best_size):
        ell_out[best_idx[q]] = max(best_lam[q], 0.0)
    return best_size > 0


@njit(cache=True)
def _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, mu, v_out, lam_out):
    k = N.shape[0]
    root = math.sqrt(1.0 + mu)
    M = np.empty((k, 3))
    for i in range(k):
        M[i, 0] = N[i, 0] / root
        M[i, 1] = N[i, 1] / root
        M[i, 2] = relax[i] / sqrt_pen
    z0 = np.array([vix / root, viy / root, 0.0])
    z = np.empty(3)
    ell = np.empty(k)
    ok = _project(M, b, z0, z, ell)
    v_out[0] = z[0] / root
    v_out[1] = z[1] / root
    for i in range(k):
        lam_out[i] = 2.0 * ell[i]
    return ok


@njit(cache=True)
def orca_solve(N, b, relax, vix, viy, vmax, pen, v_out, lam_out):
    """Relaxed ORCA QP. Returns ``(status, slack, mu)``; status 0 ok, 1 infeasible."""
    k = N.shape[0]
    vmax_sq = vmax * vmax
    feasible = True
    for i in range(k):
        if N[i, 0] * vix + N[i, 1] * viy - b[i] < 0.0:
            feasible = False
            break
    if feasible and vix * vix + viy * viy <= vmax_sq:
        v_out[0], v_out[1] = vix, viy
        lam_out[:] = 0.0
        return 0, 0.0, 0.0
    sqrt_pen = math.sqrt(pen)
    if not _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, 0.0, v_out, lam_out):
        return 1, 0.0, 0.0
    mu = 0.0
    h0 = v_out[0] ** 2 + v_out[1] ** 2 - vmax_sq
    if h0 > vmax_sq * 1e-14:
        lo, hlo = 0.0, h0
        hi = 1.0
        if not _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, hi, v_out, lam_out):
            return 1, 0.0, 0.0
        hhi = v_out[0] ** 2 + v_out[1] ** 2 - vmax_sq
        while hhi > 0.0:
            lo, hlo = hi, hhi
            hi *= 4.0
            if hi > 1e10:
                return 1, 0.0, 0.0
            if not _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, hi, v_out, lam_out):
                return 1, 0.0, 0.0
            hhi = v_out[0] ** 2 + v_out[1] ** 2 - vmax_sq
        # Illinois regula falsi on the monotone speed residual
        side = 0
        for _ in range(200):
            if hi - lo <= 1e-15 * (1.0 + hi):
                break
            m = (lo * hhi - hi * hlo) / (hhi - hlo)
            if not (lo < m < hi):
                m = 0.5 * (lo + hi)
            if not _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, m, v_out, lam_out):
                return 1, 0.0, 0.0
            hm = v_out[0] ** 2 + v_out[1] ** 2 - vmax_sq
            if hm == 0.0:
                lo = hi = m
                hhi = 0.0
                break
            if hm > 0.0:
                lo, hlo = m, hm
                if side == 1:
                    hhi *= 0.5
                side = 1
            else:
                hi, hhi = m, hm
                if side == -1:
                    hlo *= 0.5
                side = -1
        mu = hi
        if not _solve_at_mu(N, b, relax, vix, viy, sqrt_pen, mu, v_out, lam_out):
            return 1, 0.0, 0.0
    slack = 0.0
    for i in range(k):
        slack += relax[i] * lam_out[i]
    return 0, slack / (2.0 * pen), mu


@njit(cache=True)
def orca_sensitivity(N, relax, v, lam, mu, pen, dv_dint, dv_dn, dv_db):
    """Active-set derivatives of the ORCA velocity (see ``orca.solution_sensitivity``)."""
    k = N.shape[0]
    m = 0
    for i in range(k):
        if lam[i] > 1e-12:
            m += 1
    act = np.empty(m, dtype=np.int64)
    q = 0
    for i in range(k):
        if lam[i] > 1e-12:
            act[q] = i
            q += 1
    disc = 1 if mu > 0.0 else 0
    size = 3 + m + disc
    K = np.zeros((size, size))
    K[0, 0] = 2.0 * (1.0 + mu)
    K[1, 1] = 2.0 * (1.0 + mu)
    K[2, 2] = 2.0 * pen
    for jj in range(m):
        i = act[jj]
        K[0, 3 + jj] = -N[i, 0]
        K[1, 3 + jj] = -N[i, 1]
        K[2, 3 + jj] = -relax[i]
        K[3 + jj, 0] = N[i, 0]
        K[3 + jj, 1] = N[i, 1]
        K[3 + jj, 2] = relax[i]
    if disc:
        K[0, size - 1] = 2.0 * v[0]
        K[1, size - 1] = 2.0 * v[1]
        K[size - 1, 0] = 2.0 * v[0]
        K[size - 1, 1] = 2.0 * v[1]
    nparam = 2 + 3 * m
    Fp = np.zeros((size, nparam))
    Fp[0, 0] = -2.0
    Fp[1, 1] = -2.0
    for jj in range(m):
        i = act[jj]
        col = 2 + 3 * jj
        Fp[0, col] = -lam[i]
        Fp[1, col + 1] = -lam[i]
        Fp[3 + jj, col] = v[0]
        Fp[3 + jj, col + 1] = v[1]
        Fp[3 + jj, col + 2] = -1.0
    if abs(np.linalg.det(K)) > 1e-300:
        dy = -np.linalg.solve(K, Fp)
    else:
        dy = -np.linalg.lstsq(K, Fp)[0]
    dv_dn[:, :, :] = 0.0
    dv_db[:, :] = 0.0
    for r in range(2):
        dv_dint[r, 0] = dy[r, 0]
        dv_dint[r, 1] = dy[r, 1]
    for jj in range(m):
        i = act[jj]
        col = 2 + 3 * jj
        for r in range(2):
            dv_dn[i, r, 0] = dy[r, col]
            dv_dn[i, r, 1] = dy[r, col + 1]
            dv_db[i, r] = dy[r, col + 2]


@njit(cache=True)
def weight_update_kernel(prev, refined, samples_t, sigma, floor, with_jac, d_prev, d_x):
    """Importance-weight update; mirrors ``refine.weight_update_jac``."""
    s = prev.shape[0]
    n = refined.shape[0]
    w = np.empty(s)
    if n == 0:
        w[:] = prev
        if with_jac:
            d_prev[:, :] = np.eye(s)
        return w
    logit = np.empty(s)
    for a in range(s):
        e = 0.0
        for j in range(n):
            dx = samples_t[a, j, 0] - refined[j, 0]
            dy = samples_t[a, j, 1] - refined[j, 1]
            e += dx * dx + dy * dy
        logit[a] = -e / (n * sigma)
    mx = logit.max()
    bar = np.exp(logit - mx)
    bar /= bar.sum()
    prod = prev * bar
    total = prod.sum()
    if total > 0.0 and np.isfinite(total):
        w[:] = prod / total
    else:
        w[:] = bar
        total = 0.0
    if with_jac:
        if total > 0.0:
            for a in range(s):
                for c in range(s):
                    d_prev[a, c] = ((bar[c] if a == c else 0.0) - w[a] * bar[c]) / total
        else:
            d_prev[:, :] = 0.0
        d_err = np.empty((s, s))
        for a in range(s):
            for c in range(s):
                d_err[a, c] = -((w[a] if a == c else 0.0) - w[a] * w[c]) / (n * sigma)
        derr_dx = np.empty((s, 2 * n))
        for a in range(s):
            for j in range(n):
                derr_dx[a, 2 * j] = -2.0 * (samples_t[a, j, 0] - refined[j, 0])
                derr_dx[a, 2 * j + 1] = -2.0 * (samples_t[a, j, 1] - refined[j, 1])
        d_x[:, :] = d_err @ derr_dx
    if floor > 0.0:
        f = np.maximum(w, floor)
        ftot = f.sum()
        out = f / ftot
        if with_jac:
            proj = np.empty((s, s))
            for a in range(s):
                for c in range(s):
                    proj[a, c] = ((1.0 if a == c else 0.0) - out[a]) / ftot
            for a in range(s):
                if not w[a] > floor:
                    d_prev[a, :] = 0.0
                    d_x[a, :] = 0.0
            d_prev[:, :] = proj @ d_prev
            d_x[:, :] = proj @ d_x
        w = out
    return w


@njit(cache=True)
def bilevel_rollout(robot0, hpos0, hvel0, samples, w0, u, segs, prm, with_jac):
    """Forward rollout of robot plan, ORCA-refined humans and weights.

    ``samples`` is (S, N, T, 2) and ``segs`` is (M, 4). Row order for human
    ``j``'s half-planes: other humans ascending, then the robot, then walls.
    Returns arrays documented in ``crowdnav.sicnav.rollout.Rollout``.
    """
    dt = prm[P_DT]
    T = u.shape[0]
    n_h = hpos0.shape[0]
    S = w0.shape[0]
    M = segs.shape[0]
    nu = 2 * T
    K = max(n_h - 1, 0) + 1 + M
    h_comb = 2.0 * prm[P_HR]
    r_comb = prm[P_HR] + prm[P_RR]

    robot = np.empty((T + 1, 4))
    robot[0] = robot0
    d_rp = np.zeros((T + 1, 2, nu))
    d_th = np.zeros((T + 1, nu))
    d_sp = np.zeros((T + 1, nu))
    for t in range(T):
        th = robot[t, 2]
        c, s = math.cos(th), math.sin(th)
        v, w = u[t, 0], u[t, 1]
        robot[t + 1, 0] = robot[t, 0] + dt * v * c
        robot[t + 1, 1] = robot[t, 1] + dt * v * s
        robot[t + 1, 2] = th + dt * w
        robot[t + 1, 3] = v
        if with_jac:
            for col in range(nu):
                d_rp[t + 1, 0, col] = d_rp[t, 0, col] - dt * v * s * d_th[t, col]
                d_rp[t + 1, 1, col] = d_rp[t, 1, col] + dt * v * c * d_th[t, col]
                d_th[t + 1, col] = d_th[t, col]
            d_rp[t + 1, 0, 2 * t] += dt * c
            d_rp[t + 1, 1, 2 * t] += dt * s
            d_th[t + 1, 2 * t + 1] += dt
            d_sp[t + 1, 2 * t] = 1.0

    humans = np.empty((T + 1, n_h, 2))
    humans[0] = hpos0
    vel = np.empty((T + 1, n_h, 2))
    vel[0] = hvel0
    weights = np.empty((T + 1, S))
    weights[0] = w0
    normals = np.zeros((T, n_h, K, 2))
    offsets = np.zeros((T, n_h, K))
    relaxes = np.zeros((T, n_h, K))
    duals = np.zeros((T, n_h, K))
    mus = np.zeros((T, n_h))
    slacks = np.zeros((T, n_h))
    intents = np.zeros((T, n_h, 2))
    status = 0
    d_hp = np.zeros((T + 1, n_h, 2, nu))
    d_hv = np.zeros((T + 1, n_h, 2, nu))
    d_w = np.zeros((T + 1, S, nu))

    Jn_all = np.zeros((K, 2, 8))
    db_all = np.zeros((K, 8))
    other = np.zeros(K, dtype=np.int64)
    Jn2 = np.zeros((2, 2))
    db2 = np.zeros(2)
    v_sol = np.zeros(2)
    lam = np.zeros(K)
    dv_dint = np.zeros((2, 2))
    dv_dn = np.zeros((K, 2, 2))
    dv_db = np.zeros((K, 2))
    d_rv = np.zeros((2, nu))
    stack = np.zeros((8, nu))
    dwp = np.zeros((S, S))
    dwx = np.zeros((S, 2 * n_h))

    for t in range(T):
        rpx, rpy, th, sp = robot[t, 0], robot[t, 1], robot[t, 2], robot[t, 3]
        hc, hs = math.cos(th), math.sin(th)
        rvx, rvy = sp * hc, sp * hs
        if with_jac:
            for col in range(nu):
                d_rv[0, col] = hc * d_sp[t, col] - sp * hs * d_th[t, col]
                d_rv[1, col] = hs * d_sp[t, col] + sp * hc * d_th[t, col]
        for j in range(n_h):
            hpx, hpy = humans[t, j, 0], humans[t, j, 1]
            hvx, hvy = vel[t, j, 0], vel[t, j, 1]
            r = 0
            for k in range(n_h):
                if k == j:
                    continue
                nx, ny, b = agent_row(hpx, hpy, hvx, hvy, humans[t, k, 0], humans[t, k, 1],
                                      vel[t, k, 0], vel[t, k, 1], h_comb, prm[P_TAU], prm[P_RESP],
                                      prm[P_ESC], Jn_all[r], db_all[r])
                normals[t, j, r, 0], normals[t, j, r, 1], offsets[t, j, r] = nx, ny, b
                relaxes[t, j, r] = 1.0
                other[r] = k
                r += 1
            nx, ny, b = agent_row(hpx, hpy, hvx, hvy, rpx, rpy, rvx, rvy, r_comb, prm[P_TAU],
                                  prm[P_RESP], prm[P_ESC], Jn_all[r], db_all[r])
            normals[t, j, r, 0], normals[t, j, r, 1], offsets[t, j, r] = nx, ny, b
            relaxes[t, j, r] = 1.0
            other[r] = -1
            r += 1
            for m_ in range(M):
                nx, ny, b = obstacle_row(hpx, hpy, segs[m_, 0], segs[m_, 1], segs[m_, 2], segs[m_, 3],
                                         prm[P_HR], prm[P_TAU_OBST], prm[P_ESC], Jn2, db2)
                normals[t, j, r, 0], normals[t, j, r, 1], offsets[t, j, r] = nx, ny, b
                relaxes[t, j, r] = 0.0
                Jn_all[r, :, :] = 0.0
                Jn_all[r, :, 0:2] = Jn2
                db_all[r, :] = 0.0
                db_all[r, 0:2] = db2
                other[r] = -2
                r += 1
            ix, iy = 0.0, 0.0
            for a in range(S):
                ix += weights[t, a] * samples[a, j, t, 0]
                iy += weights[t, a] * samples[a, j, t, 1]
            vix, viy = (ix - hpx) / dt, (iy - hpy) / dt
            intents[t, j, 0], intents[t, j, 1] = vix, viy
            Nj = normals[t, j]
            st, slack, mu = orca_solve(Nj, offsets[t, j], relaxes[t, j], vix, viy, prm[P_VMAX],
                                       prm[P_PEN], v_sol, lam)
            if st != 0:
                # squeezed between walls: soften every row so the rollout stays total
                status = 1
                relaxes[t, j, :] = 1.0
                st, slack, mu = orca_solve(Nj, offsets[t, j], relaxes[t, j], vix, viy, prm[P_VMAX],
                                           prm[P_PEN], v_sol, lam)
            duals[t, j] = lam
            mus[t, j] = mu
            slacks[t, j] = slack
            humans[t + 1, j, 0] = hpx + dt * v_sol[0]
            humans[t + 1, j, 1] = hpy + dt * v_sol[1]
            vel[t + 1, j, 0], vel[t + 1, j, 1] = v_sol[0], v_sol[1]
            if not with_jac:
                continue
            orca_sensitivity(Nj, relaxes[t, j], v_sol, lam, mu, prm[P_PEN], dv_dint, dv_dn, dv_db)
            # d intent = (Y^T dW - dp) / dt
            dvi = np.zeros((2, nu))
            for a in range(S):
                for col in range(nu):
                    dvi[0, col] += samples[a, j, t, 0] * d_w[t, a, col]
                    dvi[1, col] += samples[a, j, t, 1] * d_w[t, a, col]
            for q in range(2):
                for col in range(nu):
                    dvi[q, col] = (dvi[q, col] - d_hp[t, j, q, col]) / dt
            dv = dv_dint @ dvi
            for i in range(K):
                if lam[i] <= 1e-12:
                    continue
                if other[i] == -2:
                    Jw = Jn_all[i, :, 0:2].copy()
                    dn = Jw @ d_hp[t, j]
                    dbv = db_all[i, 0:2].copy() @ d_hp[t, j]
                else:
                    stack[0:2] = d_hp[t, j]
                    stack[2:4] = d_hv[t, j]
                    if other[i] == -1:
                        stack[4:6] = d_rp[t]
                        stack[6:8] = d_rv
                    else:
                        stack[4:6] = d_hp[t, other[i]]
                        stack[6:8] = d_hv[t, other[i]]
                    dn = Jn_all[i] @ stack
                    dbv = db_all[i] @ stack
                dv += dv_dn[i] @ dn
                for q in range(2):
                    for col in range(nu):
                        dv[q, col] += dv_db[i, q] * dbv[col]
            d_hp[t + 1, j] = d_hp[t, j] + dt * dv
            d_hv[t + 1, j] = dv
        w_new = weight_update_kernel(weights[t], humans[t + 1], samples[:, :, t, :].copy(),
                                     prm[P_SIGMA], prm[P_FLOOR], with_jac, dwp, dwx)
        weights[t + 1] = w_new
        if with_jac:
            d_w[t + 1] = dwp @ d_w[t] + dwx @ d_hp[t + 1].reshape(2 * n_h, nu)
    return (robot, humans, vel[1:].copy(), weights, d_rp, d_hp, normals, offsets, relaxes,
            duals, mus, slacks, intents, status)
