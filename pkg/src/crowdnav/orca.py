"""ORCA half-planes and the relaxed per-agent velocity QP.

Half-planes are stored as ``{v : normal . v >= offset}``. Agent-agent
half-planes are marked relaxable: the solver loosens all of them by one shared
non-negative slack ``s`` that costs ``relaxation_penalty * s**2``. Obstacle
half-planes are hard.

The ``*_jac`` variants also return derivatives of (normal, offset) with
respect to the geometric inputs; the bilevel planner differentiates through
them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from crowdnav.core import Segment, closest_point_on_segment
from crowdnav.nlp.qp import QPInfeasibleError, solve_qp

_EPS = 1e-12
_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


class DegenerateGeometryError(ValueError):
    """Two agents share a position, so no separating direction exists."""


class InfeasibleGeometryError(RuntimeError):
    """Hard (obstacle) constraints and the speed disc have no common point."""


@dataclass(frozen=True)
class HalfPlane:
    normal: np.ndarray
    offset: float
    relaxable: bool = True

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(2)
        norm = np.linalg.norm(n)
        if not abs(norm - 1.0) <= 1e-9:
            raise ValueError(f"half-plane normal must be unit length, got norm {norm}")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def value(self, v) -> float:
        """Signed satisfaction ``normal . v - offset`` (>= 0 means feasible)."""
        return float(self.normal @ np.asarray(v, dtype=float) - self.offset)


@dataclass(frozen=True)
class OrcaParams:
    time_horizon: float = 3.0
    time_horizon_obst: float = 2.0
    responsibility: float = 0.5
    max_speed: float = 2.0
    relaxation_penalty: float = 1e4
    time_step: float = 0.25  # escape horizon for overlapping agents

    def __post_init__(self):
        if self.time_horizon <= 0 or self.time_horizon_obst <= 0 or self.time_step <= 0:
            raise ValueError("ORCA horizons must be positive")
        if not 0.0 <= self.responsibility <= 1.0:
            raise ValueError("responsibility must lie in [0, 1]")
        if self.max_speed <= 0 or self.relaxation_penalty <= 0:
            raise ValueError("max_speed and relaxation_penalty must be positive")


@dataclass
class OrcaSolution:
    velocity: np.ndarray
    duals: np.ndarray
    slack: float = 0.0
    disc_dual: float = 0.0
    active_set: tuple = field(default_factory=tuple)

    @property
    def speed_limited(self) -> bool:
        return self.disc_dual > 0.0


# ---------------------------------------------------------------------------
# half-plane construction
# ---------------------------------------------------------------------------

def _circle_type(P, V, self_vel, R, inv_t, resp):
    """Projection onto a cutoff circle (also used for the overlap escape)."""
    w = V - inv_t * P
    wlen = math.hypot(w[0], w[1])
    Jn_P = np.zeros((2, 2))
    Jn_V = np.zeros((2, 2))
    if wlen < _EPS:
        dist = math.hypot(P[0], P[1])
        n = -P / dist
        Jn_P = -(np.eye(2) - np.outer(n, n)) / dist
    else:
        n = w / wlen
        dn_dw = (np.eye(2) - np.outer(n, n)) / wlen
        Jn_P = -inv_t * dn_dw
        Jn_V = dn_dw
    b = float(n @ self_vel) + resp * (R * inv_t - wlen)
    # d|w| = n . dw
    db_P = self_vel @ Jn_P + resp * inv_t * n
    db_V = self_vel @ Jn_V - resp * n
    return n, b, Jn_P, Jn_V, db_P, db_V


def _leg_type(P, V, self_vel, R, resp, left: bool):
    px, py = P
    D = px * px + py * py
    L = math.sqrt(max(D - R * R, 0.0))
    Ls = max(L, _EPS)
    if left:
        m = np.array([px * L - py * R, px * R + py * L])
        dm = np.array([[L + px * px / Ls, px * py / Ls - R],
                       [R + py * px / Ls, L + py * py / Ls]])
        sgn = 1.0
    else:
        m = np.array([px * L + py * R, -px * R + py * L])
        dm = np.array([[L + px * px / Ls, px * py / Ls + R],
                       [-R + py * px / Ls, L + py * py / Ls]])
        sgn = -1.0
    d = sgn * m / D
    Jd = sgn * (dm / D - np.outer(m, 2.0 * P) / (D * D))
    n = _ROT90 @ d
    Jn_P = _ROT90 @ Jd
    Jn_V = np.zeros((2, 2))
    target = self_vel - resp * V
    b = float(n @ target)
    db_P = target @ Jn_P
    db_V = -resp * n
    return n, b, Jn_P, Jn_V, db_P, db_V


def agent_halfplane_jac(self_pos, self_vel, other_pos, other_vel, combined_radius: float,
                        time_horizon: float, responsibility: float = 0.5,
                        time_step: float = 0.25):
    """ORCA half-plane for ``self`` induced by ``other`` plus its derivatives.

    Returns ``(normal, offset, dnormal, doffset)`` where the derivatives are
    taken with respect to ``[self_pos, self_vel, other_pos, other_vel]``
    (shapes (2, 8) and (8,)).
    """
    self_pos = np.asarray(self_pos, dtype=float)
    self_vel = np.asarray(self_vel, dtype=float)
    P = np.asarray(other_pos, dtype=float) - self_pos
    V = self_vel - np.asarray(other_vel, dtype=float)
    R = float(combined_radius)
    dist_sq = float(P @ P)
    if dist_sq < _EPS * _EPS:
        raise DegenerateGeometryError("agents share a position")
    if dist_sq > R * R:
        inv_t = 1.0 / time_horizon
        w = V - inv_t * P
        dot1 = float(w @ P)
        if dot1 < 0.0 and dot1 * dot1 > R * R * float(w @ w):
            parts = _circle_type(P, V, self_vel, R, inv_t, responsibility)
        else:
            left = (P[0] * w[1] - P[1] * w[0]) > 0.0
            parts = _leg_type(P, V, self_vel, R, responsibility, left)
    else:
        parts = _circle_type(P, V, self_vel, R, 1.0 / time_step, responsibility)
    n, b, Jn_P, Jn_V, db_P, db_V = parts
    # chain rule: P = op - sp, V = sv - ov; offset also depends on sv directly
    Jn = np.hstack([-Jn_P, Jn_V, Jn_P, -Jn_V])
    db = np.concatenate([-db_P, db_V + n, db_P, -db_V])
    return n, b, Jn, db


def agent_halfplane(self_pos, self_vel, other_pos, other_vel, combined_radius: float,
                    time_horizon: float, responsibility: float = 0.5,
                    time_step: float = 0.25) -> HalfPlane:
    if combined_radius <= 0 or time_horizon <= 0:
        raise ValueError("combined_radius and time_horizon must be positive")
    n, b, _, _ = agent_halfplane_jac(self_pos, self_vel, other_pos, other_vel,
                                     combined_radius, time_horizon, responsibility, time_step)
    return HalfPlane(n, b, relaxable=True)


def obstacle_halfplane_jac(self_pos, endpoint_a, endpoint_b, radius: float,
                           time_horizon_obst: float, time_step: float = 0.25):
    """Nearest-feature linearised obstacle constraint and its derivative in ``self_pos``.

    Returns ``(normal, offset, dnormal (2, 2), doffset (2,))``.
    """
    p = np.asarray(self_pos, dtype=float)
    q, t = closest_point_on_segment(p, endpoint_a, endpoint_b)
    diff = p - q
    dist = math.hypot(diff[0], diff[1])
    if dist < _EPS:
        seg = endpoint_b - endpoint_a
        n = _ROT90 @ (seg / np.linalg.norm(seg))
        Jn = np.zeros((2, 2))
    else:
        n = diff / dist
        if 0.0 < t < 1.0:
            Jn = np.zeros((2, 2))
        else:
            Jn = (np.eye(2) - np.outer(n, n)) / dist
    inv_t = 1.0 / time_horizon_obst if dist >= radius else 1.0 / time_step
    b = (radius - dist) * inv_t
    db = -inv_t * n
    return n, b, Jn, db


def obstacle_halfplane(self_pos, segment: Segment, radius: float, time_horizon_obst: float,
                       time_step: float = 0.25) -> list[HalfPlane]:
    n, b, _, _ = obstacle_halfplane_jac(self_pos, segment.endpoint_a, segment.endpoint_b,
                                        radius, time_horizon_obst, time_step)
    return [HalfPlane(n, b, relaxable=False)]


# ---------------------------------------------------------------------------
# relaxed QP
# ---------------------------------------------------------------------------

def _stack(halfplanes: Sequence[HalfPlane]):
    k = len(halfplanes)
    N = np.empty((k, 2))
    b = np.empty(k)
    a = np.empty(k)
    for i, hp in enumerate(halfplanes):
        N[i] = hp.normal
        b[i] = hp.offset
        a[i] = 1.0 if hp.relaxable else 0.0
    return N, b, a


def solve_orca_arrays(N: np.ndarray, b: np.ndarray, relax: np.ndarray, v_intent: np.ndarray,
                      max_speed: float, penalty: float) -> OrcaSolution:
    """Array-level solver behind :func:`solve_orca_qp`.

    Works in ``y = (v, sqrt(penalty) * s)`` so the objective is an isotropic
    projection; the speed disc is handled through its multiplier ``mu`` by a
    monotone root search, each evaluation being an exact active-set solve.
    """
    v_intent = np.asarray(v_intent, dtype=float)
    k = N.shape[0]
    vmax_sq = max_speed * max_speed
    if k == 0 or np.all(N @ v_intent - b >= 0.0):
        if float(v_intent @ v_intent) <= vmax_sq:
            return OrcaSolution(v_intent.copy(), np.zeros(k), 0.0, 0.0, ())
    sqrt_pen = math.sqrt(penalty)
    A = np.hstack([N, (relax / sqrt_pen)[:, None]]) if k else np.zeros((0, 3))

    def solve_mu(mu):
        # returns (y = (v, sigma), duals)
        H = np.diag([2.0 * (1.0 + mu), 2.0 * (1.0 + mu), 2.0])
        c = np.array([-2.0 * v_intent[0], -2.0 * v_intent[1], 0.0])
        L = np.diag(np.sqrt(np.diag(H)))
        try:
            res = solve_qp(H, c, A_in=A, b_in=b, chol_lower=L, tol=1e-13)
        except QPInfeasibleError as exc:
            raise InfeasibleGeometryError("obstacle half-planes are infeasible") from exc
        return res.x, res.y_in

    y, duals = solve_mu(0.0)
    mu = 0.0
    v = y[:2]
    if float(v @ v) > vmax_sq * (1.0 + 1e-14):
        def h(m):
            x = solve_mu(m)[0][:2]
            return float(x @ x) - vmax_sq

        hi = 1.0
        while h(hi) > 0.0:
            hi *= 4.0
            if hi > 1e10:
                raise InfeasibleGeometryError("speed disc does not meet the obstacle half-planes")
        mu = brentq(h, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        y, duals = solve_mu(mu)
        v = y[:2]
    duals = np.array(duals, dtype=float)
    slack = float(relax @ duals) / (2.0 * penalty)
    active = tuple(i for i in range(k) if duals[i] > 0.0)
    return OrcaSolution(np.array(v), duals, slack, float(mu), active)


def solve_orca_qp(halfplanes: Sequence[HalfPlane], v_intent, params: OrcaParams) -> OrcaSolution:
    """Closest velocity to ``v_intent`` inside the (relaxed) ORCA polygon and speed disc."""
    v_intent = np.asarray(v_intent, dtype=float).reshape(2)
    if not np.all(np.isfinite(v_intent)):
        raise ValueError("v_intent must be finite")
    if len(halfplanes) > 64:
        raise ValueError("at most 64 half-planes are supported")
    N, b, a = _stack(halfplanes) if halfplanes else (np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    return solve_orca_arrays(N, b, a, v_intent, params.max_speed, params.relaxation_penalty)


def kkt_residuals_arrays(N, b, relax, sol: OrcaSolution, v_intent, max_speed, penalty) -> np.ndarray:
    v = np.asarray(sol.velocity, dtype=float)
    lam = np.asarray(sol.duals, dtype=float)
    mu = sol.disc_dual
    s = sol.slack
    stat_v = 2.0 * (v - v_intent) + 2.0 * mu * v - (N.T @ lam if lam.size else 0.0)
    stat_s = 2.0 * penalty * s - float(relax @ lam)
    g = N @ v + relax * s - b
    disc = max_speed * max_speed - float(v @ v)
    primal = np.concatenate([np.maximum(0.0, -g), [max(0.0, -disc)]])
    dual = np.concatenate([np.minimum(0.0, lam), [min(0.0, mu)]])
    comp = np.concatenate([lam * g, [mu * disc]])
    return np.concatenate([np.atleast_1d(stat_v), [stat_s], primal, dual, comp])


def kkt_residuals(halfplanes: Sequence[HalfPlane], solution: OrcaSolution, v_intent,
                  params: OrcaParams) -> np.ndarray:
    """Stationarity, primal violation, dual sign and complementarity residuals.

    Layout: ``[stat_v (2), stat_slack (1), primal (K+1), dual (K+1), comp (K+1)]``
    where the trailing entry of each block belongs to the speed disc.
    """
    if len(solution.duals) != len(halfplanes):
        raise ValueError("solution duals do not match the half-plane count")
    N, b, a = _stack(halfplanes) if halfplanes else (np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    return kkt_residuals_arrays(N, b, a, solution, np.asarray(v_intent, dtype=float),
                                params.max_speed, params.relaxation_penalty)


def solution_sensitivity(N, b, relax, sol: OrcaSolution, penalty: float, active_tol: float = 1e-12):
    """Derivatives of the optimal velocity on the current active set.

    Returns ``(dv_dintent (2, 2), dv_dnormal (K, 2, 2), dv_doffset (K, 2))``
    with ``dv_dnormal[i][:, c]`` the change of ``v`` per unit change of
    component ``c`` of normal ``i``.
    """
    k = N.shape[0]
    v = sol.velocity
    lam = sol.duals
    act = [i for i in range(k) if lam[i] > active_tol]
    disc = sol.disc_dual > 0.0
    m = len(act)
    size = 3 + m + (1 if disc else 0)
    K = np.zeros((size, size))
    K[0:2, 0:2] = 2.0 * (1.0 + sol.disc_dual) * np.eye(2)
    K[2, 2] = 2.0 * penalty
    for j, i in enumerate(act):
        K[0:2, 3 + j] = -N[i]
        K[2, 3 + j] = -relax[i]
        K[3 + j, 0:2] = N[i]
        K[3 + j, 2] = relax[i]
    if disc:
        K[0:2, -1] = 2.0 * v
        K[-1, 0:2] = 2.0 * v
    # right-hand sides: columns are parameters
    nparam = 2 + 3 * m
    Fp = np.zeros((size, nparam))
    Fp[0:2, 0:2] = -2.0 * np.eye(2)
    for j, i in enumerate(act):
        col = 2 + 3 * j
        Fp[0:2, col:col + 2] = -lam[i] * np.eye(2)
        Fp[3 + j, col:col + 2] = v
        Fp[3 + j, col + 2] = -1.0
    try:
        dy = -np.linalg.solve(K, Fp)
    except np.linalg.LinAlgError:
        dy = -np.linalg.lstsq(K, Fp, rcond=None)[0]
    dv = dy[0:2]
    dv_dint = dv[:, 0:2]
    dv_dn = np.zeros((k, 2, 2))
    dv_db = np.zeros((k, 2))
    for j, i in enumerate(act):
        col = 2 + 3 * j
        dv_dn[i] = dv[:, col:col + 2]
        dv_db[i] = dv[:, col + 2]
    return dv_dint, dv_dn, dv_db
