"""Reduced-space bilevel problem: robot actions are the only decision variables.

Each lower-level ORCA problem is solved exactly during a forward rollout and
differentiated through its active set, so the upper level sees refined human
trajectories and importance weights as smooth-almost-everywhere functions of
the plan. At every rollout the lower-level KKT conditions hold exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from crowdnav import _kernels
from crowdnav.nlp.problem import NlpProblem
from crowdnav.orca import (DegenerateGeometryError, InfeasibleGeometryError,
                           agent_halfplane_jac, obstacle_halfplane_jac, solution_sensitivity,
                           solve_orca_arrays)
from crowdnav.refine import weight_update_arrays, weight_update_jac
from crowdnav.sicnav.config import MpcConfig
from crowdnav.sicnav.costs import collision_values


@dataclass
class PlanContext:
    """Everything held fixed during one solve."""

    config: MpcConfig
    robot0: np.ndarray        # (4,) x, y, heading, speed
    humans_pos0: np.ndarray   # (N, 2)
    humans_vel0: np.ndarray   # (N, 2)
    samples: np.ndarray       # (S, N, T, 2) positions at steps 1..T
    weights0: np.ndarray      # (S,)
    u_prev: np.ndarray        # (2,)

    @property
    def num_humans(self) -> int:
        return self.humans_pos0.shape[0]

    @property
    def horizon(self) -> int:
        return self.config.horizon


@dataclass
class Rollout:
    robot: np.ndarray           # (T+1, 4)
    humans: np.ndarray          # (T+1, N, 2) refined positions
    velocities: np.ndarray      # (T, N, 2) lower-level solutions
    weights: np.ndarray         # (T+1, S) w_0 .. w_T
    normals: np.ndarray         # (T, N, K, 2) half-plane rows per lower-level problem
    offsets: np.ndarray         # (T, N, K)
    relax: np.ndarray           # (T, N, K) 1 for relaxable rows
    duals: np.ndarray           # (T, N, K)
    disc_duals: np.ndarray      # (T, N)
    slacks: np.ndarray          # (T, N)
    intents: np.ndarray         # (T, N, 2) intent velocities
    softened: bool = False      # some lower level needed its hard rows relaxed
    d_robot: Optional[np.ndarray] = None   # (T+1, 2, 2T) position sensitivities
    d_humans: Optional[np.ndarray] = None  # (T+1, N, 2, 2T)


def num_rows(num_humans: int, num_segments: int) -> int:
    """Half-planes per lower-level problem: other humans, the robot, then each wall."""
    return max(num_humans - 1, 0) + 1 + num_segments


def kernel_params(cfg: MpcConfig) -> np.ndarray:
    o = cfg.orca
    return np.array([cfg.dt, cfg.human_radius, cfg.robot_radius, o.time_horizon,
                     o.time_horizon_obst, o.responsibility, o.time_step, o.max_speed,
                     o.relaxation_penalty, cfg.refine.sigma, cfg.refine.weight_floor])


def segment_array(segments) -> np.ndarray:
    if not segments:
        return np.zeros((0, 4))
    return np.array([np.concatenate([s.endpoint_a, s.endpoint_b]) for s in segments])


def _frozen_rollout(ctx: PlanContext, u: np.ndarray, with_jac: bool) -> Rollout:
    cfg = ctx.config
    T, dt = cfg.horizon, cfg.dt
    n_h = ctx.num_humans
    K = num_rows(n_h, len(cfg.obstacles))
    robot, d_rp = _robot_rollout(ctx.robot0, u.reshape(T, 2), dt, with_jac)
    humans = np.empty((T + 1, n_h, 2))
    humans[0] = ctx.humans_pos0
    humans[1:] = np.einsum("s,sntk->tnk", ctx.weights0, ctx.samples)
    vel = np.diff(humans, axis=0) / dt
    weights = np.tile(ctx.weights0, (T + 1, 1))
    z = np.zeros((T, n_h, K))
    return Rollout(robot, humans, vel, weights, np.zeros((T, n_h, K, 2)), z, z.copy(), z.copy(),
                   np.zeros((T, n_h)), np.zeros((T, n_h)), vel.copy(), False,
                   d_rp, np.zeros((T + 1, n_h, 2, 2 * T)) if with_jac else None)


def _robot_rollout(robot0, u, dt, with_jac):
    T = u.shape[0]
    nu = 2 * T
    robot = np.empty((T + 1, 4))
    robot[0] = robot0
    d_rp = np.zeros((T + 1, 2, nu))
    d_th = np.zeros(nu)
    for t in range(T):
        x, y, th, _ = robot[t]
        v, w = u[t]
        c, s = math.cos(th), math.sin(th)
        robot[t + 1] = (x + dt * v * c, y + dt * v * s, th + dt * w, v)
        if with_jac:
            d_rp[t + 1] = d_rp[t] + dt * v * np.outer([-s, c], d_th)
            d_rp[t + 1, 0, 2 * t] += dt * c
            d_rp[t + 1, 1, 2 * t] += dt * s
            d_th = d_th.copy()
            d_th[2 * t + 1] += dt
    return robot, (d_rp if with_jac else None)


def rollout(ctx: PlanContext, u: np.ndarray, with_jac: bool = True) -> Rollout:
    """Compiled rollout; see :func:`rollout_reference` for the readable version."""
    cfg = ctx.config
    u = np.ascontiguousarray(np.asarray(u, float).reshape(cfg.horizon, 2))
    if cfg.mode == "frozen_predictions":
        return _frozen_rollout(ctx, u, with_jac)
    out = _kernels.bilevel_rollout(
        np.ascontiguousarray(ctx.robot0, dtype=float), np.ascontiguousarray(ctx.humans_pos0, dtype=float),
        np.ascontiguousarray(ctx.humans_vel0, dtype=float), np.ascontiguousarray(ctx.samples, dtype=float),
        np.ascontiguousarray(ctx.weights0, dtype=float), u, segment_array(cfg.obstacles),
        kernel_params(cfg), with_jac)
    (robot, humans, vel, weights, d_rp, d_hp, normals, offsets, relax, duals, mus, slacks,
     intents, status) = out
    return Rollout(robot, humans, vel, weights, normals, offsets, relax, duals, mus, slacks,
                   intents, bool(status), d_rp if with_jac else None, d_hp if with_jac else None)


def _solve_lower(N, b, relax, v_int, orca):
    try:
        return solve_orca_arrays(N, b, relax, v_int, orca.max_speed, orca.relaxation_penalty), relax, False
    except InfeasibleGeometryError:
        # squeezed between walls: soften the hard rows so the rollout stays total
        relax = np.ones_like(relax)
        sol = solve_orca_arrays(N, b, relax, v_int, orca.max_speed, orca.relaxation_penalty)
        return sol, relax, True


def _agent_row(hp, hv, op, ov, radius, orca):
    try:
        return agent_halfplane_jac(hp, hv, op, ov, radius, orca.time_horizon,
                                   orca.responsibility, orca.time_step)
    except DegenerateGeometryError:
        # coincident agents: keep the row count fixed with a row that never binds
        return np.array([1.0, 0.0]), _kernels.INACTIVE_OFFSET, np.zeros((2, 8)), np.zeros(8)


def rollout_reference(ctx: PlanContext, u: np.ndarray, with_jac: bool = True) -> Rollout:
    """Numpy rollout built from the public ORCA and weight-update functions."""
    cfg = ctx.config
    orca = cfg.orca
    T, dt = cfg.horizon, cfg.dt
    n_h = ctx.num_humans
    S = ctx.weights0.shape[0]
    nu = 2 * T
    u = np.asarray(u, float).reshape(T, 2)
    if cfg.mode == "frozen_predictions":
        return _frozen_rollout(ctx, u, with_jac)

    robot, d_rp = _robot_rollout(ctx.robot0, u, dt, True)
    d_th = np.zeros((T + 1, nu))
    d_sp = np.zeros((T + 1, nu))
    for t in range(T):
        d_th[t + 1] = d_th[t]
        d_th[t + 1, 2 * t + 1] += dt
        d_sp[t + 1, 2 * t] = 1.0

    K = num_rows(n_h, len(cfg.obstacles))
    humans = np.empty((T + 1, n_h, 2))
    humans[0] = ctx.humans_pos0
    vel_state = np.empty((T + 1, n_h, 2))
    vel_state[0] = ctx.humans_vel0
    weights = np.empty((T + 1, S))
    weights[0] = ctx.weights0
    normals = np.zeros((T, n_h, K, 2))
    offsets = np.zeros((T, n_h, K))
    relaxes = np.zeros((T, n_h, K))
    duals = np.zeros((T, n_h, K))
    mus = np.zeros((T, n_h))
    slacks = np.zeros((T, n_h))
    intents = np.zeros((T, n_h, 2))
    softened = False
    d_hp = np.zeros((T + 1, n_h, 2, nu))
    d_hv = np.zeros((T + 1, n_h, 2, nu))
    d_w = np.zeros((T + 1, S, nu))

    r_comb = cfg.human_radius + cfg.robot_radius
    h_comb = 2.0 * cfg.human_radius
    for t in range(T):
        rp = robot[t, :2]
        th, sp = robot[t, 2], robot[t, 3]
        heading = np.array([math.cos(th), math.sin(th)])
        rv = sp * heading
        d_rv = np.outer(heading, d_sp[t]) + sp * np.outer([-heading[1], heading[0]], d_th[t])
        targets = np.einsum("s,snk->nk", weights[t], ctx.samples[:, :, t, :])
        for j in range(n_h):
            hp, hv = humans[t, j], vel_state[t, j]
            rows = []   # (n, b, relax, Jn, db, other): other is a human index, -1 robot, None wall
            for k in range(n_h):
                if k != j:
                    rows.append((*_agent_row(hp, hv, humans[t, k], vel_state[t, k], h_comb, orca), 1.0, k))
            rows.append((*_agent_row(hp, hv, rp, rv, r_comb, orca), 1.0, -1))
            for seg in cfg.obstacles:
                n, b, Jn2, db2 = obstacle_halfplane_jac(hp, seg.endpoint_a, seg.endpoint_b,
                                                        cfg.human_radius, orca.time_horizon_obst,
                                                        orca.time_step)
                rows.append((n, b, Jn2, db2, 0.0, None))
            N = np.array([r[0] for r in rows]).reshape(K, 2)
            bb = np.array([r[1] for r in rows])
            relax = np.array([r[4] for r in rows])
            v_int = (targets[j] - hp) / dt
            sol, relax, soft = _solve_lower(N, bb, relax, v_int, orca)
            softened = softened or soft
            normals[t, j], offsets[t, j], relaxes[t, j] = N, bb, relax
            duals[t, j], mus[t, j], slacks[t, j] = sol.duals, sol.disc_dual, sol.slack
            intents[t, j] = v_int
            humans[t + 1, j] = hp + dt * sol.velocity
            vel_state[t + 1, j] = sol.velocity
            if not with_jac:
                continue
            dv_int, dv_dn, dv_db = solution_sensitivity(N, bb, relax, sol, orca.relaxation_penalty)
            d_vint = (ctx.samples[:, j, t, :].T @ d_w[t] - d_hp[t, j]) / dt
            dv = dv_int @ d_vint
            for i in sol.active_set:
                _, _, Jn, db, _, other = rows[i]
                if other is None:
                    dn = Jn @ d_hp[t, j]
                    dbv = db @ d_hp[t, j]
                else:
                    op, ov = (d_rp[t], d_rv) if other == -1 else (d_hp[t, other], d_hv[t, other])
                    stack = np.vstack([d_hp[t, j], d_hv[t, j], op, ov])
                    dn = Jn @ stack
                    dbv = db @ stack
                dv += dv_dn[i] @ dn + np.outer(dv_db[i], dbv)
            d_hp[t + 1, j] = d_hp[t, j] + dt * dv
            d_hv[t + 1, j] = dv
        y_next = ctx.samples[:, :, t, :]
        if with_jac:
            w, dwp, dwx = weight_update_jac(weights[t], humans[t + 1], y_next,
                                            cfg.refine.sigma, cfg.refine.weight_floor)
            d_w[t + 1] = dwp @ d_w[t] + dwx @ d_hp[t + 1].reshape(2 * n_h, nu)
        else:
            w = weight_update_arrays(weights[t], humans[t + 1], y_next,
                                     cfg.refine.sigma, cfg.refine.weight_floor)
        weights[t + 1] = w
    return Rollout(robot, humans, vel_state[1:], weights, normals, offsets, relaxes, duals, mus,
                   slacks, intents, softened, d_rp if with_jac else None,
                   d_hp if with_jac else None)


class ImplicitProblem:
    """Builds the reduced NLP in the robot actions and caches rollouts by plan."""

    def __init__(self, ctx: PlanContext):
        self.ctx = ctx
        cfg = ctx.config
        T = cfg.horizon
        self.T = T
        self._cache: dict = {}
        lim = cfg.limits
        self.lower = np.tile(lim.lower, T)
        self.upper = np.tile(lim.upper, T)
        # rate rows: D u >= rate_lo + shift, -D u >= -rate_hi - shift
        D = np.zeros((2 * T, 2 * T))
        for t in range(T):
            D[2 * t:2 * t + 2, 2 * t:2 * t + 2] = np.eye(2)
            if t > 0:
                D[2 * t:2 * t + 2, 2 * t - 2:2 * t] = -np.eye(2)
        shift = np.zeros(2 * T)
        shift[:2] = ctx.u_prev
        A = np.vstack([D, -D])
        b = np.concatenate([np.tile(lim.rate_lower, T) + shift, -np.tile(lim.rate_upper, T) - shift])
        self.linear = (A, b)
        sq = np.sqrt(np.asarray(cfg.q_diag, float))
        self.sqrt_q = sq
        self.sqrt_qT = sq * math.sqrt(cfg.terminal_scale)
        self.sqrt_r = np.sqrt(np.asarray(cfg.r_diag, float))

    def get(self, u: np.ndarray, with_jac: bool = True) -> Rollout:
        key = (np.asarray(u, float).tobytes(), with_jac)
        hit = self._cache.get(key) or (self._cache.get((key[0], True)) if not with_jac else None)
        if hit is None:
            hit = rollout(self.ctx, u, with_jac)
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def residuals(self, u):
        T = self.T
        ro = self.get(u)
        goal = self.ctx.config.goal_array
        r = np.empty(2 * T + 2 * T)
        J = np.zeros((4 * T, 2 * T))
        for t in range(1, T + 1):
            w = self.sqrt_qT if t == T else self.sqrt_q
            r[2 * (t - 1):2 * t] = w * (ro.robot[t, :2] - goal)
            J[2 * (t - 1):2 * t] = w[:, None] * ro.d_robot[t]
        uu = np.asarray(u, float).reshape(T, 2)
        r[2 * T:] = (self.sqrt_r * uu).ravel()
        J[2 * T:, :] = np.diag(np.tile(self.sqrt_r, T))
        return r, J

    def ineq(self, u):
        T = self.T
        ro = self.get(u)
        cfg = self.ctx.config
        vals, jacs = [], []
        for t in range(1, T + 1):
            c, dr, dh = collision_values(ro.robot[t, :2], ro.humans[t], cfg)
            vals.append(c)
            jac = dr @ ro.d_robot[t]
            if dh.size:
                jac = jac + np.einsum("mnk,nku->mu", dh, ro.d_humans[t])
            jacs.append(jac)
        if not vals:
            return np.zeros(0), np.zeros((0, 2 * T))
        return np.concatenate(vals), np.vstack(jacs)

    def nlp(self) -> NlpProblem:
        has_ineq = self.ctx.num_humans > 0 or len(self.ctx.config.obstacles) > 0
        return NlpProblem(
            n=2 * self.T, residuals=self.residuals, ineq=self.ineq if has_ineq else None,
            linear_ineq=self.linear, lower=self.lower, upper=self.upper,
            meta={"formulation": "implicit"})
