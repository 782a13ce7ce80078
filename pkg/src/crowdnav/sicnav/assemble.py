"""Full-space single-level problem: every lower-level ORCA problem enters through its KKT system.

Decision vector blocks (``Layout`` gives their index arrays):

=========  ===============  =============================================
name       shape            meaning
=========  ===============  =============================================
u          (T, 2)           robot actions u_0 .. u_{T-1}
robot      (T+1, 4)         robot states x_0 .. x_T
pos        (T+1, N, 2)      refined human positions
vel        (T, N, 2)        lower-level solutions (human velocity over step t)
slack      (T, N)           shared relaxation slack of each lower level
lam        (T, N, K)        half-plane multipliers
mu         (T, N)           speed-disc multiplier
gap        (T, N, K)        half-plane values n.v + a s - b
gap_disc   (T, N)           speed-disc value vmax^2 - |v|^2
w          (T, S)           weights w_0 .. w_{T-1}
=========  ===============  =============================================

Complementarity pairs are (lam, gap) and (mu, gap_disc). In frozen mode only
``u`` and ``robot`` remain and the humans follow the weighted samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from crowdnav import _kernels
from crowdnav.core import SystemState
from crowdnav.nlp.problem import NlpProblem
from crowdnav.orca import DegenerateGeometryError, agent_halfplane_jac, obstacle_halfplane_jac
from crowdnav.prediction.samples import SampleSet
from crowdnav.refine import weight_update_jac
from crowdnav.sicnav.config import MODES, MpcConfig
from crowdnav.sicnav.costs import collision_values
from crowdnav.sicnav.rollout import PlanContext, num_rows, rollout


@dataclass
class Layout:
    T: int
    N: int
    S: int
    K: int
    frozen: bool
    blocks: dict

    @classmethod
    def build(cls, T: int, N: int, S: int, K: int, frozen: bool) -> "Layout":
        shapes = [("u", (T, 2)), ("robot", (T + 1, 4))]
        if not frozen and N > 0:
            shapes += [("pos", (T + 1, N, 2)), ("vel", (T, N, 2)), ("slack", (T, N)),
                       ("lam", (T, N, K)), ("mu", (T, N)), ("gap", (T, N, K)),
                       ("gap_disc", (T, N)), ("w", (T, S))]
        blocks, start = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            blocks[name] = np.arange(start, start + size).reshape(shape)
            start += size
        return cls(T, N, S, K, frozen, blocks)

    @property
    def n(self) -> int:
        return int(sum(b.size for b in self.blocks.values()))

    @property
    def has_lower(self) -> bool:
        return "pos" in self.blocks

    def idx(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def view(self, x: np.ndarray, name: str) -> np.ndarray:
        b = self.blocks[name]
        return x[b.ravel()].reshape(b.shape)

    def actions(self, x: np.ndarray) -> np.ndarray:
        return self.view(x, "u")


class _Rows:
    """Sparse-ish accumulation of constraint rows into a dense Jacobian."""

    def __init__(self, n: int):
        self.n = n
        self.values: list = []
        self.jac: list = []

    def add(self, value: float) -> np.ndarray:
        row = np.zeros(self.n)
        self.values.append(value)
        self.jac.append(row)
        return row

    def arrays(self):
        if not self.values:
            return np.zeros(0), np.zeros((0, self.n))
        return np.array(self.values, float), np.array(self.jac)


class AssembledProblem:
    """Callbacks of the full-space problem for one planning context."""

    def __init__(self, ctx: PlanContext):
        self.ctx = ctx
        cfg = ctx.config
        self.cfg = cfg
        self.T = cfg.horizon
        self.N = ctx.num_humans
        self.S = ctx.weights0.shape[0]
        self.K = num_rows(self.N, len(cfg.obstacles))
        self.frozen = cfg.mode == "frozen_predictions"
        self.layout = Layout.build(self.T, self.N, self.S, self.K, self.frozen)
        self.relax = np.array([1.0] * max(self.N - 1, 0) + [1.0] + [0.0] * len(cfg.obstacles))
        if self.frozen or self.N == 0:
            self.fixed_humans = np.empty((self.T + 1, self.N, 2))
            self.fixed_humans[0] = ctx.humans_pos0
            self.fixed_humans[1:] = np.einsum("s,sntk->tnk", ctx.weights0, ctx.samples)
        sq = np.sqrt(np.asarray(cfg.q_diag, float))
        self.sqrt_q = sq
        self.sqrt_qT = sq * math.sqrt(cfg.terminal_scale)
        self.sqrt_r = np.sqrt(np.asarray(cfg.r_diag, float))

    # -- objective -----------------------------------------------------------
    def residuals(self, x):
        L, T = self.layout, self.T
        n = L.n
        robot = L.view(x, "robot")
        u = L.view(x, "u")
        goal = self.cfg.goal_array
        r = np.empty(4 * T)
        J = np.zeros((4 * T, n))
        ri = L.idx("robot")
        for t in range(1, T + 1):
            w = self.sqrt_qT if t == T else self.sqrt_q
            r[2 * (t - 1):2 * t] = w * (robot[t, :2] - goal)
            J[2 * (t - 1), ri[t, 0]] = w[0]
            J[2 * (t - 1) + 1, ri[t, 1]] = w[1]
        ui = L.idx("u")
        for t in range(T):
            for k in range(2):
                r[2 * T + 2 * t + k] = self.sqrt_r[k] * u[t, k]
                J[2 * T + 2 * t + k, ui[t, k]] = self.sqrt_r[k]
        return r, J

    # -- human quantities at step t (values and index maps) -----------------
    def _human_pos(self, x, t):
        L = self.layout
        if L.has_lower:
            return L.view(x, "pos")[t], L.idx("pos")[t]
        return self.fixed_humans[t], None

    def _human_vel(self, x, t):
        """Velocity state used by step-t rows: measured at t = 0, else the previous solution."""
        if t == 0:
            return self.ctx.humans_vel0, None
        L = self.layout
        return L.view(x, "vel")[t - 1], L.idx("vel")[t - 1]

    # -- equalities ----------------------------------------------------------
    def eq(self, x):
        L, T, cfg = self.layout, self.T, self.cfg
        dt = cfg.dt
        rows = _Rows(L.n)
        robot = L.view(x, "robot")
        u = L.view(x, "u")
        ri, ui = L.idx("robot"), L.idx("u")
        for k in range(4):
            row = rows.add(robot[0, k] - self.ctx.robot0[k])
            row[ri[0, k]] = 1.0
        for t in range(T):
            px, py, th, _ = robot[t]
            v, om = u[t]
            c, s = math.cos(th), math.sin(th)
            nxt = (px + dt * v * c, py + dt * v * s, th + dt * om, v)
            for k in range(4):
                row = rows.add(robot[t + 1, k] - nxt[k])
                row[ri[t + 1, k]] = 1.0
                if k == 0:
                    row[ri[t, 0]] = -1.0
                    row[ri[t, 2]] = dt * v * s
                    row[ui[t, 0]] = -dt * c
                elif k == 1:
                    row[ri[t, 1]] = -1.0
                    row[ri[t, 2]] = -dt * v * c
                    row[ui[t, 0]] = -dt * s
                elif k == 2:
                    row[ri[t, 2]] = -1.0
                    row[ui[t, 1]] = -dt
                else:
                    row[ui[t, 0]] = -1.0
        if L.has_lower:
            self._lower_eq(x, rows)
        return rows.arrays()

    def _lower_eq(self, x, rows: _Rows):
        L, T, N, S, cfg = self.layout, self.T, self.N, self.S, self.cfg
        dt = cfg.dt
        orca = cfg.orca
        pos, pi = L.view(x, "pos"), L.idx("pos")
        vel, vi = L.view(x, "vel"), L.idx("vel")
        w, wi = L.view(x, "w"), L.idx("w")
        slack, si = L.view(x, "slack"), L.idx("slack")
        lam, li = L.view(x, "lam"), L.idx("lam")
        mu, mi = L.view(x, "mu"), L.idx("mu")
        gap, gi = L.view(x, "gap"), L.idx("gap")
        gdisc, gdi = L.view(x, "gap_disc"), L.idx("gap_disc")
        robot, ri = L.view(x, "robot"), L.idx("robot")
        samples = self.ctx.samples
        pen = orca.relaxation_penalty
        vmax_sq = orca.max_speed ** 2
        h_comb = 2.0 * cfg.human_radius
        r_comb = cfg.human_radius + cfg.robot_radius

        for j in range(N):
            for k in range(2):
                row = rows.add(pos[0, j, k] - self.ctx.humans_pos0[j, k])
                row[pi[0, j, k]] = 1.0
        for t in range(T):
            for j in range(N):
                for k in range(2):
                    row = rows.add(pos[t + 1, j, k] - pos[t, j, k] - dt * vel[t, j, k])
                    row[pi[t + 1, j, k]] = 1.0
                    row[pi[t, j, k]] = -1.0
                    row[vi[t, j, k]] = -dt
        for s_ in range(S):
            row = rows.add(w[0, s_] - self.ctx.weights0[s_])
            row[wi[0, s_]] = 1.0
        for t in range(T - 1):
            w_new, d_prev, d_x = weight_update_jac(w[t], pos[t + 1], samples[:, :, t, :],
                                                   cfg.refine.sigma, cfg.refine.weight_floor)
            for s_ in range(S):
                row = rows.add(w[t + 1, s_] - w_new[s_])
                row[wi[t + 1, s_]] += 1.0
                row[wi[t]] -= d_prev[s_]
                row[pi[t + 1].ravel()] -= d_x[s_]

        for t in range(T):
            hp_t, hpi_t = pos[t], pi[t]
            hv_t, hvi_t = self._human_vel(x, t)
            th, sp = robot[t, 2], robot[t, 3]
            heading = np.array([math.cos(th), math.sin(th)])
            rv = sp * heading
            # d rv / d(theta, speed)
            drv = np.column_stack([sp * np.array([-heading[1], heading[0]]), heading])
            for j in range(N):
                normals, offsets, dn_rows, db_rows = self._rows(
                    t, j, hp_t, hpi_t, hv_t, hvi_t, robot[t, :2], ri[t], rv, drv, h_comb, r_comb)
                v = vel[t, j]
                # intent and its derivatives
                target = w[t] @ samples[:, j, t, :]
                v_int = (target - hp_t[j]) / dt
                # stationarity in v
                stat = 2.0 * (v - v_int) + 2.0 * mu[t, j] * v - normals.T @ lam[t, j]
                for a in range(2):
                    row = rows.add(stat[a])
                    row[vi[t, j, a]] += 2.0 * (1.0 + mu[t, j])
                    row[mi[t, j]] += 2.0 * v[a]
                    row[li[t, j]] -= normals[:, a]
                    row[wi[t]] -= 2.0 * samples[:, j, t, a] / dt
                    row[hpi_t[j, a]] += 2.0 / dt
                    for i in range(self.K):
                        for col, dval in dn_rows[i][a].items():
                            row[col] -= lam[t, j, i] * dval
                # stationarity in the (penalty-normalised) slack
                row = rows.add(slack[t, j] - self.relax @ lam[t, j] / (2.0 * pen))
                row[si[t, j]] = 1.0
                row[li[t, j]] -= self.relax / (2.0 * pen)
                # half-plane values
                for i in range(self.K):
                    val = normals[i] @ v + self.relax[i] * slack[t, j] - offsets[i]
                    row = rows.add(gap[t, j, i] - val)
                    row[gi[t, j, i]] = 1.0
                    row[vi[t, j]] -= normals[i]
                    row[si[t, j]] -= self.relax[i]
                    for a in range(2):
                        for col, dval in dn_rows[i][a].items():
                            row[col] -= dval * v[a]
                    for col, dval in db_rows[i].items():
                        row[col] += dval
                row = rows.add(gdisc[t, j] - (vmax_sq - v @ v))
                row[gdi[t, j]] = 1.0
                row[vi[t, j]] += 2.0 * v

    def _rows(self, t, j, hp, hpi, hv, hvi, rp, rpi, rv, drv, h_comb, r_comb):
        """Half-planes of human ``j`` at step ``t`` and their derivatives as {column: value} maps.

        Row order matches the rollout: other humans ascending, the robot, then walls.
        """
        cfg, orca = self.cfg, self.cfg.orca
        normals = np.empty((self.K, 2))
        offsets = np.empty(self.K)
        dn_rows: list = []
        db_rows: list = []

        def scatter(J, cols):
            # J: (..., 8) derivative block against the stacked argument columns (None = constant)
            out = {}
            for c_idx, col in enumerate(cols):
                if col is None:
                    continue
                out[col] = out.get(col, 0.0) + J[c_idx]
            return out

        def stacked_cols(other):
            sp_cols = list(hpi[j])
            sv_cols = [None, None] if hvi is None else list(hvi[j])
            if other == -1:
                op_cols = list(rpi[:2])
                return sp_cols + sv_cols + op_cols
            op_cols = list(hpi[other])
            ov_cols = [None, None] if hvi is None else list(hvi[other])
            return sp_cols + sv_cols + op_cols + ov_cols

        r = 0
        others = [k for k in range(self.N) if k != j] + [-1]
        for other in others:
            if other == -1:
                op, ov, R = rp, rv, r_comb
            else:
                op, ov, R = hp[other], hv[other], h_comb
            try:
                n, b, Jn, db = agent_halfplane_jac(hp[j], hv[j], op, ov, R, orca.time_horizon,
                                                   orca.responsibility, orca.time_step)
            except DegenerateGeometryError:
                n, b = np.array([1.0, 0.0]), _kernels.INACTIVE_OFFSET
                Jn, db = np.zeros((2, 8)), np.zeros(8)
            normals[r], offsets[r] = n, b
            cols = stacked_cols(other)
            if other == -1:
                # robot velocity enters through heading and speed
                th_col, sp_col = self.layout.idx("robot")[t, 2], self.layout.idx("robot")[t, 3]
                dn = []
                for a in range(2):
                    m = scatter(Jn[a, :6], cols)
                    g = Jn[a, 6:8] @ drv
                    m[th_col] = m.get(th_col, 0.0) + g[0]
                    m[sp_col] = m.get(sp_col, 0.0) + g[1]
                    dn.append(m)
                mb = scatter(db[:6], cols)
                g = db[6:8] @ drv
                mb[th_col] = mb.get(th_col, 0.0) + g[0]
                mb[sp_col] = mb.get(sp_col, 0.0) + g[1]
            else:
                dn = [scatter(Jn[a], cols) for a in range(2)]
                mb = scatter(db, cols)
            dn_rows.append(dn)
            db_rows.append(mb)
            r += 1
        for seg in cfg.obstacles:
            n, b, Jn2, db2 = obstacle_halfplane_jac(hp[j], seg.endpoint_a, seg.endpoint_b,
                                                    cfg.human_radius, orca.time_horizon_obst,
                                                    orca.time_step)
            normals[r], offsets[r] = n, b
            cols = list(hpi[j])
            dn_rows.append([scatter(Jn2[a], cols) for a in range(2)])
            db_rows.append(scatter(db2, cols))
            r += 1
        return normals, offsets, dn_rows, db_rows

    # -- inequalities --------------------------------------------------------
    def ineq(self, x):
        L, T = self.layout, self.T
        robot, ri = L.view(x, "robot"), L.idx("robot")
        vals, jacs = [], []
        for t in range(1, T + 1):
            hp, hpi = self._human_pos(x, t)
            c, dr, dh = collision_values(robot[t, :2], hp, self.cfg)
            jac = np.zeros((c.size, L.n))
            jac[:, ri[t, :2]] = dr
            if hpi is not None:
                for j in range(self.N):
                    jac[:, hpi[j]] += dh[:, j, :]
            vals.append(c)
            jacs.append(jac)
        if not vals or vals[0].size == 0:
            return np.zeros(0), np.zeros((0, L.n))
        return np.concatenate(vals), np.vstack(jacs)

    # -- linear rows, bounds, complementarity ------------------------------
    def linear(self):
        L, T = self.layout, self.T
        lim = self.cfg.limits
        ui = L.idx("u")
        D = np.zeros((2 * T, L.n))
        for t in range(T):
            for k in range(2):
                D[2 * t + k, ui[t, k]] = 1.0
                if t > 0:
                    D[2 * t + k, ui[t - 1, k]] = -1.0
        shift = np.zeros(2 * T)
        shift[:2] = self.ctx.u_prev
        A = np.vstack([D, -D])
        b = np.concatenate([np.tile(lim.rate_lower, T) + shift, -np.tile(lim.rate_upper, T) - shift])
        return A, b

    def bounds(self):
        L = self.layout
        lo = np.full(L.n, -np.inf)
        hi = np.full(L.n, np.inf)
        lim = self.cfg.limits
        ui = L.idx("u")
        lo[ui[:, 0]], hi[ui[:, 0]] = lim.lower[0], lim.upper[0]
        lo[ui[:, 1]], hi[ui[:, 1]] = lim.lower[1], lim.upper[1]
        if L.has_lower:
            for name in ("lam", "mu", "gap", "gap_disc"):
                lo[L.idx(name).ravel()] = 0.0
        return lo, hi

    def complementarity(self):
        L = self.layout
        if not L.has_lower:
            return []
        pairs = list(zip(L.idx("lam").ravel().tolist(), L.idx("gap").ravel().tolist()))
        pairs += list(zip(L.idx("mu").ravel().tolist(), L.idx("gap_disc").ravel().tolist()))
        return pairs

    def nlp(self) -> NlpProblem:
        L = self.layout
        lo, hi = self.bounds()
        has_ineq = self.N > 0 or len(self.cfg.obstacles) > 0
        return NlpProblem(
            n=L.n, residuals=self.residuals, eq=self.eq, ineq=self.ineq if has_ineq else None,
            linear_ineq=self.linear(), complementarity=self.complementarity(), lower=lo, upper=hi,
            meta={"formulation": "kkt", "mode": self.cfg.mode, "layout": L})


def assemble_context(ctx: PlanContext):
    """Full-space problem and its layout for a prepared planning context."""
    prob = AssembledProblem(ctx)
    return prob.nlp(), prob.layout


def assemble(state_init: SystemState, samples: SampleSet, config: MpcConfig, mode: str | None = None,
             u_prev=(0.0, 0.0)) -> NlpProblem:
    """Single-level problem for one planning instant; ``state_init.weights`` is w_0."""
    from dataclasses import replace
    from crowdnav.sicnav.controller import plan_context
    if mode is not None:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        config = replace(config, mode=mode)
    weights0 = state_init.weights.weights
    if weights0.shape[0] != samples.num_samples:
        raise ValueError(f"state carries {weights0.shape[0]} weights for {samples.num_samples} samples")
    ctx = plan_context(state_init, samples, weights0, u_prev, config)
    return assemble_context(ctx)[0]


def initial_point(ctx: PlanContext, layout: Layout, actions: np.ndarray) -> np.ndarray:
    """Consistent full-space point from a forward rollout of ``actions``."""
    cfg = ctx.config
    actions = np.asarray(actions, float).reshape(cfg.horizon, 2)
    ro = rollout(ctx, actions.ravel(), with_jac=False)
    x = np.zeros(layout.n)
    x[layout.idx("u").ravel()] = actions.ravel()
    x[layout.idx("robot").ravel()] = ro.robot.ravel()
    if layout.has_lower:
        K = layout.K
        relax = np.array([1.0] * (K - len(cfg.obstacles)) + [0.0] * len(cfg.obstacles))
        x[layout.idx("pos").ravel()] = ro.humans.ravel()
        x[layout.idx("vel").ravel()] = ro.velocities.ravel()
        x[layout.idx("lam").ravel()] = ro.duals.ravel()
        x[layout.idx("mu").ravel()] = ro.disc_duals.ravel()
        # recompute the slack with the fixed relaxation pattern in case a lower level was softened
        slack = np.einsum("k,tnk->tn", relax, ro.duals) / (2.0 * cfg.orca.relaxation_penalty)
        x[layout.idx("slack").ravel()] = slack.ravel()
        gap = (np.einsum("tnkd,tnd->tnk", ro.normals, ro.velocities) + relax * slack[..., None]
               - ro.offsets)
        x[layout.idx("gap").ravel()] = np.maximum(gap, 0.0).ravel()
        gd = cfg.orca.max_speed ** 2 - np.sum(ro.velocities ** 2, axis=-1)
        x[layout.idx("gap_disc").ravel()] = np.maximum(gd, 0.0).ravel()
        x[layout.idx("w").ravel()] = ro.weights[:cfg.horizon].ravel()
    return x
