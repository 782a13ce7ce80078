"""Line-search SQP with elastic QP subproblems and a complementarity relaxation homotopy."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional, TextIO

import numpy as np

from crowdnav.nlp.problem import NlpProblem, NlpSolution, NumericalFailure, SolverSettings
from crowdnav.nlp.qp import QPInfeasibleError, solve_qp

_STEER_TRIES = 4
_NU_MAX = 1e8
_RADIUS_MIN = 1e-6


@dataclass
class _Point:
    x: np.ndarray
    f: float
    g: np.ndarray
    gn: Optional[np.ndarray]
    ceq: np.ndarray
    jeq: np.ndarray
    cin: np.ndarray      # nonlinear rows followed by complementarity rows
    jin: np.ndarray
    clin: np.ndarray     # A x - b


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays if a is not None)


def _evaluate(problem: NlpProblem, x: np.ndarray, rho: Optional[float]) -> _Point:
    f, g, gn = problem.eval_gradient(x)
    ceq, jeq = problem.eval_eq(x)
    cin, jin = problem.eval_ineq(x)
    if rho is not None and problem.complementarity:
        cc, jc = problem.comp_ineq(x, rho)
        cin = np.concatenate([cin, cc])
        jin = np.vstack([jin, jc])
    if problem.linear_ineq is not None:
        a, b = problem.linear_ineq
        clin = a @ x - b
    else:
        clin = np.zeros(0)
    if not _finite(f, g, gn, ceq, jeq, cin, jin):
        raise NumericalFailure("callback returned non-finite values")
    return _Point(x, f, g, gn, ceq, jeq, cin, jin, clin)


def _violation_l1(p: _Point) -> float:
    return (np.abs(p.ceq).sum() + np.maximum(0.0, -p.cin).sum()
            + np.maximum(0.0, -p.clin).sum())


def _violation_inf(p: _Point) -> float:
    parts = [np.abs(p.ceq), np.maximum(0.0, -p.cin), np.maximum(0.0, -p.clin), np.zeros(1)]
    return float(max(np.max(v) if v.size else 0.0 for v in parts))


def _build_qp(p: _Point, B, lo, hi, problem: NlpProblem, settings: SolverSettings, elastic_eq: bool,
              penalty: float):
    n = problem.n
    m_eq, m_in = p.ceq.size, p.cin.size
    n_el = m_in + (m_eq if elastic_eq else 0)
    nz = n + n_el
    H = np.zeros((nz, nz))
    H[:n, :n] = B
    H[n:, n:] = settings.elastic_curvature * np.eye(n_el)
    c = np.concatenate([p.g, penalty * np.ones(n_el)])
    rows, rhs = [], []
    # nonlinear inequalities: J d + e >= -c
    blk = np.zeros((m_in, nz))
    blk[:, :n] = p.jin
    blk[:, n:n + m_in] = np.eye(m_in)
    rows.append(blk)
    rhs.append(-p.cin)
    if elastic_eq:
        e = np.zeros((m_eq, nz))
        e[:, n + m_in:] = np.eye(m_eq)
        up = e.copy()
        up[:, :n] = p.jeq
        dn = e.copy()
        dn[:, :n] = -p.jeq
        rows += [up, dn]
        rhs += [-p.ceq, p.ceq]
        A_eq = np.zeros((0, nz))
        b_eq = np.zeros(0)
    else:
        A_eq = np.zeros((m_eq, nz))
        A_eq[:, :n] = p.jeq
        b_eq = -p.ceq
    # elastic slacks nonnegative
    el = np.zeros((n_el, nz))
    el[:, n:] = np.eye(n_el)
    rows.append(el)
    rhs.append(np.zeros(n_el))
    if problem.linear_ineq is not None:
        a, _ = problem.linear_ineq
        blk = np.zeros((a.shape[0], nz))
        blk[:, :n] = a
        rows.append(blk)
        rhs.append(-p.clin)
    lo_idx = np.flatnonzero(np.isfinite(lo))
    hi_idx = np.flatnonzero(np.isfinite(hi))
    if lo_idx.size:
        blk = np.zeros((lo_idx.size, nz))
        blk[np.arange(lo_idx.size), lo_idx] = 1.0
        rows.append(blk)
        rhs.append(lo[lo_idx] - p.x[lo_idx])
    if hi_idx.size:
        blk = np.zeros((hi_idx.size, nz))
        blk[np.arange(hi_idx.size), hi_idx] = -1.0
        rows.append(blk)
        rhs.append(p.x[hi_idx] - hi[hi_idx])
    A_in = np.vstack(rows)
    b_in = np.concatenate(rhs)
    res = solve_qp(H, c, A_eq, b_eq, A_in, b_in, tol=settings.qp_tol)
    d = res.x[:n]
    slack = res.x[n:]
    y_in = res.y_in
    mult = {"ineq": y_in[:m_in]}
    k = m_in
    if elastic_eq:
        mult["eq"] = y_in[k:k + m_eq] - y_in[k + m_eq:k + 2 * m_eq]
        k += 2 * m_eq
    else:
        mult["eq"] = res.y_eq
    k += n_el
    m_lin = p.clin.size
    mult["linear"] = y_in[k:k + m_lin]
    k += m_lin
    yb = np.zeros(n)
    yb[lo_idx] += y_in[k:k + lo_idx.size]
    k += lo_idx.size
    yb[hi_idx] -= y_in[k:k + hi_idx.size]
    mult["bounds"] = yb
    return d, slack, mult


def _subproblem(p, B, lo, hi, problem, settings, penalty):
    try:
        return _build_qp(p, B, lo, hi, problem, settings, False, penalty)
    except QPInfeasibleError:
        return _build_qp(p, B, lo, hi, problem, settings, True, penalty)


def _kkt_residual(p: _Point, B, d, mult, lo, hi) -> float:
    stat = np.max(np.abs(B @ d)) / max(1.0, np.max(np.abs(p.g)) if p.g.size else 1.0)
    comp = 0.0
    if p.cin.size:
        comp = max(comp, np.max(np.abs(mult["ineq"] * p.cin)))
    if p.clin.size:
        comp = max(comp, np.max(np.abs(mult["linear"] * p.clin)))
    yb = mult["bounds"]
    gap = np.where(yb > 0, p.x - lo, np.where(yb < 0, hi - p.x, 0.0))
    gap = np.where(np.isfinite(gap), gap, 0.0)
    if yb.size:
        comp = max(comp, np.max(np.abs(yb * gap)))
    return float(max(stat, comp, _violation_inf(p)))


def _bfgs_update(B, s, y):
    sy = s @ y
    Bs = B @ s
    sBs = s @ Bs
    if sBs <= 1e-16:
        return B
    # Powell damping keeps B positive definite
    theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
    r = theta * y + (1.0 - theta) * Bs
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / (s @ r)


def _lagrangian_grad(p: _Point, mult, problem: NlpProblem):
    gl = p.g - p.jeq.T @ mult["eq"] - p.jin.T @ mult["ineq"]
    if problem.linear_ineq is not None:
        gl = gl - problem.linear_ineq[0].T @ mult["linear"]
    return gl


def solve(problem: NlpProblem, initial_guess, settings: SolverSettings = SolverSettings(), *,
          multipliers: Optional[dict] = None, log: Optional[TextIO] = None) -> NlpSolution:
    """Solve ``problem`` from ``initial_guess``; returns the best iterate if not converged.

    ``multipliers`` from a previous solve seed the merit penalty.
    """
    t0 = time.perf_counter()
    x = np.asarray(initial_guess, dtype=float).copy()
    if x.shape != (problem.n,):
        raise ValueError(f"initial guess has shape {x.shape}, expected ({problem.n},)")
    lo, hi = problem.effective_bounds()
    x = np.clip(x, lo, hi)
    schedule = settings.rho_schedule() if problem.complementarity else [None]
    rho_final = schedule[-1]
    use_bfgs = problem.residuals is None
    n = problem.n
    B_bfgs = np.eye(n)
    nu = settings.elastic_weight
    if multipliers:
        seen = [np.max(np.abs(v)) for v in multipliers.values() if np.size(v)]
        nu = min(max([nu] + [1.1 * m for m in seen]), _NU_MAX)
    radius = settings.trust_radius
    total_iter = 0
    status, message = "max_iter", ""
    best = None          # (key, x, f, violation)
    last_mult: dict = {}
    kkt = np.inf

    pairs = np.asarray(problem.complementarity, dtype=int).reshape(-1, 2)

    def score(pt: _Point):
        # feasibility is judged with the final relaxation so early stages never win on it
        parts = [np.abs(pt.ceq), np.maximum(0.0, -pt.cin[:n_nl]), np.maximum(0.0, -pt.clin)]
        if pairs.size:
            parts.append(np.maximum(0.0, pt.x[pairs[:, 0]] * pt.x[pairs[:, 1]] - rho_final))
        v = float(max([np.max(a) for a in parts if a.size] + [0.0]))
        return ((v > settings.kkt_tol, v if v > settings.kkt_tol else pt.f), v)

    try:
        p = _evaluate(problem, x, schedule[0])
    except NumericalFailure as exc:
        return NlpSolution(x, {}, "numerical_failure", np.inf, 0, time.perf_counter() - t0,
                           message=str(exc))
    n_nl = p.cin.size - len(pairs)

    converged_final = False
    for stage, rho in enumerate(schedule):
        if stage > 0:
            p = _evaluate(problem, p.x, rho)
        stage_iter = 0
        stage_done = False
        while not stage_done:
            if settings.budget_ms is not None and (time.perf_counter() - t0) * 1e3 > settings.budget_ms:
                status, message = "budget_exhausted", "wall-clock budget exceeded"
                break
            if stage_iter >= settings.max_iter_per_stage or total_iter >= settings.max_iter:
                message = "iteration limit"
                break
            key, viol = score(p)
            if best is None or key < best[0]:
                best = (key, p.x.copy(), p.f, viol)
            B = B_bfgs if use_bfgs else p.gn + settings.hessian_reg * np.eye(n)
            theta = _violation_l1(p)
            try:
                for _ in range(_STEER_TRIES):
                    if radius is None:
                        d, slack, mult = _subproblem(p, B, lo, hi, problem, settings, nu)
                    else:
                        d, slack, mult = _subproblem(p, B, np.maximum(lo, p.x - radius),
                                                     np.minimum(hi, p.x + radius), problem, settings, nu)
                    # steer: raise the penalty until the step makes progress on feasibility
                    if theta <= settings.kkt_tol or slack.sum() <= 0.9 * theta or nu >= _NU_MAX:
                        break
                    nu = min(10.0 * nu, _NU_MAX)
            except QPInfeasibleError as exc:
                status, message = "infeasible", f"QP subproblem infeasible: {exc}"
                break
            last_mult = mult
            kkt = _kkt_residual(p, B, d, mult, lo, hi)
            if kkt <= settings.kkt_tol:
                stage_done = True
                if rho == rho_final:
                    converged_final = True
                _log(log, total_iter, rho, p.f, p.f + nu * _violation_l1(p), kkt, 0.0)
                break
            # merit penalty large enough for a descent direction
            ymax = max([np.max(np.abs(v)) for v in (mult["eq"], mult["ineq"], mult["linear"]) if v.size]
                       + [0.0])
            nu = max(nu, 1.1 * ymax)
            theta_lin = float(slack.sum())
            gd = p.g @ d
            dBd = d @ B @ d
            if theta - theta_lin > 1e-14:
                nu = max(nu, (gd + 0.5 * dBd) / (0.5 * (theta - theta_lin)))
            merit0 = p.f + nu * theta
            dderiv = gd - nu * (theta - theta_lin)
            alpha = 1.0
            accepted = None
            while alpha >= settings.min_step:
                try:
                    trial = _evaluate(problem, np.clip(p.x + alpha * d, lo, hi), rho)
                    merit = trial.f + nu * _violation_l1(trial)
                    if merit <= merit0 + settings.armijo * alpha * min(dderiv, 0.0):
                        accepted = trial
                        break
                except NumericalFailure:
                    pass
                alpha *= settings.backtrack
            total_iter += 1
            stage_iter += 1
            if accepted is None:
                message = "line search stalled"
                _log(log, total_iter, rho, p.f, merit0, kkt, 0.0)
                break
            _log(log, total_iter, rho, accepted.f, accepted.f + nu * _violation_l1(accepted), kkt, alpha)
            step = alpha * float(np.max(np.abs(d))) if d.size else 0.0
            if radius is not None:
                if alpha == 1.0 and step >= 0.99 * radius:
                    radius *= 2.0
                elif alpha < 1.0:
                    radius = max(step, _RADIUS_MIN)
            if use_bfgs:
                s = accepted.x - p.x
                yk = _lagrangian_grad(accepted, mult, problem) - _lagrangian_grad(p, mult, problem)
                B_bfgs = _bfgs_update(B_bfgs, s, yk)
            p = accepted
            if step < settings.min_step:
                message = "step below minimum"
                break
        if status in ("budget_exhausted", "infeasible"):
            break
        if total_iter >= settings.max_iter and not stage_done:
            break

    key, viol = score(p)
    if converged_final:
        status, message = "converged", ""
        x_out, f_out, v_out = p.x, p.f, _violation_inf(p)
    else:
        if best is None or key < best[0]:
            best = (key, p.x.copy(), p.f, viol)
        x_out, f_out, v_out = best[1], best[2], best[3]
    return NlpSolution(x_out, last_mult, status, float(kkt), total_iter,
                       time.perf_counter() - t0, objective=f_out, violation=v_out, message=message)


def _log(stream, it, rho, f, merit, kkt, step):
    if stream is None:
        return
    stream.write(json.dumps({"iter": it, "rho": rho, "objective": f, "merit": merit,
                             "kkt": kkt, "step": step}) + "\n")


def check_gradients(problem: NlpProblem, point, step: float = 1e-6) -> float:
    """Worst ``|fd - analytic| / (1 + |analytic|)`` over objective and constraint Jacobians."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=float)
    n = problem.n
    blocks = []  # (value_fn, analytic_jacobian)

    _, g, _ = problem.eval_gradient(x)
    blocks.append((lambda z: np.atleast_1d(problem.eval_objective(z)), g[None, :]))
    if problem.residuals is not None:
        blocks.append((lambda z: problem.residuals(z)[0], problem.residuals(x)[1]))
    if problem.eq is not None:
        blocks.append((lambda z: problem.eval_eq(z)[0], problem.eval_eq(x)[1]))
    if problem.ineq is not None:
        blocks.append((lambda z: problem.eval_ineq(z)[0], problem.eval_ineq(x)[1]))
    worst = 0.0
    for fn, jac in blocks:
        if jac.size == 0:
            continue
        fd = np.empty_like(jac)
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            fd[:, i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
        worst = max(worst, float(np.max(np.abs(fd - jac) / (1.0 + np.abs(jac)))))
    return worst
