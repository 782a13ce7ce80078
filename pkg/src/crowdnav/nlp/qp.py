"""Dense strictly convex QP solver (Goldfarb-Idnani dual active-set method).

Solves::

    min  1/2 x'Hx + c'x
    s.t. A_eq x  = b_eq
         A_in x >= b_in

The method starts from the unconstrained minimiser and adds violated
constraints one at a time while keeping the active multipliers dual feasible,
so the result is exact up to round-off. ``J`` and ``R`` follow the usual
factorisation ``J' N_A = [R; 0]`` with ``J J' = H^-1``.

The default backend is the compiled implementation of the same method in
``quadprog``; the numpy one is kept as a readable reference and is used when a
Cholesky factor is supplied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import quadprog
from scipy.linalg import cholesky, solve_triangular


class QPInfeasibleError(RuntimeError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    active: list
    iterations: int
    objective: float


def _householder_to_first(J2: np.ndarray, d2: np.ndarray) -> float:
    """Reflect columns of J2 in place so that d2 maps onto its first axis."""
    alpha = np.linalg.norm(d2)
    if alpha == 0.0:
        return 0.0
    gamma = -alpha if d2[0] > 0 else alpha
    v = d2.copy()
    v[0] -= gamma
    vnorm2 = v @ v
    if vnorm2 > 0.0:
        J2 -= np.outer(J2 @ v, (2.0 / vnorm2) * v)
    return gamma


def _as_problem(c, A_eq, b_eq, A_in, b_in):
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).reshape(-1)
    return c, A_eq.reshape(-1, n), b_eq, A_in.reshape(-1, n), b_in


def solve_qp(H, c, A_eq=None, b_eq=None, A_in=None, b_in=None, *,
             tol: float = 1e-10, max_iter: int | None = None,
             chol_lower: np.ndarray | None = None, backend: str = "quadprog") -> QPResult:
    """Solve the QP; raises :class:`QPInfeasibleError` when the constraints are inconsistent."""
    if backend not in ("quadprog", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numpy" or chol_lower is not None:
        return _solve_qp_numpy(H, c, A_eq, b_eq, A_in, b_in, tol=tol, max_iter=max_iter,
                               chol_lower=chol_lower)
    c, A_eq, b_eq, A_in, b_in = _as_problem(c, A_eq, b_eq, A_in, b_in)
    H = np.asarray(H, dtype=float)
    meq = A_eq.shape[0]
    C = np.vstack([A_eq, A_in]).T
    b = np.concatenate([b_eq, b_in])
    try:
        if C.size:
            x, _, _, it, lam, iact = quadprog.solve_qp(H, -c, C, b, meq)
        else:
            x, _, _, it, lam, iact = quadprog.solve_qp(H, -c)
    except ValueError as exc:
        if "inconsistent" in str(exc):
            raise QPInfeasibleError(str(exc)) from None
        raise
    active = sorted(int(i) - 1 for i in iact if i > 0)
    return QPResult(x=x, y_eq=lam[:meq].copy(), y_in=lam[meq:].copy(), active=active,
                    iterations=int(it[0]), objective=0.5 * float(x @ H @ x) + float(c @ x))


def _solve_qp_numpy(H, c, A_eq=None, b_eq=None, A_in=None, b_in=None, *,
                    tol: float = 1e-10, max_iter: int | None = None,
                    chol_lower: np.ndarray | None = None) -> QPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).reshape(-1)
    if A_eq.size == 0:
        A_eq = A_eq.reshape(0, n)
    if A_in.size == 0:
        A_in = A_in.reshape(0, n)
    meq, min_ = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 50 + 10 * (meq + min_)

    if chol_lower is None:
        L = cholesky(np.asarray(H, dtype=float), lower=True)
    else:
        L = chol_lower
    J = solve_triangular(L, np.eye(n), lower=True, trans="T")
    x = -(J @ (J.T @ c))

    R = np.zeros((n, n))
    q = 0
    active: list[int] = []       # ids: equality i -> i, inequality i -> meq + i
    signs: list[float] = []      # -1 when an equality normal was flipped
    u = np.zeros(0)
    row_norm_in = np.linalg.norm(A_in, axis=1) if min_ else np.zeros(0)
    row_norm_in[row_norm_in == 0.0] = 1.0
    iterations = 0

    def add_constraint(cid, sign, normal, rhs, u_plus):
        nonlocal x, q, u
        nonlocal iterations
        is_eq = cid < meq
        while True:
            iterations += 1
            if iterations > max_iter:
                raise QPInfeasibleError("QP iteration limit reached")
            d = J.T @ normal
            z = J[:, q:] @ d[q:]
            r = solve_triangular(R[:q, :q], d[:q]) if q else np.zeros(0)
            t1, k_drop = np.inf, -1
            for j in range(q):
                if active[j] >= meq and r[j] > 1e-14:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, k_drop = ratio, j
            zn = float(z @ normal)
            viol = float(rhs - normal @ x)
            if zn > 1e-14 * (1.0 + float(normal @ normal)):
                t2 = max(viol, 0.0) / zn
            else:
                t2 = np.inf
            if np.isinf(t2):
                if np.isinf(t1):
                    if is_eq and abs(viol) <= tol * (1.0 + abs(rhs)):
                        return u_plus[:q]  # dependent and already satisfied
                    raise QPInfeasibleError(f"constraint {cid} cannot be satisfied")
                u_plus[:q] -= t1 * r
                u_plus[q] += t1
                drop(k_drop, u_plus)
                continue
            t = min(t1, t2)
            x = x + t * z
            u_plus[:q] -= t * r
            u_plus[q] += t
            if t2 <= t1:
                gamma = _householder_to_first(J[:, q:], d[q:].copy())
                R[:q, q] = d[:q]
                R[q, q] = gamma
                if gamma < 0:
                    R[q, q] = -gamma
                    J[:, q] = -J[:, q]
                active.append(cid)
                signs.append(sign)
                q += 1
                u = u_plus[:q].copy()
                return u
            drop(k_drop, u_plus)

    def drop(k, u_plus):
        nonlocal q
        # remove column k from R, restore triangularity with Givens rotations
        R[:, k:q - 1] = R[:, k + 1:q]
        R[:, q - 1] = 0.0
        for i in range(k, q - 1):
            a, b = R[i, i], R[i + 1, i]
            h = np.hypot(a, b)
            if h == 0.0:
                continue
            cg, sg = a / h, b / h
            Ri, Ri1 = R[i, i:q - 1].copy(), R[i + 1, i:q - 1].copy()
            R[i, i:q - 1] = cg * Ri + sg * Ri1
            R[i + 1, i:q - 1] = -sg * Ri + cg * Ri1
            Ji, Ji1 = J[:, i].copy(), J[:, i + 1].copy()
            J[:, i] = cg * Ji + sg * Ji1
            J[:, i + 1] = -sg * Ji + cg * Ji1
        # keep diagonal positive
        for i in range(k, q - 1):
            if R[i, i] < 0:
                R[i, i:q - 1] *= -1.0
                J[:, i] *= -1.0
        R[q - 1, :] = 0.0
        del active[k]
        del signs[k]
        u_plus[k:q] = u_plus[k + 1:q + 1]
        u_plus[q] = 0.0
        q -= 1
        # caller's trailing "new" slot moves down by one
        return u_plus

    # equality constraints first
    for i in range(meq):
        normal, rhs = A_eq[i].copy(), float(b_eq[i])
        sign = 1.0
        if normal @ x - rhs > 0:
            normal, rhs, sign = -normal, -rhs, -1.0
        u_plus = np.zeros(q + 1)
        u_plus[:q] = u
        before = q
        u_new = add_constraint(i, sign, normal, rhs, u_plus)
        if q == before:
            u = u_new

    while True:
        if min_ == 0:
            break
        s = (A_in @ x - b_in) / row_norm_in
        if q:
            ids = [a - meq for a in active if a >= meq]
            s[ids] = np.inf
        p = int(np.argmin(s))
        if s[p] >= -tol * (1.0 + abs(b_in[p]) / row_norm_in[p]):
            break
        u_plus = np.zeros(q + 1)
        u_plus[:q] = u
        add_constraint(meq + p, 1.0, A_in[p].copy(), float(b_in[p]), u_plus)

    y_eq = np.zeros(meq)
    y_in = np.zeros(min_)
    for j, cid in enumerate(active):
        if cid < meq:
            y_eq[cid] = signs[j] * u[j]
        else:
            y_in[cid - meq] = u[j]
    obj = 0.5 * float(x @ (np.asarray(H) @ x)) + float(c @ x) if chol_lower is None else \
        0.5 * float(np.sum((L.T @ x) ** 2)) + float(c @ x)
    return QPResult(x=x, y_eq=y_eq, y_in=y_in,
                    active=[a - meq for a in active if a >= meq],
                    iterations=iterations, objective=obj)
