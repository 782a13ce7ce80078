"""Problem, settings and solution containers for the SQP solver."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ConstraintFn = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


class NumericalFailure(FloatingPointError):
    """A callback produced non-finite values."""


@dataclass
class NlpProblem:
    """Smooth NLP ``min f(x)`` subject to

    * ``eq(x) = 0``
    * ``ineq(x) >= 0``
    * ``A x >= b`` (``linear_ineq``, never relaxed)
    * ``lower <= x <= upper``
    * ``x[a] * x[b] <= rho`` for each complementarity pair, with ``x[a], x[b] >= 0``.

    The objective is given either as least-squares residuals (``f = |r|^2``,
    enabling a Gauss-Newton Hessian) or as value/gradient callbacks.
    """

    n: int
    residuals: Optional[Callable[[np.ndarray], tuple]] = None
    objective: Optional[Callable[[np.ndarray], float]] = None
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq: Optional[ConstraintFn] = None
    ineq: Optional[ConstraintFn] = None
    linear_ineq: Optional[tuple] = None
    complementarity: Sequence[tuple[int, int]] = ()
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.residuals is None and (self.objective is None or self.gradient is None):
            raise ValueError("need residuals or objective + gradient")
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bounds must have length n")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        pairs = np.asarray(self.complementarity, dtype=int).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= self.n):
            raise ValueError("complementarity index out of range")
        self.complementarity = [tuple(p) for p in pairs.tolist()]
        if self.linear_ineq is not None:
            a, b = self.linear_ineq
            a = np.atleast_2d(np.asarray(a, float))
            b = np.asarray(b, float).ravel()
            if a.shape != (b.shape[0], self.n):
                raise ValueError("linear_ineq shapes do not match n")
            self.linear_ineq = (a, b)

    # -- evaluation helpers used by the solver ---------------------------
    def eval_objective(self, x: np.ndarray) -> float:
        if self.residuals is not None:
            r, _ = self.residuals(x)
            return float(r @ r)
        return float(self.objective(x))

    def eval_gradient(self, x: np.ndarray):
        """Return ``(f, grad, gauss_newton_hessian_or_None)``."""
        if self.residuals is not None:
            r, jac = self.residuals(x)
            return float(r @ r), 2.0 * jac.T @ r, 2.0 * jac.T @ jac
        return float(self.objective(x)), np.asarray(self.gradient(x), float), None

    def eval_eq(self, x):
        if self.eq is None:
            return np.zeros(0), np.zeros((0, self.n))
        c, jac = self.eq(x)
        return np.asarray(c, float), np.asarray(jac, float).reshape(-1, self.n)

    def eval_ineq(self, x):
        if self.ineq is None:
            return np.zeros(0), np.zeros((0, self.n))
        c, jac = self.ineq(x)
        return np.asarray(c, float), np.asarray(jac, float).reshape(-1, self.n)

    def comp_ineq(self, x, rho: float):
        """Relaxed complementarity rows ``rho - x_a x_b >= 0`` and their Jacobian."""
        m = len(self.complementarity)
        c = np.empty(m)
        jac = np.zeros((m, self.n))
        for i, (a, b) in enumerate(self.complementarity):
            c[i] = rho - x[a] * x[b]
            jac[i, a] = -x[b]
            jac[i, b] = -x[a]
        return c, jac

    def effective_bounds(self):
        lo = self.lower.copy()
        for a, b in self.complementarity:
            lo[a] = max(lo[a], 0.0)
            lo[b] = max(lo[b], 0.0)
        return lo, self.upper


@dataclass(frozen=True)
class SolverSettings:
    max_iter: int = 100
    max_iter_per_stage: int = 30
    kkt_tol: float = 1e-6
    rho_init: float = 1e-1
    rho_min: float = 1e-5
    rho_decay: float = 0.2
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-6
    qp_tol: float = 1e-10
    hessian_reg: float = 1e-6
    elastic_weight: float = 1e3
    elastic_curvature: float = 1e-6
    budget_ms: Optional[float] = None
    trust_radius: Optional[float] = None   # initial infinity-norm step cap; None disables it

    def __post_init__(self):
        if not (self.kkt_tol > 0 and self.qp_tol > 0 and self.rho_min > 0):
            raise ValueError("tolerances and rho_min must be positive")
        if not 0 < self.rho_decay < 1:
            raise ValueError("rho_decay must lie in (0, 1)")
        if self.rho_init < self.rho_min:
            raise ValueError("rho_init must be at least rho_min")
        if self.budget_ms is not None and not self.budget_ms > 0:
            raise ValueError("budget_ms must be positive")
        if self.trust_radius is not None and not self.trust_radius > 0:
            raise ValueError("trust_radius must be positive")
        if self.max_iter < 1 or self.max_iter_per_stage < 1:
            raise ValueError("iteration limits must be positive")

    def rho_schedule(self) -> list[float]:
        out, rho = [], self.rho_init
        while rho > self.rho_min * (1 + 1e-12):
            out.append(rho)
            rho *= self.rho_decay
        out.append(self.rho_min)
        return out


@dataclass
class NlpSolution:
    x: np.ndarray
    multipliers: dict
    status: str                  # converged | max_iter | budget_exhausted | infeasible | numerical_failure
    kkt_residual: float
    iterations: int
    solve_time: float
    objective: float = float("nan")
    violation: float = float("nan")
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"
