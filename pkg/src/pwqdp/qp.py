"""Dense convex QP solver: primal active-set method with warm starts.

Single optimization kernel for the whole package: condensed MPC programs,
the one-step controller subproblems, and (with a tiny quadratic ridge) the
LP subproblems used by the polytope routines.

Problems are minimize 0.5 x'Px + q'x subject to G x <= h with P positive
definite. Results carry KKT residuals and a counted-flop total so callers
can do portable complexity accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

FEAS_TOL = 1e-8
MULT_TOL = 1e-9
COMP_TOL = 1e-7
STEP_TOL = 1e-12
LP_RIDGE = 1e-9
UNBOUNDED_NORM = 1e12
DEP_TOL = 1e-10


@dataclass(frozen=True)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, float))
        q = np.asarray(self.q, float).ravel()
        d = q.size
        if P.shape != (d, d):
            raise ValueError(f"P must be {d}x{d}, got {P.shape}")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12:
            raise ValueError("P not symmetric")
        G = self.G
        h = self.h
        if G is None:
            G, h = np.zeros((0, d)), np.zeros(0)
        G = np.atleast_2d(np.asarray(G, float))
        if G.size == 0:
            G = G.reshape(0, d)
        h = np.asarray(h, float).ravel()
        if G.shape[1] != d or G.shape[0] != h.size:
            raise ValueError("constraint dimensions inconsistent")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.q.size

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpResult:
    xstar: np.ndarray
    lam: np.ndarray
    status: str  # optimal | infeasible | maxiter | unbounded
    kkt_residual: float
    iterations: int
    flops: int
    working_set: tuple = ()

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class ActiveSetSolver:
    """Primal active-set method for strictly convex dense QPs.

    Instances hold a cumulative flop counter and are single-threaded;
    run one instance per concurrent worker.
    """

    def __init__(self, max_iter: int | None = None):
        self.max_iter = max_iter
        self.flops = 0

    # flop accounting helpers (rough dense-op counts, integer for determinism)
    def _f_chol(self, d):
        self.flops += d ** 3 // 3

    def _f_solve(self, d, k=1):
        self.flops += 2 * d * d * k

    def _f_mm(self, a, b, c):
        self.flops += 2 * a * b * c

    def solve(self, prob: QpProblem, warm_start=None) -> QpResult:
        """Solve the QP. warm_start is an optional (x, working_set_guess) pair;
        an infeasible warm point falls back to phase-1.
        """
        start_flops = self.flops
        d = prob.dim
        try:
            chol = cho_factor(prob.P)
        except np.linalg.LinAlgError as exc:
            raise ValueError("P must be positive definite") from exc
        self._f_chol(d)

        x0, guess = None, ()
        if warm_start is not None:
            xw = np.asarray(warm_start[0], float).ravel()
            gw = tuple(warm_start[1]) if len(warm_start) > 1 and warm_start[1] is not None else ()
            if xw.size == d and self._max_violation(prob, xw) <= FEAS_TOL:
                x0, guess = xw, gw
        if x0 is None and self._max_violation(prob, np.zeros(d)) <= FEAS_TOL:
            x0 = np.zeros(d)
        if x0 is None:
            x0, feasible = self._phase1(prob)
            if not feasible:
                res = QpResult(xstar=np.full(d, np.nan), lam=np.zeros(prob.G.shape[0]),
                               status="infeasible", kkt_residual=np.inf, iterations=0,
                               flops=self.flops - start_flops)
                return res

        res = self._iterate(prob, chol, x0, guess)
        res.flops = self.flops - start_flops
        return res

    def solve_lp(self, q, G, h) -> QpResult:
        """Regularized LP: minimize q'x subject to Gx <= h with P = ridge*I.

        Iterate norms beyond 1e12 are reported as status 'unbounded'.
        """
        q = np.asarray(q, float).ravel()
        prob = QpProblem(LP_RIDGE * np.eye(q.size), q, G, h)
        return self.solve(prob)

    # ------------------------------------------------------------------
    def _max_violation(self, prob, x):
        if prob.G.shape[0] == 0:
            return 0.0
        self._f_mm(prob.G.shape[0], prob.dim, 1)
        return float(np.max(prob.G @ x - prob.h))

    def _phase1(self, prob: QpProblem):
        """Single-slack feasibility problem: min t s.t. Gx - t <= h, t >= -1."""
        d, c = prob.dim, prob.G.shape[0]
        G1 = np.hstack([prob.G, -np.ones((c, 1))])
        G1 = np.vstack([G1, np.concatenate([np.zeros(d), [-1.0]])])
        h1 = np.concatenate([prob.h, [1.0]])
        q1 = np.concatenate([np.zeros(d), [1.0]])
        P1 = LP_RIDGE * np.eye(d + 1)
        aux = QpProblem(P1, q1, G1, h1)
        t0 = max(float(np.max(prob.G @ np.zeros(d) - prob.h)), -0.5) + 1.0
        z0 = np.concatenate([np.zeros(d), [t0]])
        chol = cho_factor(P1)
        self._f_chol(d + 1)
        res = self._iterate(aux, chol, z0, ())
        tstar = res.xstar[-1] if np.all(np.isfinite(res.xstar)) else np.inf
        if not res.optimal or tstar > FEAS_TOL:
            return np.full(d, np.nan), False
        return res.xstar[:d], True

    def _eqp(self, prob, chol, W):
        """Equality-constrained subproblem on working set W.

        Returns the minimizer and its multipliers; None multipliers signal a
        numerically dependent working set.
        """
        d = prob.dim
        x_uc = -cho_solve(chol, prob.q)
        self._f_solve(d)
        if not W:
            return x_uc, np.zeros(0)
        GW = prob.G[W]
        PiGt = cho_solve(chol, GW.T)
        self._f_solve(d, len(W))
        Sc = GW @ PiGt
        self._f_mm(len(W), d, len(W))
        rhs = GW @ x_uc - prob.h[list(W)]
        self._f_mm(len(W), d, 1)
        try:
            cS = cho_factor(0.5 * (Sc + Sc.T))
        except np.linalg.LinAlgError:
            return None, None
        self._f_chol(len(W))
        lam = cho_solve(cS, rhs)
        self._f_solve(len(W))
        x = x_uc - PiGt @ lam
        self._f_mm(d, len(W), 1)
        return x, lam

    def _independent(self, prob, W, row):
        """Check that G[row] is not in the span of the working-set rows."""
        if not W:
            return True
        GW = prob.G[W]
        g = prob.G[row]
        coef, *_ = np.linalg.lstsq(GW.T, g, rcond=None)
        self._f_mm(len(W), prob.dim, len(W))
        resid = g - GW.T @ coef
        return float(np.linalg.norm(resid)) > DEP_TOL * max(1.0, float(np.linalg.norm(g)))

    def _iterate(self, prob: QpProblem, chol, x0, guess) -> QpResult:
        d, c = prob.dim, prob.G.shape[0]
        x = np.array(x0, dtype=float)
        slack = prob.h - prob.G @ x if c else np.zeros(0)

        W: list[int] = []
        for i in guess:
            if 0 <= i < c and abs(slack[i]) <= 10 * FEAS_TOL and self._independent(prob, W, i):
                W.append(i)

        seen: dict[frozenset, int] = {}
        max_iter = self.max_iter if self.max_iter is not None else 50 + 10 * max(c, d)
        iterations = 0
        status = "maxiter"
        for _ in range(max_iter):
            iterations += 1
            key = frozenset(W)
            seen[key] = seen.get(key, 0) + 1
            if seen[key] > max(4, 2 * c):
                status = "maxiter"
                break

            x_eq, lam_W = self._eqp(prob, chol, W)
            if lam_W is None:
                # dependent working set: drop the most recently added row
                W.pop()
                continue
            p = x_eq - x
            if float(np.linalg.norm(p)) <= STEP_TOL * (1.0 + float(np.linalg.norm(x))):
                # at the working-set optimum: check dual feasibility
                if lam_W.size == 0 or float(lam_W.min()) >= -MULT_TOL:
                    x = x_eq
                    status = "optimal"
                    break
                drop = int(np.argmin(lam_W))  # most negative, lowest index on ties
                W.pop(drop)
                continue

            # ratio test over rows outside W with increasing violation
            alpha, block = 1.0, -1
            if c:
                Gp = prob.G @ p
                self._f_mm(c, d, 1)
                slack = prob.h - prob.G @ x
                self._f_mm(c, d, 1)
                mask = Gp > 1e-13 * np.maximum(1.0, np.abs(slack))
                if W:
                    mask[W] = False
                idx = np.flatnonzero(mask)
                if idx.size:
                    ratios = slack[idx] / Gp[idx]
                    j = int(np.argmin(ratios))  # first minimum = lowest row index on ties
                    if ratios[j] < alpha - 1e-15:
                        alpha, block = max(float(ratios[j]), 0.0), int(idx[j])
            x = x + alpha * p
            if float(np.linalg.norm(x)) > UNBOUNDED_NORM:
                status = "unbounded"
                break
            if block >= 0:
                if self._independent(prob, W, block):
                    W.append(block)
                else:
                    # degenerate corner: exchange with a spanning working row
                    GW = prob.G[W]
                    coef, *_ = np.linalg.lstsq(GW.T, prob.G[block], rcond=None)
                    W.pop(int(np.argmax(np.abs(coef))))
                    W.append(block)
            else:
                # full step to the working-set optimum; loop re-checks duals
                continue

        lam = np.zeros(c)
        if status == "optimal" and W:
            lam[W] = np.maximum(lam_W, 0.0)
        kkt = self._kkt_residual(prob, x, lam) if status == "optimal" else np.inf
        return QpResult(xstar=x, lam=lam, status=status, kkt_residual=kkt,
                        iterations=iterations, flops=0, working_set=tuple(W))

    @staticmethod
    def _kkt_residual(prob, x, lam) -> float:
        stat = prob.P @ x + prob.q
        if prob.G.shape[0]:
            stat = stat + prob.G.T @ lam
            viol = prob.G @ x - prob.h
            rp = float(np.max(viol, initial=0.0))
            rc = float(np.max(np.abs(lam * viol), initial=0.0))
        else:
            rp = rc = 0.0
        rs = float(np.max(np.abs(stat), initial=0.0)) / (1.0 + float(np.max(np.abs(prob.q), initial=0.0)))
        return max(rs, rp, rc)


def solve(prob: QpProblem, warm_start=None) -> QpResult:
    """One-shot solve with a fresh solver instance."""
    return ActiveSetSolver().solve(prob, warm_start)


def solve_lp(q, G, h) -> QpResult:
    return ActiveSetSolver().solve_lp(q, G, h)
