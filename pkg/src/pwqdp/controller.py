"""Online one-step dynamic-programming controller.

At each step the controller minimizes

    Qhat(x, u) = x'Qx + u'Ru + Jhat(Ax + Bu)

over u in U with Ax + Bu in C (C omitted when no invariant set is known).
Because Jhat is piecewise quadratic in the hidden-unit activation pattern,
Qhat restricted to a fixed pattern is the convex quadratic
u'Pbar u + qbar'u + vbar, and the problem decomposes into plain QPs:

* solve_pcp alternates a QP over an outer set shrunk by gradient cuts with a
  QP restricted to the current pattern's region, stopping when the two
  minimizers coincide.
* solve_decomposition iterates pattern -> QP -> pattern and stops when the
  pattern repeats immediately; revisiting an older pattern (a cycle) resets
  to an unseen pattern (midpoint heuristic, then lexicographic scan).

Both returned inputs carry a certified-optimality flop/iteration record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qp
from .exceptions import InfeasibleError, PwqdpError, SolverError
from .model import LtiSystem, Polyhedron
from .pwq_net import PwqNetwork

DEFAULT_EPSILON = 1e-9


def activation_flops(M: int, n: int, m: int) -> int:
    """Counted cost of one pattern update plus quadratic-coefficient build."""
    return M * (2 * n * n + n + m * m + 5 * m + 2 * m * n + 2) + 2 * m * n + m * (m + 3) // 2


@dataclass(frozen=True, eq=False)
class QhatCoefficients:
    Pbar: np.ndarray
    qbar: np.ndarray
    vbar: float

    def value(self, u) -> float:
        u = np.asarray(u, float).ravel()
        return float(u @ self.Pbar @ u + self.qbar @ u + self.vbar)


@dataclass(frozen=True, eq=False)
class OneStepProblem:
    net: PwqNetwork
    system: LtiSystem
    input_set: Polyhedron
    successor_set: Polyhedron | None
    x: np.ndarray

    def constraints(self):
        """Stacked (G, h) on u: input rows plus successor rows mapped through B."""
        x = np.asarray(self.x, float).ravel()
        A, B = self.system.A, self.system.B
        rows, offs = [], []
        if self.input_set.nrows:
            rows.append(self.input_set.Hmat)
            offs.append(self.input_set.hvec)
        C = self.successor_set
        if C is not None and C.nrows:
            rows.append(C.Hmat @ B)
            offs.append(C.hvec - C.Hmat @ (A @ x))
        if not rows:
            return np.zeros((0, self.system.m)), np.zeros(0)
        return np.vstack(rows), np.concatenate(offs)

    def qhat(self, u) -> float:
        """Exact Q-function value through the network (oracle for tests)."""
        x = np.asarray(self.x, float).ravel()
        u = np.asarray(u, float).ravel()
        succ = self.system.A @ x + self.system.B @ u
        stage = float(x @ self.system.Q @ x + u @ self.system.R @ u)
        return stage + self.net.evaluate(succ)


@dataclass
class StepResult:
    u: np.ndarray
    iterations: int
    cycles: int
    flops: int
    algorithm: str
    qp_flops: list
    pattern: tuple


def qhat_coefficients(net: PwqNetwork, system: LtiSystem, x, pattern) -> QhatCoefficients:
    """Quadratic coefficients of Qhat(x, .) on a fixed activation pattern.

    Note the QP objective convention u'Pbar u + qbar'u (no 1/2 factor).
    """
    x = np.asarray(x, float).ravel()
    A, B, Q, R = system.A, system.B, system.Q, system.R
    idx = sorted(int(i) for i in pattern)
    Pin = np.array(net.Pstar)
    Ax = A @ x
    qrow = 2.0 * (Ax @ net.Pstar @ B)
    vbar = float(x @ Q @ x + Ax @ net.Pstar @ Ax)
    if idx:
        Wa, ra, ba = net.W[idx], net.r[idx], net.b[idx]
        pre = Wa @ Ax + ba
        Pin = Pin + (ra[:, None] * Wa).T @ Wa
        qrow = qrow + 2.0 * ((ra * pre) @ Wa) @ B
        vbar += float(ra @ (pre * pre))
    Pbar = R + B.T @ Pin @ B
    return QhatCoefficients(Pbar=0.5 * (Pbar + Pbar.T), qbar=qrow, vbar=vbar)


def _pattern_of(net, system, x, u):
    return net.activation_pattern(system.A @ np.asarray(x, float).ravel()
                                  + system.B @ np.asarray(u, float).ravel())


def _solve_quadratic(solver, coef, G, h, warm=None):
    res = solver.solve(qp.QpProblem(2.0 * coef.Pbar, coef.qbar, G, h), warm)
    if res.status == "infeasible":
        raise InfeasibleError("one-step problem infeasible at this state")
    if not res.optimal:
        raise SolverError(f"QP solver returned status {res.status}")
    return res


def _unseen_pattern(net, seen, mid_candidate):
    if mid_candidate is not None and mid_candidate not in seen:
        return mid_candidate
    for code in range(2 ** min(net.width, 62)):
        pat = tuple(i for i in range(net.width) if code >> i & 1)
        if pat not in seen:
            return pat
    raise PwqdpError("activation-pattern space exhausted")


def solve_decomposition(prob: OneStepProblem, warm_input,
                        solver: qp.ActiveSetSolver | None = None,
                        max_iter: int = 10000) -> StepResult:
    solver = solver or qp.ActiveSetSolver()
    G, h = prob.constraints()
    M, n, m = prob.net.width, prob.system.n, prob.system.m
    f_act = activation_flops(M, n, m)

    u = np.asarray(warm_input, float).ravel()
    u_prev = None
    seen: list = []
    seen_set = set()
    flops, cycles, qp_flops = 0, 0, []
    warm_qp = None
    for s in range(1, max_iter + 1):
        pat = _pattern_of(prob.net, prob.system, prob.x, u)
        flops += f_act + M
        if s > 1 and pat == seen[-1]:
            return StepResult(u=u, iterations=s, cycles=cycles, flops=flops,
                              algorithm="decomp", qp_flops=qp_flops, pattern=pat)
        if s > 2 and pat in seen_set and pat != seen[-1]:
            cycles += 1
            mid = None
            if u_prev is not None:
                mid = _pattern_of(prob.net, prob.system, prob.x, 0.5 * (u + u_prev))
            pat = _unseen_pattern(prob.net, seen_set, mid)
        seen.append(pat)
        seen_set.add(pat)
        coef = qhat_coefficients(prob.net, prob.system, prob.x, pat)
        res = _solve_quadratic(solver, coef, G, h, warm_qp)
        flops += res.flops
        qp_flops.append(res.flops)
        u_prev = u
        u = res.xstar
        warm_qp = (u, res.working_set)
    raise PwqdpError("decomposition algorithm failed to terminate (internal error)")


def solve_pcp(prob: OneStepProblem, warm_input, epsilon: float = DEFAULT_EPSILON,
              solver: qp.ActiveSetSolver | None = None) -> StepResult:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    solver = solver or qp.ActiveSetSolver()
    G, h = prob.constraints()
    M, n, m = prob.net.width, prob.system.n, prob.system.m
    f_act = activation_flops(M, n, m)
    A, B = prob.system.A, prob.system.B
    x = np.asarray(prob.x, float).ravel()
    WB = prob.net.W @ B if M else np.zeros((0, m))
    WAxb = (prob.net.W @ (A @ x) + prob.net.b) if M else np.zeros(0)

    flops, qp_flops = 0, []
    u = np.asarray(warm_input, float).ravel()
    if G.shape[0] and float(np.max(G @ u - h)) > qp.FEAS_TOL:
        # infeasible warm start: project onto the feasible set
        proj = solver.solve(qp.QpProblem(2.0 * np.eye(m), -2.0 * u, G, h))
        if proj.status == "infeasible":
            raise InfeasibleError("one-step problem infeasible at this state")
        u = proj.xstar
        flops += proj.flops

    cut_rows: list = []
    cut_offs: list = []
    max_iter = 10 * 2 ** min(M, 20)
    for s in range(1, max_iter + 1):
        pat = _pattern_of(prob.net, prob.system, prob.x, u)
        flops += f_act
        coef = qhat_coefficients(prob.net, prob.system, prob.x, pat)

        Gs = np.vstack([G] + cut_rows) if cut_rows else G
        hs = np.concatenate([h] + cut_offs) if cut_offs else h
        res_u = _solve_quadratic(solver, coef, Gs, hs)
        flops += res_u.flops
        qp_flops.append(res_u.flops)

        # region-restricted problem: sign constraints of the current pattern
        mask = np.zeros(M, dtype=bool)
        mask[list(pat)] = True
        sign_rows = np.vstack([-WB[mask], WB[~mask]]) if M else np.zeros((0, m))
        sign_offs = np.concatenate([WAxb[mask], -WAxb[~mask]]) if M else np.zeros(0)
        res_d = _solve_quadratic(solver, coef, np.vstack([G, sign_rows]),
                                 np.concatenate([h, sign_offs]))
        flops += res_d.flops + 2 * m * m + 2 * m - 1
        qp_flops.append(res_d.flops)

        u_next, d_next = res_u.xstar, res_d.xstar
        if float(np.linalg.norm(d_next - u_next)) <= epsilon:
            return StepResult(u=d_next, iterations=s + 1, cycles=0, flops=flops,
                              algorithm="pcp", qp_flops=qp_flops,
                              pattern=_pattern_of(prob.net, prob.system, prob.x, d_next))
        normal = 2.0 * coef.Pbar @ u_next + coef.qbar
        cut_rows.append(normal[None, :])
        cut_offs.append(np.array([float(normal @ d_next)]))
        u = u_next
    raise PwqdpError("PCP algorithm failed to terminate (internal error)")


class Controller:
    """Stateful one-step controller: warm-starts each step with the previous
    input and accumulates iteration/flop counters. Single owner, not
    thread-safe; run one instance per simulated system.
    """

    def __init__(self, net: PwqNetwork, system: LtiSystem, input_set: Polyhedron,
                 successor_set: Polyhedron | None = None, algorithm: str = "decomp",
                 epsilon: float = DEFAULT_EPSILON, switch_to_pcp_on_cycle: bool = False):
        if algorithm not in ("decomp", "pcp"):
            raise ValueError(f"unknown algorithm {algorithm!r}")
        self.net, self.system = net, system
        self.input_set, self.successor_set = input_set, successor_set
        self.algorithm = algorithm
        self.epsilon = epsilon
        self.switch_to_pcp_on_cycle = switch_to_pcp_on_cycle
        self.solver = qp.ActiveSetSolver()
        self.prev_input: np.ndarray | None = None
        self.steps = 0
        self.total_iterations = 0
        self.total_cycles = 0
        self.total_flops = 0

    def reset(self):
        self.prev_input = None
        self.steps = 0
        self.total_iterations = 0
        self.total_cycles = 0
        self.total_flops = 0

    def step(self, x) -> StepResult:
        warm = self.prev_input if self.prev_input is not None else np.zeros(self.system.m)
        prob = OneStepProblem(net=self.net, system=self.system,
                              input_set=self.input_set,
                              successor_set=self.successor_set,
                              x=np.asarray(x, float).ravel())
        if self.algorithm == "pcp":
            result = solve_pcp(prob, warm, self.epsilon, self.solver)
        else:
            result = solve_decomposition(prob, warm, self.solver)
            if result.cycles and self.switch_to_pcp_on_cycle:
                result = solve_pcp(prob, warm, self.epsilon, self.solver)
        self.prev_input = result.u
        self.steps += 1
        self.total_iterations += result.iterations
        self.total_cycles += result.cycles
        self.total_flops += result.flops
        return result
