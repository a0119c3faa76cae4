"""Finite-horizon MPC as a condensed multi-parametric QP.

Builds the dense program

    J_N(x) = 0.5 x'Yx + min_U 0.5 U'HU + x'FU   s.t.  G U <= w + S x

by substituting the state recursion into the stage costs (terminal weight
Pstar) and stage constraints (x_k in X for k = 1..N, u_k in U for
k = 0..N-1; x_0 in X is checked at solve time). Also provides horizon
selection, value gradients from multipliers, and region Hessians.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from . import qp
from .exceptions import DegeneracyError, InfeasibleError, SolverError
from .model import LtiSystem, Polyhedron, ProblemInstance
from .riccati import RiccatiSolution

ACTIVE_SLACK_TOL = 1e-7
STRONG_MULT_TOL = 1e-8
PD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MpqpData:
    H: np.ndarray
    F: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    w: np.ndarray
    S: np.ndarray
    N: int
    n: int
    m: int
    system: LtiSystem
    state_set: Polyhedron
    input_set: Polyhedron
    Pstar: np.ndarray
    # row bookkeeping: (kind, stage, local_row) per constraint row
    row_map: tuple = ()
    row_lookup: dict = field(default_factory=dict, repr=False)
    _h_chol: dict = field(default_factory=dict, repr=False)

    def input_index(self, k: int):
        """Decision-vector slice of stage-k input."""
        return slice(k * self.m, (k + 1) * self.m)

    def h_cholesky(self):
        if "c" not in self._h_chol:
            self._h_chol["c"] = cho_factor(self.H)
        return self._h_chol["c"]

    def predict_states(self, x, U):
        """Stage states x_0..x_N under the input sequence."""
        A, B = self.system.A, self.system.B
        xs = [np.asarray(x, float).ravel()]
        U = np.asarray(U, float).ravel()
        for k in range(self.N):
            xs.append(A @ xs[-1] + B @ U[self.input_index(k)])
        return np.array(xs)

    def stage_cost(self, x, U) -> float:
        """Direct stage-wise evaluation of the finite-horizon objective."""
        Q, R = self.system.Q, self.system.R
        xs = self.predict_states(x, U)
        U = np.asarray(U, float).ravel()
        total = 0.0
        for k in range(self.N):
            u = U[self.input_index(k)]
            total += float(xs[k] @ Q @ xs[k] + u @ R @ u)
        total += float(xs[self.N] @ self.Pstar @ xs[self.N])
        return total

    def stage_constraints_hold(self, x, U, tol: float = 1e-9) -> bool:
        """Check x_k in X (k=1..N) and u_k in U (k=0..N-1) stage by stage."""
        xs = self.predict_states(x, U)
        U = np.asarray(U, float).ravel()
        for k in range(1, self.N + 1):
            if not self.state_set.contains(xs[k], tol=tol):
                return False
        for k in range(self.N):
            if not self.input_set.contains(U[self.input_index(k)], tol=tol):
                return False
        return True

    def condensed_value(self, x, U) -> float:
        x = np.asarray(x, float).ravel()
        U = np.asarray(U, float).ravel()
        return float(0.5 * x @ self.Y @ x + 0.5 * U @ self.H @ U + x @ self.F @ U)


@dataclass(frozen=True, eq=False)
class MpcSolution:
    Ustar: np.ndarray
    lam: np.ndarray
    value: float
    active_set: tuple
    x: np.ndarray
    degenerate: bool
    working_set: tuple
    iterations: int
    flops: int


def condense(system: LtiSystem, state_set: Polyhedron, input_set: Polyhedron,
             Pstar, N: int) -> MpqpData:
    """Build the condensed program for horizon N >= 1."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    A, B, Q, R = system.A, system.B, system.Q, system.R
    n, m = system.n, system.m
    Pstar = np.asarray(Pstar, float)

    Apow = [np.eye(n)]
    for _ in range(N):
        Apow.append(A @ Apow[-1])
    Ab = np.vstack(Apow[1:])  # (N n, n)
    Bb = np.zeros((N * n, N * m))
    for k in range(1, N + 1):
        for j in range(k):
            Bb[(k - 1) * n: k * n, j * m: (j + 1) * m] = Apow[k - 1 - j] @ B

    Qbar = block_diag(*([Q] * (N - 1) + [Pstar])) if N > 1 else Pstar
    Rbar = block_diag(*([R] * N))
    H = 2.0 * (Rbar + Bb.T @ Qbar @ Bb)
    H = 0.5 * (H + H.T)
    F = 2.0 * (Ab.T @ Qbar @ Bb)
    Y = 2.0 * (Q + Ab.T @ Qbar @ Ab)
    Y = 0.5 * (Y + Y.T)

    if float(np.linalg.eigvalsh(H).min()) <= PD_TOL:
        raise ValueError("condensed Hessian H not positive definite")

    rows, offs, srows, row_map = [], [], [], []
    Hx, hx = state_set.Hmat, state_set.hvec
    if state_set.nrows:
        for k in range(1, N + 1):
            rows.append(Hx @ Bb[(k - 1) * n: k * n])
            offs.append(hx)
            srows.append(-Hx @ Apow[k])
            row_map.extend(("state", k, i) for i in range(state_set.nrows))
    Hu, hu = input_set.Hmat, input_set.hvec
    if input_set.nrows:
        for k in range(N):
            blk = np.zeros((input_set.nrows, N * m))
            blk[:, k * m: (k + 1) * m] = Hu
            rows.append(blk)
            offs.append(hu)
            srows.append(np.zeros((input_set.nrows, n)))
            row_map.extend(("input", k, i) for i in range(input_set.nrows))
    if rows:
        G = np.vstack(rows)
        w = np.concatenate(offs)
        S = np.vstack(srows)
    else:
        G, w, S = np.zeros((0, N * m)), np.zeros(0), np.zeros((0, n))

    lookup = {entry: row for row, entry in enumerate(row_map)}
    return MpqpData(H=H, F=F, Y=Y, G=G, w=w, S=S, N=N, n=n, m=m, system=system,
                    state_set=state_set, input_set=input_set, Pstar=Pstar,
                    row_map=tuple(row_map), row_lookup=lookup)


def solve_mpc(mpqp: MpqpData, x, warm: MpcSolution | None = None,
              solver: qp.ActiveSetSolver | None = None) -> MpcSolution:
    """Solve the condensed program at parameter x.

    The active set collects rows with slack <= 1e-7; rows that are active
    with (numerically) zero multiplier mark the solution degenerate.
    """
    x = np.asarray(x, float).ravel()
    if not mpqp.state_set.contains(x, tol=ACTIVE_SLACK_TOL):
        raise InfeasibleError("initial state outside the state constraint set")
    solver = solver or qp.ActiveSetSolver()
    prob = qp.QpProblem(mpqp.H, mpqp.F.T @ x, mpqp.G, mpqp.w + mpqp.S @ x)
    warm_start = None
    if warm is not None:
        warm_start = (warm.Ustar, warm.working_set) if isinstance(warm, MpcSolution) else warm
    res = solver.solve(prob, warm_start)
    if res.status == "infeasible":
        raise InfeasibleError("state outside the feasible region of the MPC program")
    if not res.optimal:
        raise SolverError(f"QP solver returned status {res.status}")

    U = res.xstar
    slack = prob.h - prob.G @ U if prob.G.shape[0] else np.zeros(0)
    active = tuple(int(i) for i in np.flatnonzero(slack <= ACTIVE_SLACK_TOL))
    strong = [i for i in active if res.lam[i] > STRONG_MULT_TOL]
    degenerate = len(strong) != len(active)
    if active and not degenerate:
        GA = mpqp.G[list(active)]
        if np.linalg.matrix_rank(GA, tol=1e-10) < len(active):
            degenerate = True
    value = mpqp.condensed_value(x, U)
    return MpcSolution(Ustar=U, lam=res.lam, value=value, active_set=active, x=x,
                       degenerate=degenerate, working_set=res.working_set,
                       iterations=res.iterations, flops=res.flops)


def first_input(mpqp: MpqpData, sol: MpcSolution):
    return sol.Ustar[: mpqp.m]


def shifted_warm(mpqp: MpqpData, sol: MpcSolution):
    """Receding-horizon warm start: drop the first stage of the plan and of
    the working set, append a zero tail input."""
    U = np.concatenate([sol.Ustar[mpqp.m:], np.zeros(mpqp.m)])
    ws = []
    for row in sol.working_set:
        kind, k, i = mpqp.row_map[row]
        prev = (kind, k - 1, i)
        if prev in mpqp.row_lookup:
            ws.append(mpqp.row_lookup[prev])
    return U, tuple(sorted(ws))


def terminal_state(mpqp: MpqpData, sol: MpcSolution):
    return mpqp.predict_states(sol.x, sol.Ustar)[-1]


def value_gradient(mpqp: MpqpData, sol: MpcSolution, x=None):
    """Gradient of the optimal value: -S'lam + Y x + F U*.

    Emits a warning when the solution was flagged degenerate (rank-deficient
    or weakly active rows); the returned gradient may then be invalid.
    """
    x = sol.x if x is None else np.asarray(x, float).ravel()
    if sol.degenerate:
        warnings.warn("degenerate active set: value gradient may be invalid")
    g = mpqp.Y @ x + mpqp.F @ sol.Ustar
    if mpqp.G.shape[0]:
        g = g - mpqp.S.T @ sol.lam
    return g


def region_hessian(mpqp: MpqpData, active_set, Pstar=None):
    """Quadratic coefficient of the value function on an active-set region:
    P_i = Pstar + 0.5 S_A' (G_A H^-1 G_A')^-1 S_A.
    """
    Pstar = mpqp.Pstar if Pstar is None else np.asarray(Pstar, float)
    active = sorted(int(i) for i in active_set)
    if not active:
        return Pstar.copy()
    GA = mpqp.G[active]
    SA = mpqp.S[active]
    hc = mpqp.h_cholesky()
    Gamma = GA @ cho_solve(hc, GA.T)
    try:
        gc = cho_factor(0.5 * (Gamma + Gamma.T))
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("active rows rank deficient (Gamma singular)") from exc
    P = Pstar + 0.5 * SA.T @ cho_solve(gc, SA)
    return 0.5 * (P + P.T)


def choose_horizon(instance: ProblemInstance, ric: RiccatiSolution,
                   olqr: Polyhedron, test_states, n_max: int) -> int:
    """Smallest N <= n_max whose MPC terminal states all land in olqr."""
    solver = qp.ActiveSetSolver()
    for N in range(1, n_max + 1):
        mpqp = condense(instance.system, instance.state_set, instance.input_set,
                        ric.Pstar, N)
        ok = True
        for x in test_states:
            sol = solve_mpc(mpqp, x, solver=solver)
            if not olqr.contains(terminal_state(mpqp, sol)):
                ok = False
                break
        if ok:
            return N
    raise ValueError(
        f"no horizon up to {n_max} steers all test states into the LQR invariant "
        "set; increase n_max or shrink the region of interest")
