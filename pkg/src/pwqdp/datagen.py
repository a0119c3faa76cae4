"""Training-data generation from MPC solutions.

One MPC solve per initial state yields a whole trajectory of exact
infinite-horizon values through the cost-to-go telescoping identity

    J(x_k) = J_N(x_0) - sum_{j<k} (x_j'Q x_j + u_j'R u_j),

so N samples cost one solve. Gradients (and active sets, needed by the
certifier) come from one extra solve per visited state when requested.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mpc, qp
from .exceptions import DataConsistencyError, InfeasibleError, SolverError
from .model import Polyhedron

TELESCOPE_TOL = 1e-8
AUDIT_REL_TOL = 1e-6
ZERO_STATE_TOL = 1e-12


@dataclass
class TrainingSet:
    """Columnar sample storage: states, exact values, optional gradients,
    a source tag per sample, and an interned active-set id per sample
    (-1 when unknown). `active_sets` is the id -> index-tuple registry.
    """

    states: np.ndarray
    values: np.ndarray
    gradients: np.ndarray  # NaN rows where absent
    source: list
    active_set_id: np.ndarray
    active_sets: list = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]

    def active_set_of(self, i: int):
        sid = int(self.active_set_id[i])
        return None if sid < 0 else self.active_sets[sid]

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx)
        return TrainingSet(states=self.states[idx], values=self.values[idx],
                           gradients=self.gradients[idx],
                           source=[self.source[i] for i in idx],
                           active_set_id=self.active_set_id[idx],
                           active_sets=list(self.active_sets))

    # ------------------------------------------------------------------
    def save(self, path):
        n = self.n
        with open(path, "w") as f:
            f.write(f"# columns: x[0..{n}) value grad[0..{n}) source active_set_id\n")
            for sid, rows in enumerate(self.active_sets):
                f.write(f"# active_set {sid} : {' '.join(str(r) for r in rows)}\n")
            for i in range(len(self)):
                cols = [f"{v:.17g}" for v in self.states[i]]
                cols.append(f"{self.values[i]:.17g}")
                cols.extend(f"{g:.17g}" for g in self.gradients[i])
                cols.append(self.source[i])
                cols.append(str(int(self.active_set_id[i])))
                f.write(" ".join(cols) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingSet":
        active_sets, rows = [], []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if parts[:1] == ["active_set"]:
                        active_sets.append(tuple(int(t) for t in parts[3:]))
                    continue
                rows.append(line.split())
        if not rows:
            raise ValueError(f"no samples in {path}")
        n = (len(rows[0]) - 3) // 2
        states = np.array([[float(t) for t in r[:n]] for r in rows])
        values = np.array([float(r[n]) for r in rows])
        grads = np.array([[float(t) for t in r[n + 1: 2 * n + 1]] for r in rows])
        source = [r[2 * n + 1] for r in rows]
        sids = np.array([int(r[2 * n + 2]) for r in rows])
        return cls(states=states, values=values, gradients=grads, source=source,
                   active_set_id=sids, active_sets=active_sets)


class _Builder:
    def __init__(self, n):
        self.n = n
        self.states, self.values, self.grads = [], [], []
        self.source, self.sids = [], []
        self.registry: dict = {}

    def intern(self, active_set):
        if active_set is None:
            return -1
        key = tuple(sorted(int(i) for i in active_set))
        if key not in self.registry:
            self.registry[key] = len(self.registry)
        return self.registry[key]

    def add(self, x, value, grad, tag, active_set):
        self.states.append(np.asarray(x, float).ravel())
        self.values.append(float(value))
        self.grads.append(np.full(self.n, np.nan) if grad is None
                          else np.asarray(grad, float).ravel())
        self.source.append(tag)
        self.sids.append(self.intern(active_set))

    def build(self) -> TrainingSet:
        sets = [None] * len(self.registry)
        for key, sid in self.registry.items():
            sets[sid] = key
        return TrainingSet(states=np.array(self.states).reshape(-1, self.n),
                           values=np.array(self.values),
                           gradients=np.array(self.grads).reshape(-1, self.n),
                           source=self.source,
                           active_set_id=np.array(self.sids, dtype=int),
                           active_sets=sets)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _mpc_feasible(mpqp, x, solver) -> bool:
    try:
        mpc.solve_mpc(mpqp, x, solver=solver)
        return True
    except (InfeasibleError, SolverError):
        return False


def sample_boundary_states(X0: Polyhedron, count: int, seed: int,
                           mpqp: mpc.MpqpData | None = None,
                           pullback: float = 0.99):
    """Seeded near-boundary samples of X0: uniform directions ray-shot to the
    boundary and pulled inward, optionally filtered for MPC feasibility.
    """
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    solver = qp.ActiveSetSolver()
    H, h = X0.Hmat, X0.hvec
    if H.shape[0] == 0:
        raise ValueError("cannot boundary-sample an unbounded set")
    out = []
    attempts = 0
    max_attempts = 100 * count
    while len(out) < count and attempts < max_attempts:
        attempts += 1
        d = rng.normal(size=X0.dim)
        nrm = np.linalg.norm(d)
        if nrm < 1e-12:
            continue
        d /= nrm
        denom = H @ d
        pos = denom > 1e-12
        if not pos.any():
            continue  # unbounded ray
        t = float(np.min(h[pos] / denom[pos]))
        if not np.isfinite(t) or t <= 0:
            continue
        x = pullback * t * d
        if mpqp is not None and not _mpc_feasible(mpqp, x, solver):
            continue
        out.append(x)
    if len(out) < count:
        raise InfeasibleError(
            f"only {len(out)}/{count} feasible boundary samples after "
            f"{max_attempts} draws (feasibility ratio {len(out) / attempts:.3f})")
    return out


def sample_feasible_uniform(domain: Polyhedron, count: int, seed: int,
                            mpqp: mpc.MpqpData | None = None):
    """Uniform rejection samples from the domain's bounding box, kept when
    inside the domain (and MPC-feasible when mpqp is given)."""
    from . import polytope
    rng = np.random.default_rng(seed)
    solver = qp.ActiveSetSolver()
    lo, hi = polytope.bounding_box(domain)
    out = []
    attempts, max_attempts = 0, max(1000, 1000 * count)
    while len(out) < count and attempts < max_attempts:
        attempts += 1
        x = rng.uniform(lo, hi)
        if not domain.contains(x):
            continue
        if mpqp is not None and not _mpc_feasible(mpqp, x, solver):
            continue
        out.append(x)
    if len(out) < count:
        raise InfeasibleError(
            f"only {len(out)}/{count} feasible uniform samples after {max_attempts} draws")
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _solve_gradient_sample(mpqp, x, warm, solver):
    """Re-solve at a visited state; returns (solution, gradient_or_None)."""
    sol = mpc.solve_mpc(mpqp, x, warm=warm, solver=solver)
    if sol.degenerate:
        return sol, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = mpc.value_gradient(mpqp, sol)
    return sol, g


def generate_from_trajectories(mpqp: mpc.MpqpData, initial_states,
                               with_gradients: bool = False,
                               audit_fraction: float = 0.05,
                               seed: int = 0) -> TrainingSet:
    """Roll each solved input sequence forward and record the visited states
    with their exact cost-to-go values (telescoping identity).

    With gradients enabled, every visited state is re-solved to collect
    multipliers/active sets; degenerate states keep value but no gradient.
    A seeded fraction of trajectory states is audited by comparing the
    telescoped value against the direct re-solve.
    """
    A, B = mpqp.system.A, mpqp.system.B
    Q, R = mpqp.system.Q, mpqp.system.R
    solver = qp.ActiveSetSolver()
    rng = np.random.default_rng(seed)
    builder = _Builder(mpqp.n)

    for x0 in initial_states:
        x0 = np.asarray(x0, float).ravel()
        try:
            sol = mpc.solve_mpc(mpqp, x0, solver=solver)
        except (InfeasibleError, SolverError) as exc:
            warnings.warn(f"skipping infeasible initial state {x0.tolist()}: {exc}")
            continue
        U = sol.Ustar
        x = x0
        value = sol.value
        grad0 = None
        if with_gradients and not sol.degenerate:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grad0 = mpc.value_gradient(mpqp, sol)
        builder.add(x, value, grad0, "initial", sol.active_set if with_gradients else None)
        if float(np.max(np.abs(x))) <= ZERO_STATE_TOL:
            continue  # the zero trajectory contributes a single pair

        warm = mpc.shifted_warm(mpqp, sol)
        for k in range(1, mpqp.N):
            u = U[mpqp.input_index(k - 1)]
            value = value - float(x @ Q @ x + u @ R @ u)
            x = A @ x + B @ u
            if value < -1e-9:
                raise DataConsistencyError(
                    f"telescoped value {value:.3e} negative at stage {k}")
            grad, active = None, None
            audit = rng.random() < audit_fraction
            if with_gradients or audit:
                resolved, grad = _solve_gradient_sample(mpqp, x, warm, solver)
                active = resolved.active_set
                warm = mpc.shifted_warm(mpqp, resolved)
                if audit:
                    # relative check with an absolute floor: values below 1e-6
                    # are dominated by roundoff of the telescoping subtraction
                    ref = max(abs(resolved.value), 1e-6)
                    if abs(resolved.value - value) / ref > AUDIT_REL_TOL:
                        raise DataConsistencyError(
                            f"telescoped value {value:.12g} disagrees with re-solve "
                            f"{resolved.value:.12g} at state {x.tolist()}")
                if not with_gradients:
                    grad = None
            builder.add(x, value, grad, "trajectory", active if with_gradients else None)
            if float(np.max(np.abs(x))) <= ZERO_STATE_TOL:
                break

    return builder.build()


def generate_grid(mpqp: mpc.MpqpData, X0: Polyhedron, spacing: float,
                  clip_set: Polyhedron | None = None,
                  terminal_set: Polyhedron | None = None,
                  with_gradients: bool = False) -> TrainingSet:
    """Axis-aligned grid over X0's bounding box; keeps points inside
    X0 (and clip_set) that are MPC-feasible, one solve per point.

    When terminal_set is given, points whose MPC terminal state falls outside
    it are dropped (horizon-equivalence filter used as a stabilizable-set
    stand-in).
    """
    from . import polytope
    if X0.dim > 3:
        raise ValueError("grid generation limited to dimension <= 3")
    lo, hi = polytope.bounding_box(X0)
    axes = [np.arange(lo[i], hi[i] + 0.5 * spacing, spacing) for i in range(X0.dim)]
    total = int(np.prod([len(a) for a in axes]))
    if total > 10 ** 6:
        raise ValueError(f"grid would have {total} candidate points (> 1e6)")
    mesh = np.meshgrid(*axes, indexing="ij")
    candidates = np.stack([m.ravel() for m in mesh], axis=1)

    solver = qp.ActiveSetSolver()
    builder = _Builder(mpqp.n)
    warm = None
    for x in candidates:
        if not X0.contains(x):
            continue
        if clip_set is not None and not clip_set.contains(x):
            continue
        try:
            sol = mpc.solve_mpc(mpqp, x, warm=warm, solver=solver)
        except (InfeasibleError, SolverError):
            continue
        warm = sol
        if terminal_set is not None and not terminal_set.contains(
                mpc.terminal_state(mpqp, sol)):
            continue
        grad = None
        if with_gradients and not sol.degenerate:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grad = mpc.value_gradient(mpqp, sol)
        builder.add(x, sol.value, grad, "grid", sol.active_set if with_gradients else None)
    return builder.build()
