"""Problem instance types: LTI system, polyhedral sets, validation, file I/O.

All objects are immutable after construction (arrays are marked read-only)
and therefore safe to share across workers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError

PD_TOL = 1e-10
SYM_WARN_TOL = 1e-12
CONTAIN_TOL = 1e-9


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time plant x+ = A x + B u with stage cost x'Qx + u'Ru."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A, B = np.atleast_2d(np.asarray(self.A, float)), np.atleast_2d(np.asarray(self.B, float))
        Q, R = np.atleast_2d(np.asarray(self.Q, float)), np.atleast_2d(np.asarray(self.R, float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]
        if Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {Q.shape}")
        if R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {R.shape}")
        for name, M in (("Q", Q), ("R", R)):
            asym = np.max(np.abs(M - M.T)) if M.size else 0.0
            if asym > SYM_WARN_TOL:
                warnings.warn(f"{name} asymmetric by {asym:.3e}; symmetrizing")
        object.__setattr__(self, "A", _ro(A))
        object.__setattr__(self, "B", _ro(B))
        object.__setattr__(self, "Q", _ro(0.5 * (Q + Q.T)))
        object.__setattr__(self, "R", _ro(0.5 * (R + R.T)))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class Polyhedron:
    """Halfspace set {x : Hmat x <= hvec}. Zero rows encode the full space."""

    Hmat: np.ndarray
    hvec: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.Hmat, float))
        h = np.asarray(self.hvec, float).ravel()
        if H.size == 0:
            H = H.reshape(0, H.shape[1] if H.ndim == 2 and H.shape[1] else 0)
        if H.shape[0] != h.size:
            raise ValueError(f"{H.shape[0]} rows but {h.size} offsets")
        object.__setattr__(self, "Hmat", _ro(H))
        object.__setattr__(self, "hvec", _ro(h))

    @classmethod
    def full_space(cls, dim: int) -> "Polyhedron":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def box(cls, radius, dim: int | None = None) -> "Polyhedron":
        """Axis-aligned box |x_i| <= radius_i (scalar radius broadcasts)."""
        r = np.asarray(radius, float).ravel()
        if r.size == 1 and dim is not None:
            r = np.full(dim, r[0])
        d = r.size
        H = np.vstack([np.eye(d), -np.eye(d)])
        return cls(H, np.concatenate([r, r]))

    @property
    def dim(self) -> int:
        return self.Hmat.shape[1]

    @property
    def nrows(self) -> int:
        return self.Hmat.shape[0]

    def contains(self, x, tol: float = CONTAIN_TOL) -> bool:
        if self.nrows == 0:
            return True
        x = np.asarray(x, float).ravel()
        return bool(np.all(self.Hmat @ x - self.hvec <= tol))

    def normalized(self) -> "Polyhedron":
        """Scale each row to unit Euclidean norm (zero rows left alone)."""
        if self.nrows == 0:
            return self
        norms = np.linalg.norm(self.Hmat, axis=1)
        scale = np.where(norms > 0, norms, 1.0)
        return Polyhedron(self.Hmat / scale[:, None], self.hvec / scale)

    def intersect(self, other: "Polyhedron") -> "Polyhedron":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        return Polyhedron(np.vstack([self.Hmat, other.Hmat]),
                          np.concatenate([self.hvec, other.hvec]))

    def has_empty_row_guard_violation(self) -> bool:
        """True when some all-zero row has a negative offset (0 <= h < 0)."""
        if self.nrows == 0:
            return False
        zero = np.all(self.Hmat == 0.0, axis=1)
        return bool(np.any(zero & (self.hvec < 0)))

    def origin_interior(self) -> bool:
        """Strict interiority of the origin: h > 0 after row normalization."""
        if self.has_empty_row_guard_violation():
            return False
        if self.nrows == 0:
            return True
        norms = np.linalg.norm(self.Hmat, axis=1)
        nz = norms > 0
        return bool(np.all(self.hvec[nz] / norms[nz] > 0))


@dataclass(frozen=True)
class ProblemInstance:
    """A constrained LQR instance: plant, constraint sets, region of interest."""

    system: LtiSystem
    state_set: Polyhedron
    input_set: Polyhedron
    region_of_interest: Polyhedron

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        if self.state_set.dim != n:
            raise ValueError("state set dimension mismatch")
        if self.input_set.dim != m:
            raise ValueError("input set dimension mismatch")
        if self.region_of_interest.dim != n:
            raise ValueError("region of interest dimension mismatch")


@dataclass
class ValidationReport:
    ok: bool
    checks: list = field(default_factory=list)  # (name, passed, message)

    def add(self, name: str, passed: bool, message: str = ""):
        self.checks.append((name, bool(passed), message))
        self.ok = self.ok and bool(passed)

    def failures(self):
        return [c for c in self.checks if not c[1]]

    def summary(self) -> str:
        lines = [f"valid: {self.ok}"]
        for name, passed, msg in self.checks:
            lines.append(f"  [{'ok' if passed else 'FAIL'}] {name}" + (f": {msg}" if msg else ""))
        return "\n".join(lines)


def validate(instance: ProblemInstance) -> ValidationReport:
    """Check the verifiable assumptions: Q, R positive definite, sets contain
    the origin strictly, (A, B) stabilizable (via Riccati convergence), and
    the region of interest contained in the state set.
    """
    report = ValidationReport(ok=True)
    sys_ = instance.system

    for name, M in (("Q", sys_.Q), ("R", sys_.R)):
        eigs = np.linalg.eigvalsh(M)
        pd = bool(eigs.min() > PD_TOL)
        report.add(f"{name} positive definite", pd,
                   "" if pd else f"{name} not positive definite, eigenvalues {eigs.tolist()}")

    for name, poly in (("state set", instance.state_set), ("input set", instance.input_set)):
        if poly.has_empty_row_guard_violation():
            report.add(f"{name} non-empty", False, f"empty {name}")
            continue
        report.add(f"{name} non-empty", True)
        report.add(f"{name} contains origin strictly", poly.origin_interior())

    # stabilizability: the Riccati fixed point converges iff (A, B) stabilizable
    if report.ok:
        from . import riccati
        try:
            ric = riccati.solve_dare(sys_)
            report.add("(A, B) stabilizable", True,
                       f"DARE residual {ric.residual_norm:.3e}")
        except Exception as exc:  # noqa: BLE001 - report, don't raise
            report.add("(A, B) stabilizable", False, str(exc))
    else:
        report.add("(A, B) stabilizable", False, "skipped: earlier checks failed")

    # region of interest inside the state set (row-wise LP containment)
    roi, X = instance.region_of_interest, instance.state_set
    if X.nrows == 0:
        report.add("region of interest inside state set", True)
    elif roi.nrows == 0:
        report.add("region of interest inside state set", False,
                   "region of interest unbounded but state set constrained")
    else:
        from . import polytope
        contained = True
        detail = ""
        for i in range(X.nrows):
            val, ok = polytope.support_value(roi, X.Hmat[i])
            if not ok:
                contained, detail = False, f"row {i}: containment LP unbounded"
                break
            if val > X.hvec[i] + CONTAIN_TOL:
                contained, detail = False, f"row {i}: support {val:.6g} exceeds bound {X.hvec[i]:.6g}"
                break
        report.add("region of interest inside state set", contained, detail)

    return report


# ---------------------------------------------------------------------------
# file I/O: JSON with nested arrays; floats round-trip bit exactly
# ---------------------------------------------------------------------------

def _poly_to_obj(p: Polyhedron):
    return {"H": p.Hmat.tolist(), "h": p.hvec.tolist()}


def _poly_from_obj(obj, dim: int) -> Polyhedron:
    if obj is None:
        return Polyhedron.full_space(dim)
    try:
        H = np.array(obj["H"], dtype=float)
        h = np.array(obj["h"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed polyhedron entry: {exc}") from exc
    if H.size == 0:
        return Polyhedron.full_space(dim)
    return Polyhedron(H.reshape(-1, dim), h)


def instance_to_obj(instance: ProblemInstance) -> dict:
    return {
        "A": instance.system.A.tolist(),
        "B": instance.system.B.tolist(),
        "Q": instance.system.Q.tolist(),
        "R": instance.system.R.tolist(),
        "state_set": _poly_to_obj(instance.state_set) if instance.state_set.nrows else None,
        "input_set": _poly_to_obj(instance.input_set),
        "region_of_interest": _poly_to_obj(instance.region_of_interest),
    }


def instance_from_obj(obj: dict) -> ProblemInstance:
    try:
        system = LtiSystem(np.array(obj["A"], float), np.array(obj["B"], float),
                           np.array(obj["Q"], float), np.array(obj["R"], float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed instance: {exc}") from exc
    n, m = system.n, system.m
    return ProblemInstance(
        system=system,
        state_set=_poly_from_obj(obj.get("state_set"), n),
        input_set=_poly_from_obj(obj.get("input_set"), m),
        region_of_interest=_poly_from_obj(obj.get("region_of_interest"), n),
    )


def save_instance(instance: ProblemInstance, path):
    with open(path, "w") as f:
        json.dump(instance_to_obj(instance), f, indent=1)


def load_instance(path) -> ProblemInstance:
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read instance file {path}: {exc}") from exc
    return instance_from_obj(obj)
