"""Discrete algebraic Riccati equation: fixed-point solver and defect norm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ConvergenceError
from .model import LtiSystem

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class RiccatiSolution:
    Pstar: np.ndarray
    Kstar: np.ndarray
    residual_norm: float

    def __post_init__(self):
        for name in ("Pstar", "Kstar"):
            a = np.asarray(getattr(self, name), float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def _riccati_step(P: np.ndarray, system: LtiSystem) -> np.ndarray:
    """One application of P -> A'PA - A'PB (R+B'PB)^-1 B'PA + Q."""
    A, B, Q, R = system.A, system.B, system.Q, system.R
    BtPA = B.T @ P @ A
    S = R + B.T @ P @ B
    try:
        c = cho_factor(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("R + B'PB not positive definite") from exc
    P_next = A.T @ P @ A - BtPA.T @ cho_solve(c, BtPA) + Q
    return 0.5 * (P_next + P_next.T)


def dare_residual(P, system: LtiSystem) -> float:
    """Frobenius norm of the Riccati defect at P."""
    P = 0.5 * (np.asarray(P, float) + np.asarray(P, float).T)
    return float(np.linalg.norm(_riccati_step(P, system) - P, ord="fro"))


def gain_from_p(P, system: LtiSystem) -> np.ndarray:
    """LQR gain K = (R + B'PB)^-1 B'PA."""
    B, R, A = system.B, system.R, system.A
    S = R + B.T @ P @ B
    c = cho_factor(0.5 * (S + S.T))
    return cho_solve(c, B.T @ P @ A)


def solve_dare(system: LtiSystem, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> RiccatiSolution:
    """Fixed-point iteration from P0 = Q until ||P_{k+1} - P_k||_F <= tol.

    Non-convergence within max_iter signals an unstabilizable pair and raises
    ConvergenceError naming the last residual.
    """
    P = np.array(system.Q, dtype=float)
    last = np.inf
    for _ in range(max_iter):
        P_next = _riccati_step(P, system)
        if not np.all(np.isfinite(P_next)):
            raise ConvergenceError(
                "Riccati iteration diverged (non-finite iterate); (A, B) likely unstabilizable")
        last = float(np.linalg.norm(P_next - P, ord="fro"))
        P = P_next
        if last <= tol:
            break
    else:
        raise ConvergenceError(
            f"Riccati iteration did not converge in {max_iter} steps, "
            f"last update norm {last:.3e}; (A, B) likely unstabilizable")
    return RiccatiSolution(Pstar=P, Kstar=gain_from_p(P, system),
                           residual_norm=dare_residual(P, system))
