"""Polyhedral set operations: admissible sets, invariant sets, redundancy
removal, membership, and 2-D vertex enumeration.

All LP subproblems go through the package QP solver with a tiny quadratic
ridge (one solver codebase).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qp
from .model import Polyhedron

LP_TOL = 1e-9
ROW_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class InvariantSetResult:
    set: Polyhedron
    iterations: int
    converged: bool


def contains(poly: Polyhedron, x, tol: float = LP_TOL) -> bool:
    """Row-wise membership with tolerance."""
    return poly.contains(x, tol=tol)


def support_value(poly: Polyhedron, direction):
    """max direction'x over the set. Returns (value, bounded_flag)."""
    direction = np.asarray(direction, float).ravel()
    res = qp.solve_lp(-direction, poly.Hmat, poly.hvec)
    if res.status == "unbounded":
        return np.inf, False
    if not res.optimal:
        return np.nan, False
    val = float(direction @ res.xstar)
    # a huge regularized optimizer means the true LP is unbounded
    if float(np.linalg.norm(res.xstar)) > 1e10:
        return val, False
    return val, True


def admissible_set(state_set: Polyhedron, input_set: Polyhedron, K) -> Polyhedron:
    """States satisfying x in X and -K x in U, as stacked halfspaces."""
    K = np.atleast_2d(np.asarray(K, float))
    if input_set.dim != K.shape[0] or (state_set.nrows and state_set.dim != K.shape[1]):
        raise ValueError("dimension mismatch")
    rows = [state_set.Hmat] if state_set.nrows else []
    offs = [state_set.hvec] if state_set.nrows else []
    if input_set.nrows:
        rows.append(input_set.Hmat @ (-K))
        offs.append(input_set.hvec)
    if not rows:
        return Polyhedron.full_space(K.shape[1])
    return Polyhedron(np.vstack(rows), np.concatenate(offs))


def remove_redundant(poly: Polyhedron, tol: float = LP_TOL) -> Polyhedron:
    """Drop rows implied by the others (LP test per row).

    A row whose relaxed LP is unbounded is kept conservatively.
    """
    H, h = poly.Hmat, poly.hvec
    c = H.shape[0]
    if c <= 1:
        return poly
    keep = np.ones(c, dtype=bool)
    for i in range(c):
        mask = keep.copy()
        mask[i] = False
        if not mask.any():
            break
        val, bounded = support_value(Polyhedron(H[mask], h[mask]), H[i])
        if bounded and val <= h[i] + tol:
            keep[i] = False
    return Polyhedron(H[keep], h[keep])


def _row_sets_equal(a: Polyhedron, b: Polyhedron, tol: float = ROW_MATCH_TOL) -> bool:
    """Normalized-row matching between two halfspace lists."""
    an, bn = a.normalized(), b.normalized()
    if an.nrows != bn.nrows:
        return False
    rows_a = np.hstack([an.Hmat, an.hvec[:, None]])
    rows_b = np.hstack([bn.Hmat, bn.hvec[:, None]])
    used = np.zeros(len(rows_b), dtype=bool)
    for ra in rows_a:
        d = np.max(np.abs(rows_b - ra), axis=1)
        d[used] = np.inf
        j = int(np.argmin(d))
        if d[j] > tol:
            return False
        used[j] = True
    return True


def max_positively_invariant(Acl, seed: Polyhedron, max_iter: int = 200) -> InvariantSetResult:
    """Maximal positively invariant subset of `seed` for x+ = Acl x.

    Iterates Omega_{k+1} = Omega_k intersect {x : Acl x in Omega_k} with
    LP-based redundancy removal until the row sets stabilize.
    """
    Acl = np.atleast_2d(np.asarray(Acl, float))
    if float(np.max(np.abs(np.linalg.eigvals(Acl)))) >= 1.0:
        raise ValueError("closed-loop matrix must be strictly stable")
    omega = remove_redundant(seed)
    for it in range(1, max_iter + 1):
        pre = Polyhedron(omega.Hmat @ Acl, omega.hvec)
        nxt = remove_redundant(omega.intersect(pre))
        if _row_sets_equal(nxt, omega):
            return InvariantSetResult(set=nxt, iterations=it, converged=True)
        omega = nxt
    return InvariantSetResult(set=omega, iterations=max_iter, converged=False)


def bounding_box(poly: Polyhedron):
    """Per-axis (lo, hi) via support LPs. Raises on unbounded axes."""
    d = poly.dim
    lo, hi = np.empty(d), np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        up, bu = support_value(poly, e)
        dn, bd = support_value(poly, -e)
        if not (bu and bd):
            raise ValueError(f"set unbounded along axis {i}")
        lo[i], hi[i] = -dn, up
    return lo, hi


def vertices_2d(poly: Polyhedron):
    """Vertices of a bounded 2-D polyhedron in counterclockwise order."""
    if poly.dim != 2:
        raise ValueError("vertex enumeration implemented for dimension 2 only")
    bounding_box(poly)  # raises when unbounded
    H, h = poly.Hmat, poly.hvec
    c = H.shape[0]
    pts = []
    for i in range(c):
        for j in range(i + 1, c):
            M = np.vstack([H[i], H[j]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            v = np.linalg.solve(M, np.array([h[i], h[j]]))
            if poly.contains(v, tol=1e-7 * max(1.0, float(np.abs(v).max()))):
                pts.append(v)
    if not pts:
        raise ValueError("no vertices found (empty or degenerate set)")
    pts = np.array(pts)
    # deduplicate
    uniq = []
    for p in pts:
        if not any(np.linalg.norm(p - u) <= 1e-8 * max(1.0, np.linalg.norm(p)) for u in uniq):
            uniq.append(p)
    center = np.mean(uniq, axis=0)
    uniq.sort(key=lambda p: np.arctan2(p[1] - center[1], p[0] - center[0]))
    return [np.array(p) for p in uniq]
