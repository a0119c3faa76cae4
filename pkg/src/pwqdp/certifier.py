"""Offline stability certification.

Computes empirical approximation errors (e_bar, e_grad_bar), the certified
relative error bound zeta over the sampled domain, and checks the descent
condition

    (1 - zeta^2) / zeta  >  2 sup Jhat(x) / (x'Qx)

either over the region of interest (theorem9 mode) or over the invariant
sublevel set Omega = {Jhat <= chi} with chi the boundary infimum of Jhat
(corollary10 mode).

Region identity is the pair (MPC active set, network activation pattern),
enumerated from samples and refinement probes rather than by geometric
intersection. Probe classification requires one MPC solve per probe; probes
landing in regions without a usable training point are promoted to testing
points (the sample-driven remedy for the coverage assumption), and the
promotion count is reported. The per-region covering radius d and the
sampled/ascended right-hand side are estimates, so the report states that
the certificate is empirically verified rather than formally proven.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.spatial import cKDTree

from . import mpc, polytope, qp
from .exceptions import DegeneracyError, InfeasibleError, SolverError, SparseSamplingError
from .model import Polyhedron
from .pwq_net import PwqNetwork

J_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# empirical errors
# ---------------------------------------------------------------------------

@dataclass
class ErrorStats:
    e_bar: float
    e_grad_bar: float
    abs_e: np.ndarray
    e_grad: np.ndarray  # NaN where gradient missing
    beta: np.ndarray  # NaN where gradient missing
    jstar: np.ndarray
    patterns: list
    used: np.ndarray  # mask of samples with jstar above the floor
    n_missing_grad: int


def empirical_errors(net: PwqNetwork, data) -> ErrorStats:
    """Per-sample relative value error, gradient error measure, and the
    gradient-to-value ratio beta. Samples with J* <= 1e-10 are excluded
    from the maxima (the origin region is exact by construction).
    """
    X = np.atleast_2d(np.asarray(data.states, float))
    jstar = np.asarray(data.values, float).ravel()
    jhat = net.evaluate_batch(X)
    used = jstar > J_FLOOR
    if not used.any():
        raise ValueError("all samples have J* <= 1e-10; cannot certify")
    abs_e = np.full(len(jstar), np.nan)
    abs_e[used] = np.abs(jhat[used] / jstar[used] - 1.0)

    grads = np.atleast_2d(np.asarray(data.gradients, float))
    have_grad = ~np.isnan(grads).any(axis=1)
    ghat = net.gradient_batch(X)
    e_grad = np.full(len(jstar), np.nan)
    beta = np.full(len(jstar), np.nan)
    sel = used & have_grad
    if sel.any():
        gerr = np.linalg.norm(ghat[sel] - grads[sel], axis=1)
        e_grad[sel] = gerr / jstar[sel]
        beta[sel] = np.linalg.norm(grads[sel], axis=1) / jstar[sel]

    patterns = [net.activation_pattern(x) for x in X]
    e_bar = float(np.nanmax(abs_e[used]))
    e_grad_bar = float(np.nanmax(e_grad[sel])) if sel.any() else 0.0
    return ErrorStats(e_bar=e_bar, e_grad_bar=e_grad_bar, abs_e=abs_e, e_grad=e_grad,
                      beta=beta, jstar=jstar, patterns=patterns, used=used,
                      n_missing_grad=int(np.sum(used & ~have_grad)))


# ---------------------------------------------------------------------------
# zeta bound with probe-based covering radii
# ---------------------------------------------------------------------------

@dataclass
class RegionEntry:
    active_set: tuple
    pattern: tuple
    n_samples: int = 0
    n_anchors: int = 0
    d: float = 0.0
    lips_value: float = 0.0  # lambda_max of the MPC region quadratic
    lips_net: float = 0.0  # lambda_max of the network region quadratic
    zeta: float = 0.0
    augmented: bool = False


@dataclass
class ZetaResult:
    zeta: float
    e_bar: float
    e_grad_bar: float
    regions: dict = field(default_factory=dict)
    coverage_ok: bool = True
    uncovered: list = field(default_factory=list)
    n_augmented: int = 0
    n_probes: int = 0
    probe_spacing: float = 0.0
    notes: list = field(default_factory=list)


def _median_nn_distance(X) -> float:
    tree = cKDTree(X)
    d, _ = tree.query(X, k=2)
    return float(np.median(d[:, 1]))


def _probe_points(X, domain: Polyhedron | None, probe_factor: int, seed: int):
    """Refinement probes: a grid (dim <= 3) at 1/probe_factor of the data's
    nearest-neighbour spacing, or seeded uniform draws in higher dimension.
    """
    X = np.atleast_2d(X)
    n = X.shape[1]
    base = _median_nn_distance(X)
    spacing = max(base / probe_factor, 1e-6)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    if n <= 3:
        axes = [np.arange(lo[i], hi[i] + 0.5 * spacing, spacing) for i in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        rng = np.random.default_rng(seed)
        pts = rng.uniform(lo, hi, size=(min(20000, probe_factor ** n * len(X)), n))
    if domain is not None and domain.nrows:
        keep = np.all(pts @ domain.Hmat.T - domain.hvec <= 1e-9, axis=1)
        pts = pts[keep]
    return pts, spacing


def zeta_bound(net: PwqNetwork, data, mpqp: mpc.MpqpData, probe_factor: int = 4,
               domain: Polyhedron | None = None, equivalence_set: Polyhedron | None = None,
               augment: bool = True, d_target: float | None = None,
               max_testing_points: int = 20000, seed: int = 0) -> ZetaResult:
    """Certified relative-error bound over the sampled domain.

    For each anchor point y (training or testing; gradient available, J*
    above the floor) in region (i, j) with covering radius d:

        zeta_y = (e_bar + e_grad_bar d + (Lhat_j + L_i) d^2 / (2 J*(y)))
                 / (1 - beta(y) d)

    and zeta = max(e_bar, max_y zeta_y). The all-inactive origin region is
    exact and excluded, as are probes on region boundaries (degenerate
    active sets). With augment=True, probes are promoted to testing points
    (farthest-first) until every probed region is covered with radius at
    most d_target (default: the samples' own median spacing); e_bar and
    e_grad_bar are enlarged accordingly and the promotion count reported.
    beta(y) d >= 1 anywhere raises SparseSamplingError.
    """
    stats = empirical_errors(net, data)
    X = np.atleast_2d(np.asarray(data.states, float))
    if d_target is None:
        d_target = _median_nn_distance(X)

    # region tables from samples
    regions: dict = {}
    anchors: dict = {}  # region -> list of (point, beta, jstar)
    for i in range(len(data)):
        act = data.active_set_of(i)
        if act is None:
            continue
        key = (tuple(act), stats.patterns[i])
        entry = regions.setdefault(key, RegionEntry(active_set=key[0], pattern=key[1]))
        entry.n_samples += 1
        if stats.used[i] and np.isfinite(stats.beta[i]):
            anchors.setdefault(key, []).append((X[i], stats.beta[i], stats.jstar[i]))
            entry.n_anchors += 1

    # classify probes with one MPC solve each (warm-chained); boundary
    # (degenerate) and origin-region probes carry no usable region identity
    probes, spacing = _probe_points(X, domain, probe_factor, seed)
    solver = qp.ActiveSetSolver()
    warm = None
    origin_key = ((), ())
    by_region: dict = {}  # key -> [ (point, jstar, grad) ]
    n_probes = 0
    for p in probes:
        try:
            sol = mpc.solve_mpc(mpqp, p, warm=warm, solver=solver)
        except (InfeasibleError, SolverError):
            continue
        warm = sol
        if equivalence_set is not None and not equivalence_set.contains(
                mpc.terminal_state(mpqp, sol)):
            continue
        if sol.degenerate or sol.value <= J_FLOOR:
            continue
        key = (tuple(sol.active_set), net.activation_pattern(p))
        n_probes += 1
        if key == origin_key:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            grad = mpc.value_gradient(mpqp, sol)
        by_region.setdefault(key, []).append((p, sol.value, grad))

    result = ZetaResult(zeta=stats.e_bar, e_bar=stats.e_bar,
                        e_grad_bar=stats.e_grad_bar, regions=regions,
                        n_probes=n_probes, probe_spacing=spacing)
    result.notes.append(
        f"d per region estimated from refinement probes (target {d_target:.6g})")

    # farthest-first promotion of probes to testing points until each probed
    # region is covered within d_target
    extra: list = []  # (point, jstar, grad, key)
    dmax: dict = {}
    uncovered = set()
    for key, items in by_region.items():
        pts = np.array([it[0] for it in items])
        anchor_pts = np.array([a[0] for a in anchors.get(key, [])])
        if anchor_pts.size:
            dist = cKDTree(anchor_pts).query(pts)[0]
        else:
            dist = np.full(len(pts), np.inf)
        entry = regions.setdefault(key, RegionEntry(active_set=key[0], pattern=key[1]))
        while float(dist.max()) > d_target and augment and len(extra) < max_testing_points:
            j = int(np.argmax(dist))
            p, jst, grad = items[j]
            extra.append((p, jst, grad, key))
            entry.augmented = True
            entry.n_samples += 1
            entry.n_anchors += 1
            anchors.setdefault(key, []).append(
                (p, float(np.linalg.norm(grad)) / jst, jst))
            dist = np.minimum(dist, np.linalg.norm(pts - p, axis=1))
        if not np.isfinite(dist.max()):
            uncovered.add(key)
            dmax[key] = np.inf
        else:
            dmax[key] = float(dist.max())

    result.n_augmented = len(extra)
    if extra:
        e_bar = max(stats.e_bar,
                    max(abs(net.evaluate(p) / jst - 1.0) for p, jst, _g, _k in extra))
        e_grad_bar = max(stats.e_grad_bar,
                         max(float(np.linalg.norm(net.gradient_x(p) - g)) / jst
                             for p, jst, g, _k in extra))
        result.notes.append(f"{len(extra)} testing points added for coverage")
    else:
        e_bar, e_grad_bar = stats.e_bar, stats.e_grad_bar
    result.e_bar, result.e_grad_bar = e_bar, e_grad_bar
    result.zeta = e_bar

    result.uncovered = sorted(uncovered)
    result.coverage_ok = not uncovered
    if uncovered:
        result.notes.append(f"{len(uncovered)} region(s) without usable training point; "
                            "bound not certifying")

    # Lipschitz constants and the per-anchor bound
    lips_net_cache: dict = {}
    for key, entry in regions.items():
        if key == origin_key:
            continue
        d = dmax.get(key, 0.0)
        entry.d = d
        if not np.isfinite(d):
            continue
        if key[1] not in lips_net_cache:
            reg = net.region_coefficients(key[1])
            lips_net_cache[key[1]] = float(np.linalg.eigvalsh(reg.Phat).max())
        entry.lips_net = lips_net_cache[key[1]]
        try:
            P_i = mpc.region_hessian(mpqp, key[0])
            entry.lips_value = float(np.linalg.eigvalsh(P_i).max())
        except DegeneracyError:
            entry.lips_value = np.nan
            result.notes.append(f"degenerate active set {key[0]}: region skipped")
            continue

        for _pt, beta, jst in anchors.get(key, []):
            denom = 1.0 - beta * d
            if denom <= 0:
                raise SparseSamplingError(
                    f"beta*d = {beta * d:.3g} >= 1 in region {key}; samples too sparse")
            z = (e_bar + e_grad_bar * d
                 + (entry.lips_net + entry.lips_value) * d * d / (2.0 * jst)) / denom
            entry.zeta = max(entry.zeta, z)
        result.zeta = max(result.zeta, entry.zeta)
    return result


# ---------------------------------------------------------------------------
# stability condition pieces
# ---------------------------------------------------------------------------

def _ratio(net: PwqNetwork, Q, x):
    x = np.asarray(x, float)
    den = float(x @ Q @ x)
    return 2.0 * net.evaluate(x) / den if den > 0 else -np.inf


def _ratio_ascent(net, Q, x0, inside, steps: int = 150):
    """Projected/backtracking gradient ascent on 2 Jhat / x'Qx.

    `inside` maps a tentative point to a feasible one (or None to reject).
    """
    x = np.asarray(x0, float).copy()
    best = _ratio(net, Q, x)
    eta = 0.1 * float(np.linalg.norm(x)) + 1e-6
    for _ in range(steps):
        den = float(x @ Q @ x)
        if den <= 0:
            break
        g = (2.0 * net.gradient_x(x) * den - 2.0 * net.evaluate(x) * 2.0 * (Q @ x)) / den ** 2
        gn = float(np.linalg.norm(g))
        if gn < 1e-14:
            break
        improved = False
        for _bt in range(20):
            cand = inside(x + eta * g / gn)
            if cand is not None:
                r = _ratio(net, Q, cand)
                if r > best + 1e-14:
                    x, best, improved = cand, r, True
                    eta *= 1.5
                    break
            eta *= 0.5
        if not improved:
            break
    return best, x


def _radial_clip_to_level(net, x, chi):
    """Scale x toward the origin until Jhat(x) <= chi (Jhat is radially
    nondecreasing since it is convex, nonnegative, and zero at the origin)."""
    if net.evaluate(x) <= chi:
        return x
    lo_s, hi_s = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo_s + hi_s)
        if net.evaluate(mid * x) <= chi:
            lo_s = mid
        else:
            hi_s = mid
    return lo_s * x


def condition_rhs(net: PwqNetwork, Q, domain: str, *, x0_set: Polyhedron | None = None,
                  chi: float | None = None, eps_j: float = 1e-8, eps_x: float = 1e-6,
                  grid_side: int = 13, n_starts: int = 20, n_boundary: int = 400,
                  seed: int = 0) -> float:
    """Empirical maximum of 2 Jhat(x) / (x'Qx) over the requested domain.

    domain 'omega' maximizes subject to eps_j <= Jhat(x) <= chi; domain 'x0'
    maximizes over the polytope minus a small origin ball. Multi-start local
    ascent from a deterministic grid plus dense boundary samples; the result
    is a sampled lower bound on the true supremum.
    """
    Q = np.asarray(Q, float)
    n = net.n
    rng = np.random.default_rng(seed)

    if domain == "omega":
        if chi is None:
            raise ValueError("omega mode requires chi")

        def inside(x):
            if float(np.linalg.norm(x)) < eps_x:
                return None
            x = _radial_clip_to_level(net, x, chi)
            return x if net.evaluate(x) >= 0.0 else None

        # bounding radius of Omega along rays
        dirs = rng.normal(size=(max(n_boundary, 8), n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = 0.0
        boundary = []
        for dvec in dirs:
            t = 1.0
            while net.evaluate(t * dvec) < chi and t < 1e6:
                t *= 2.0
            lo_t, hi_t = 0.0, t
            for _ in range(60):
                mid = 0.5 * (lo_t + hi_t)
                if net.evaluate(mid * dvec) < chi:
                    lo_t = mid
                else:
                    hi_t = mid
            boundary.append(lo_t * dvec)
            radius = max(radius, lo_t)
        lo = -radius * np.ones(n)
        hi = radius * np.ones(n)
        candidates = boundary
    elif domain == "x0":
        if x0_set is None:
            raise ValueError("x0 mode requires the region polytope")
        lo, hi = polytope.bounding_box(x0_set)
        solver = qp.ActiveSetSolver()

        def inside(x):
            if not x0_set.contains(x):
                res = solver.solve(qp.QpProblem(2.0 * np.eye(n), -2.0 * np.asarray(x, float),
                                                x0_set.Hmat, x0_set.hvec))
                if not res.optimal:
                    return None
                x = res.xstar
            return x if float(np.linalg.norm(x)) >= eps_x else None

        # facet boundary samples by ray shooting from the origin
        dirs = rng.normal(size=(max(n_boundary, 8), n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        candidates = []
        H, hvec = x0_set.Hmat, x0_set.hvec
        for dvec in dirs:
            denom = H @ dvec
            pos = denom > 1e-12
            if not pos.any():
                continue
            t = float(np.min(hvec[pos] / denom[pos]))
            if np.isfinite(t) and t > 0:
                candidates.append(0.999 * t * dvec)
    else:
        raise ValueError(f"unknown domain {domain!r}")

    # deterministic grid of starts plus a small near-origin sphere
    axes = [np.linspace(lo[i], hi[i], grid_side) for i in range(n)] if n <= 3 else None
    if axes is not None:
        mesh = np.meshgrid(*axes, indexing="ij")
        grid_pts = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        grid_pts = rng.uniform(lo, hi, size=(grid_side ** 3, n))
    ring = rng.normal(size=(64, n))
    ring = 10 * eps_x * ring / np.linalg.norm(ring, axis=1, keepdims=True)
    cand_all = [c for c in grid_pts] + list(candidates) + [r for r in ring]

    scored = []
    for c in cand_all:
        c2 = inside(np.asarray(c, float))
        if c2 is None:
            continue
        scored.append((_ratio(net, Q, c2), c2))
    if not scored:
        raise ValueError("no feasible candidate point in the requested domain")
    scored.sort(key=lambda t: -t[0])
    best = scored[0][0]
    for _, x0 in scored[:n_starts]:
        val, _ = _ratio_ascent(net, Q, x0, inside)
        best = max(best, val)
    return float(best)


def sublevel_threshold(net: PwqNetwork, X0: Polyhedron, boundary_samples: int = 2000,
                       seed: int = 0, polish_steps: int = 100) -> float:
    """chi = min of Jhat over the boundary of X0 (facet-wise sampling plus
    projected-gradient polish along each facet)."""
    X0r = polytope.remove_redundant(X0)
    H, h = X0r.Hmat, X0r.hvec
    if H.shape[0] == 0:
        raise ValueError("cannot take the boundary of an unconstrained set")
    lo, hi = polytope.bounding_box(X0r)
    span = float(np.linalg.norm(hi - lo))
    rng = np.random.default_rng(seed)
    quota = max(boundary_samples // H.shape[0], 20)

    chi = np.inf
    for i in range(H.shape[0]):
        hi_n = np.linalg.norm(H[i])
        if hi_n == 0:
            continue
        x_f = H[i] * (h[i] / hi_n ** 2)
        V = null_space(H[i][None, :])
        pts = [x_f]
        for _ in range(quota):
            t = rng.uniform(-span, span, V.shape[1])
            x = x_f + V @ t
            if X0r.contains(x, tol=1e-9):
                pts.append(x)
        vals = [net.evaluate(p) for p in pts]
        j = int(np.argmin(vals))
        best_x, best_v = np.asarray(pts[j], float), float(vals[j])
        # polish along the facet plane
        eta = 0.1 * span
        x = best_x.copy()
        for _ in range(polish_steps):
            g = net.gradient_x(x)
            step = V @ (V.T @ g)
            gn = float(np.linalg.norm(step))
            if gn < 1e-14:
                break
            moved = False
            for _bt in range(20):
                cand = x - eta * step / gn
                if X0r.contains(cand, tol=1e-9) and net.evaluate(cand) < best_v - 1e-15:
                    x = cand
                    best_v = net.evaluate(cand)
                    eta *= 1.5
                    moved = True
                    break
                eta *= 0.5
            if not moved:
                break
        chi = min(chi, best_v)
    return float(chi)


# ---------------------------------------------------------------------------
# assembled certificate
# ---------------------------------------------------------------------------

@dataclass
class CertificationReport:
    mode: str
    zeta: float
    e_bar: float
    e_grad_bar: float
    condition_lhs: float
    condition_rhs: float
    passed: bool
    coverage_ok: bool
    chi: float | None
    n_augmented: int
    n_probes: int
    region_table: dict
    notes: list

    def to_text(self) -> str:
        lines = [
            "certification report",
            f"  mode: {self.mode}",
            f"  e_bar: {self.e_bar:.17g}",
            f"  e_grad_bar: {self.e_grad_bar:.17g}",
            f"  zeta: {self.zeta:.17g}",
            f"  condition_lhs (1-zeta^2)/zeta: {self.condition_lhs:.17g}",
            f"  condition_rhs 2*sup Jhat/x'Qx: {self.condition_rhs:.17g}",
            f"  chi: {'' if self.chi is None else format(self.chi, '.17g')}",
            f"  coverage_ok: {self.coverage_ok}",
            f"  testing points added: {self.n_augmented}",
            f"  probes classified: {self.n_probes}",
            f"  verdict: {'PASS' if self.passed else 'FAIL'}"
            + ("" if self.coverage_ok else " (coverage incomplete: not certifying)"),
            "  method: empirically verified (sampled d and RHS), not formally proven",
            "  regions (active set | pattern | samples | anchors | d | L | Lhat | zeta):",
        ]
        for key, e in sorted(self.region_table.items(), key=lambda kv: -kv[1].zeta):
            lines.append(
                f"    {list(e.active_set)} | {list(e.pattern)} | {e.n_samples} | "
                f"{e.n_anchors} | {e.d:.6g} | {e.lips_value:.6g} | {e.lips_net:.6g} | "
                f"{e.zeta:.6g}" + (" (augmented)" if e.augmented else ""))
        for note in self.notes:
            lines.append(f"  note: {note}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


def certify(net: PwqNetwork, data, instance, mode: str,
            mpqp: mpc.MpqpData | None = None, *, domain: Polyhedron | None = None,
            equivalence_set: Polyhedron | None = None, probe_factor: int = 4,
            augment: bool = True, d_target: float | None = None,
            boundary_samples: int = 2000, seed: int = 0) -> CertificationReport:
    """Assemble the full certificate in 'theorem9' or 'corollary10' mode.

    `domain` (default: the instance's region of interest) is the polytope the
    bound is claimed on; `equivalence_set` optionally filters probes to
    points whose MPC terminal state lands in the LQR invariant set.
    """
    if mode not in ("theorem9", "corollary10"):
        raise ValueError(f"unknown certification mode {mode!r}")
    if mpqp is None:
        raise ValueError("the condensed MPC program is required")
    dom = domain if domain is not None else instance.region_of_interest

    zres = zeta_bound(net, data, mpqp, probe_factor=probe_factor, domain=dom,
                      equivalence_set=equivalence_set, augment=augment,
                      d_target=d_target, seed=seed)
    zeta = zres.zeta
    if zeta <= 0.0:
        lhs = np.inf
    elif zeta >= 1.0:
        lhs = (1.0 - zeta * zeta) / zeta  # nonpositive: certificate fails
    else:
        lhs = (1.0 - zeta * zeta) / zeta

    chi = None
    if mode == "corollary10":
        chi = sublevel_threshold(net, dom, boundary_samples=boundary_samples, seed=seed)
        rhs = condition_rhs(net, instance.system.Q, "omega", chi=chi, seed=seed)
    else:
        rhs = condition_rhs(net, instance.system.Q, "x0", x0_set=dom, seed=seed)

    passed = bool(lhs > rhs)
    return CertificationReport(mode=mode, zeta=float(zeta), e_bar=zres.e_bar,
                               e_grad_bar=zres.e_grad_bar, condition_lhs=float(lhs),
                               condition_rhs=float(rhs), passed=passed,
                               coverage_ok=zres.coverage_ok, chi=chi,
                               n_augmented=zres.n_augmented, n_probes=zres.n_probes,
                               region_table=zres.regions, notes=zres.notes)
