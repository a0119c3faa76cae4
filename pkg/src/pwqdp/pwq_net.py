"""Convex piecewise-quadratic value approximator with a local-global split.

The approximator is

    Jhat(x) = x' Pstar x + sum_i r_i * max(0, W_i x + b_i)^2

with r >= 0 (convexity) and b <= -eps_b (exact quadratic behaviour near the
origin). Training minimizes the mean squared value error by full-batch
gradient descent on (W, rbar, b) with r = rbar^2 and b clipped after every
step; multi-start picks the best of several warmed-up initializations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, TrainingDivergedError

EPS_B = 1e-6
BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RegionQuadratic:
    Phat: np.ndarray
    qhat: np.ndarray
    vhat: float

    def value(self, x) -> float:
        x = np.asarray(x, float).ravel()
        return float(x @ self.Phat @ x + self.qhat @ x + self.vhat)


@dataclass(frozen=True, eq=False)
class PwqNetwork:
    W: np.ndarray  # (M, n)
    b: np.ndarray  # (M,)
    r: np.ndarray  # (M,)
    Pstar: np.ndarray  # (n, n)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, float))
        b = np.asarray(self.b, float).ravel()
        r = np.asarray(self.r, float).ravel()
        P = np.atleast_2d(np.asarray(self.Pstar, float))
        if W.size == 0:
            W = W.reshape(0, P.shape[0])
        if W.shape[0] != b.size or b.size != r.size:
            raise ValueError("W, b, r sizes inconsistent")
        if W.shape[0] and W.shape[1] != P.shape[0]:
            raise ValueError("W column count must match the state dimension")
        if r.size and float(r.min()) < 0:
            raise ValueError("output weights r must be nonnegative")
        if b.size and float(b.max()) > -EPS_B:
            raise ValueError(f"hidden biases must satisfy b <= -{EPS_B}")
        for name, a in (("W", W), ("b", b), ("r", r), ("Pstar", 0.5 * (P + P.T))):
            a = np.array(a, float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def width(self) -> int:
        return self.b.size

    @property
    def n(self) -> int:
        return self.Pstar.shape[0]

    # ------------------------------------------------------------------
    def evaluate(self, x) -> float:
        x = np.asarray(x, float).ravel()
        val = float(x @ self.Pstar @ x)
        if self.width:
            act = np.maximum(self.W @ x + self.b, 0.0)
            val += float(self.r @ (act * act))
        return val

    def evaluate_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        vals = np.einsum("ij,jk,ik->i", X, self.Pstar, X)
        if self.width:
            act = np.maximum(X @ self.W.T + self.b, 0.0)
            vals = vals + (act * act) @ self.r
        return vals

    def gradient_x(self, x) -> np.ndarray:
        x = np.asarray(x, float).ravel()
        g = 2.0 * (self.Pstar @ x)
        if self.width:
            act = np.maximum(self.W @ x + self.b, 0.0)
            g = g + 2.0 * ((self.r * act) @ self.W)
        return g

    def gradient_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        G = 2.0 * X @ self.Pstar
        if self.width:
            act = np.maximum(X @ self.W.T + self.b, 0.0)
            G = G + 2.0 * (self.r * act) @ self.W
        return G

    def preactivation(self, z) -> np.ndarray:
        return self.W @ np.asarray(z, float).ravel() + self.b if self.width else np.zeros(0)

    def activation_pattern(self, z) -> tuple:
        """Indices of units with strictly positive pre-activation at z.

        Values within BOUNDARY_TOL of zero count as inactive.
        """
        if not self.width:
            return ()
        pre = self.preactivation(z)
        return tuple(int(i) for i in np.flatnonzero(pre > BOUNDARY_TOL))

    def region_coefficients(self, pattern) -> RegionQuadratic:
        """Quadratic coefficients of Jhat on the region with the given pattern."""
        idx = sorted(int(i) for i in pattern)
        P = np.array(self.Pstar)
        q = np.zeros(self.n)
        v = 0.0
        if idx:
            Wa = self.W[idx]
            ra = self.r[idx]
            ba = self.b[idx]
            P = P + (ra[:, None] * Wa).T @ Wa
            q = 2.0 * (ra * ba) @ Wa
            v = float(ra @ (ba * ba))
        return RegionQuadratic(Phat=0.5 * (P + P.T), qhat=q, vhat=v)

    def inactive_ball_radius(self) -> float:
        """Radius of the origin ball where every unit is off: min -b_i/||W_i||."""
        if not self.width:
            return np.inf
        norms = np.linalg.norm(self.W, axis=1)
        norms = np.where(norms > 0, norms, 1.0)
        return float(np.min(-self.b / norms))

    # ------------------------------------------------------------------
    def to_obj(self, meta: dict | None = None) -> dict:
        return {"M": self.width, "W": self.W.tolist(), "b": self.b.tolist(),
                "r": self.r.tolist(), "Pstar": self.Pstar.tolist(),
                "meta": meta or {}}

    def save(self, path, meta: dict | None = None):
        with open(path, "w") as f:
            json.dump(self.to_obj(meta), f, indent=1)

    @classmethod
    def from_obj(cls, obj: dict) -> "PwqNetwork":
        try:
            net = cls(W=np.array(obj["W"], float).reshape(obj["M"], -1) if obj["M"]
                      else np.zeros((0, len(obj["Pstar"]))),
                      b=np.array(obj["b"], float), r=np.array(obj["r"], float),
                      Pstar=np.array(obj["Pstar"], float))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed network file: {exc}") from exc
        return net

    @classmethod
    def load(cls, path) -> "PwqNetwork":
        try:
            with open(path) as f:
                obj = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read network file {path}: {exc}") from exc
        return cls.from_obj(obj)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    width: int = 15
    alpha: float = 0.1
    epochs: int = 15000
    multi_start: int = 8
    warmup_frac: float = 0.1
    seed: int = 0
    eps_b: float = EPS_B
    init_r_scale: float = 0.1
    init_b_span: float | None = None  # override for the per-unit bias span
    include_quadratic_term: bool = True  # False: strictly-global baseline
    stop_loss: float | None = None  # optional early stop once reached


@dataclass
class TrainingLog:
    losses: np.ndarray
    start_losses: list
    chosen_start: int
    epochs_run: int
    final_loss: float


def _init_params(rng: np.random.Generator, X: np.ndarray, cfg: TrainConfig):
    """W rows on the 1/sqrt(n) sphere; each bias placed so its hyperplane
    crosses the data span (dead units never receive gradient)."""
    n = X.shape[1]
    W = rng.normal(size=(cfg.width, n))
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    W = W / norms / np.sqrt(n)
    span = np.maximum((X @ W.T).max(axis=0), 1e-3)
    if cfg.init_b_span is not None:
        span = np.full(cfg.width, cfg.init_b_span)
    b = np.minimum(-rng.uniform(0.05, 0.95, size=cfg.width) * span, -cfg.eps_b)
    rbar = rng.uniform(0.0, cfg.init_r_scale, size=cfg.width)
    return W, b, rbar


class _GdState:
    """Full-batch gradient-descent state for one start."""

    def __init__(self, X, resid, W, b, rbar, alpha, eps_b):
        self.X, self.resid = X, resid
        self.W, self.b, self.rbar = W, b, rbar
        self.alpha, self.eps_b = alpha, eps_b
        self.loss = np.inf

    def run(self, epochs, losses_out=None, stop_loss=None):
        X, resid, ns = self.X, self.resid, self.X.shape[0]
        with np.errstate(over="ignore", invalid="ignore"):
            return self._run(epochs, X, resid, ns, losses_out, stop_loss)

    def _run(self, epochs, X, resid, ns, losses_out, stop_loss):
        for _ in range(epochs):
            act = np.maximum(X @ self.W.T + self.b, 0.0)
            r = self.rbar * self.rbar
            err = (act * act) @ r - resid
            self.loss = float(err @ err) / ns
            if not np.isfinite(self.loss):
                raise TrainingDivergedError(
                    "training loss became non-finite; lower the learning rate")
            if losses_out is not None:
                losses_out.append(self.loss)
            if stop_loss is not None and self.loss < stop_loss:
                break
            ea = err[:, None] * act
            g_rbar = 4.0 * self.rbar * ((act * act).T @ err) / ns
            g_W = 4.0 * r[:, None] * (ea.T @ X) / ns
            g_b = 4.0 * r * ea.sum(axis=0) / ns
            self.rbar -= self.alpha * g_rbar
            self.W -= self.alpha * g_W
            self.b = np.minimum(self.b - self.alpha * g_b, -self.eps_b)
        return self.loss


def train(data, config: TrainConfig, Pstar=None):
    """Fit the network to (state, value) samples.

    `data` provides .states and .values arrays (see datagen.TrainingSet).
    Pstar defaults to the one stored alongside the data pipeline; the
    strictly-global baseline is selected by include_quadratic_term=False.
    Returns (PwqNetwork, TrainingLog).
    """
    X = np.atleast_2d(np.asarray(data.states, float))
    y = np.asarray(data.values, float).ravel()
    if X.shape[0] == 0:
        raise ValueError("training data is empty")
    n = X.shape[1]
    if Pstar is None:
        raise ValueError("Pstar is required (pass riccati solution matrix)")
    Pstar = np.asarray(Pstar, float)
    P_used = Pstar if config.include_quadratic_term else np.zeros_like(Pstar)
    resid = y - np.einsum("ij,jk,ik->i", X, P_used, X)

    warmup = max(1, int(np.ceil(config.warmup_frac * config.epochs)))
    seeds = np.random.SeedSequence(config.seed).spawn(max(1, config.multi_start))
    starts, start_losses = [], []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        W, b, rbar = _init_params(rng, X, config)
        st = _GdState(X, resid, W, b, rbar, config.alpha, config.eps_b)
        try:
            st.run(warmup, stop_loss=config.stop_loss)
        except TrainingDivergedError:
            st.loss = np.inf  # diverged start: discard, keep the survivors
        starts.append(st)
        start_losses.append(st.loss)
    if not np.isfinite(np.min(start_losses)):
        raise TrainingDivergedError(
            "every start diverged during warmup; lower the learning rate")
    best = int(np.argmin(start_losses))
    winner = starts[best]
    losses: list = []
    winner.run(config.epochs - warmup, losses_out=losses, stop_loss=config.stop_loss)

    net = PwqNetwork(W=winner.W, b=np.minimum(winner.b, -config.eps_b),
                     r=winner.rbar * winner.rbar, Pstar=P_used)
    log = TrainingLog(losses=np.asarray(losses), start_losses=start_losses,
                      chosen_start=best, epochs_run=warmup + len(losses),
                      final_loss=winner.loss)
    return net, log


# ---------------------------------------------------------------------------
# convexity audit
# ---------------------------------------------------------------------------

@dataclass
class ConvexityReport:
    ok: bool
    worst_slack: float
    witness: tuple | None
    structural_ok: bool


def check_convexity(net: PwqNetwork, trials: int = 1000, seed: int = 0,
                    radius: float | None = None, slack_tol: float = 1e-9) -> ConvexityReport:
    """Structural checks (r >= 0, b <= -eps_b) plus sampled first-order
    convexity: J(x2) - J(x1) >= grad J(x1)'(x2 - x1) with slack >= -1e-9.
    """
    structural = bool((net.r.size == 0 or net.r.min() >= 0.0)
                      and (net.b.size == 0 or net.b.max() <= -EPS_B))
    if radius is None:
        scale = net.inactive_ball_radius()
        radius = 4.0 * scale if np.isfinite(scale) else 1.0
    rng = np.random.default_rng(seed)
    worst, witness = np.inf, None
    for _ in range(trials):
        x1 = rng.uniform(-radius, radius, net.n)
        x2 = rng.uniform(-radius, radius, net.n)
        slack = net.evaluate(x2) - net.evaluate(x1) - float(net.gradient_x(x1) @ (x2 - x1))
        if slack < worst:
            worst, witness = slack, (x1, x2)
    ok = structural and worst >= -slack_tol
    return ConvexityReport(ok=ok, worst_slack=float(worst),
                           witness=None if ok else witness, structural_ok=structural)
