"""Experiment harness: presets, pipeline runners, closed-loop simulation,
controller comparison, flop accounting, and CSV/JSON export.

Wall-clock times are logged as informational only; counted flops are the
portable complexity metric.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import expm

from . import certifier, controller as ctrl_mod, datagen, mpc, polytope, pwq_net, qp, riccati
from .controller import Controller, activation_flops
from .exceptions import ConfigError, InfeasibleError, SolverError
from .model import LtiSystem, Polyhedron, ProblemInstance, instance_from_obj, instance_to_obj

CONVERGED_NORM = 1e-9


# ---------------------------------------------------------------------------
# flop model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlopModel:
    M: int
    n: int
    m: int

    @property
    def f_act(self) -> int:
        return activation_flops(self.M, self.n, self.m)

    def algo2_total(self, qp_flops: int, s_m: int) -> int:
        """Counted cost of one decomposition step: s_m (f_act + f_QP + M)."""
        return s_m * (self.f_act + qp_flops + self.M)


def flops_algo2(M: int, n: int, m: int, qp_flops: int, s_m: int) -> int:
    return FlopModel(M, n, m).algo2_total(qp_flops, s_m)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    instance: ProblemInstance
    horizon: int
    width: int
    alpha: float
    epochs: int
    multi_start: int = 8
    warmup_frac: float = 0.1
    data_seed: int = 2024
    train_seed: int = 7
    sampling: dict = field(default_factory=dict)
    with_gradients: bool = True
    cert_mode: str | None = None
    probe_factor: int = 4
    boundary_samples: int = 2000
    controller_c: str = "none"  # none | olqr | hull
    sim_x0: list = field(default_factory=list)
    sim_steps: int = 100
    epsilon_pcp: float = 1e-9
    discretization_dt: float | None = None

    def to_obj(self) -> dict:
        obj = asdict(self)
        obj["instance"] = instance_to_obj(self.instance)
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        try:
            obj["instance"] = instance_from_obj(obj["instance"])
            return cls(**obj)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_obj(), f, indent=1)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                return cls.from_obj(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def oscillating_masses(n_masses: int = 4, mass: float = 1.0, spring: float = 1.0,
                       dt: float = 0.5, actuated=(0, 2)) -> tuple:
    """Chain of unit masses between two walls, forces on the actuated masses,
    discretized by exact zero-order hold.
    """
    k = spring / mass
    K = (np.diag(-2.0 * np.ones(n_masses)) + np.diag(np.ones(n_masses - 1), 1)
         + np.diag(np.ones(n_masses - 1), -1)) * k
    n = 2 * n_masses
    Ac = np.zeros((n, n))
    Ac[:n_masses, n_masses:] = np.eye(n_masses)
    Ac[n_masses:, :n_masses] = K
    Bc = np.zeros((n, len(actuated)))
    for j, i in enumerate(actuated):
        Bc[n_masses + i, j] = 1.0 / mass
    aug = np.zeros((n + len(actuated), n + len(actuated)))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    phi = expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def preset(name: str) -> ExperimentConfig:
    """Experiment presets for the three benchmark systems."""
    if name == "example1":
        system = LtiSystem(A=[[1.0, 0.1], [-0.1, 1.0]], B=[[1.0, 0.05], [0.5, 1.0]],
                           Q=np.eye(2), R=0.1 * np.eye(2))
        inst = ProblemInstance(system=system,
                               state_set=Polyhedron.full_space(2),
                               input_set=Polyhedron.box(0.5, 2),
                               region_of_interest=Polyhedron.box(3.0, 2))
        return ExperimentConfig(
            name=name, instance=inst, horizon=10, width=15, alpha=0.02,
            epochs=15000, train_seed=1,
            sampling={"kind": "boundary", "count": 200},
            cert_mode="corollary10", controller_c="none",
            sim_x0=[0.0, 2.0], sim_steps=100)
    if name == "example2":
        Ad, Bd = oscillating_masses(dt=0.5)
        system = LtiSystem(A=Ad, B=Bd, Q=np.eye(8), R=np.eye(2))
        inst = ProblemInstance(system=system,
                               state_set=Polyhedron.box(10.0, 8),
                               input_set=Polyhedron.box(5.0, 2),
                               region_of_interest=Polyhedron.box(10.0, 8))
        return ExperimentConfig(
            name=name, instance=inst, horizon=20, width=50, alpha=0.02,
            epochs=6000, sampling={"kind": "uniform", "count": 100},
            cert_mode=None, controller_c="none", with_gradients=False,
            sim_x0=[1.0, -1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0], sim_steps=100,
            discretization_dt=0.5)
    if name == "example3":
        system = LtiSystem(A=[[1.0, 1.0], [0.0, 1.0]], B=[[0.4], [0.6]],
                           Q=np.eye(2), R=[[0.1]])
        inst = ProblemInstance(system=system,
                               state_set=Polyhedron.box(3.0, 2),
                               input_set=Polyhedron.box(2.0, 1),
                               region_of_interest=Polyhedron.box(3.0, 2))
        return ExperimentConfig(
            name=name, instance=inst, horizon=6, width=15, alpha=0.02,
            epochs=15000, train_seed=1,
            sampling={"kind": "grid", "spacing": 0.05,
                      "equivalence_filter": True},
            cert_mode="theorem9", controller_c="hull",
            sim_x0=[2.0, -2.0], sim_steps=100)
    raise ConfigError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    config: ExperimentConfig
    ric: riccati.RiccatiSolution
    olqr: Polyhedron
    mpqp: mpc.MpqpData
    data: datagen.TrainingSet | None = None
    net: pwq_net.PwqNetwork | None = None
    train_log: pwq_net.TrainingLog | None = None

    @property
    def instance(self) -> ProblemInstance:
        return self.config.instance


def prepare(config: ExperimentConfig) -> Pipeline:
    inst = config.instance
    ric = riccati.solve_dare(inst.system)
    adm = polytope.admissible_set(inst.state_set, inst.input_set, ric.Kstar)
    inv = polytope.max_positively_invariant(inst.system.A - inst.system.B @ ric.Kstar, adm)
    if not inv.converged:
        warnings.warn("LQR invariant set iteration hit its cap; set may not be maximal")
    mpqp = mpc.condense(inst.system, inst.state_set, inst.input_set, ric.Pstar,
                        config.horizon)
    return Pipeline(config=config, ric=ric, olqr=inv.set, mpqp=mpqp)


def run_generate(pipe: Pipeline, seed: int | None = None) -> datagen.TrainingSet:
    cfg = pipe.config
    seed = cfg.data_seed if seed is None else seed
    kind = cfg.sampling.get("kind", "boundary")
    if kind == "boundary":
        states = datagen.sample_boundary_states(
            cfg.instance.region_of_interest, cfg.sampling.get("count", 200), seed,
            mpqp=pipe.mpqp)
        data = datagen.generate_from_trajectories(
            pipe.mpqp, states, with_gradients=cfg.with_gradients, seed=seed)
    elif kind == "uniform":
        states = datagen.sample_feasible_uniform(
            cfg.instance.region_of_interest, cfg.sampling.get("count", 100), seed,
            mpqp=pipe.mpqp)
        data = datagen.generate_from_trajectories(
            pipe.mpqp, states, with_gradients=cfg.with_gradients, seed=seed)
    elif kind == "grid":
        data = datagen.generate_grid(
            pipe.mpqp, cfg.instance.region_of_interest, cfg.sampling.get("spacing", 0.05),
            terminal_set=pipe.olqr if cfg.sampling.get("equivalence_filter") else None,
            with_gradients=cfg.with_gradients)
    else:
        raise ConfigError(f"unknown sampling kind {kind!r}")
    pipe.data = data
    return data


def run_train(pipe: Pipeline, seed: int | None = None):
    cfg = pipe.config
    if pipe.data is None:
        raise ValueError("generate data before training")
    tc = pwq_net.TrainConfig(width=cfg.width, alpha=cfg.alpha, epochs=cfg.epochs,
                             multi_start=cfg.multi_start, warmup_frac=cfg.warmup_frac,
                             seed=cfg.train_seed if seed is None else seed)
    net, log = pwq_net.train(pipe.data, tc, Pstar=pipe.ric.Pstar)
    pipe.net, pipe.train_log = net, log
    return net, log


def feasible_hull(data: datagen.TrainingSet) -> Polyhedron:
    """Convex hull of the sampled feasible states, as halfspaces (2-D only)."""
    from scipy.spatial import ConvexHull
    pts = np.asarray(data.states, float)
    if pts.shape[1] != 2:
        raise ValueError("feasible hull implemented for 2-D only")
    hull = ConvexHull(pts)
    # ConvexHull equations are [normal, offset] with normal'x + offset <= 0
    H = hull.equations[:, :2]
    h = -hull.equations[:, 2]
    return Polyhedron(H, h)


def hull_vertices(data: datagen.TrainingSet):
    from scipy.spatial import ConvexHull
    pts = np.asarray(data.states, float)
    hull = ConvexHull(pts)
    return [pts[i] for i in hull.vertices]


def successor_set(pipe: Pipeline) -> Polyhedron | None:
    choice = pipe.config.controller_c
    if choice == "none":
        return None
    if choice == "olqr":
        return pipe.olqr
    if choice == "hull":
        if pipe.data is None:
            raise ValueError("hull successor set needs generated data")
        return feasible_hull(pipe.data)
    raise ConfigError(f"unknown successor-set choice {choice!r}")


def build_controller(pipe: Pipeline, algorithm: str) -> Controller:
    if pipe.net is None:
        raise ValueError("train the network before building a controller")
    return Controller(net=pipe.net, system=pipe.instance.system,
                      input_set=pipe.instance.input_set,
                      successor_set=successor_set(pipe), algorithm=algorithm,
                      epsilon=pipe.config.epsilon_pcp)


def run_certify(pipe: Pipeline, seed: int = 0) -> certifier.CertificationReport:
    cfg = pipe.config
    if cfg.cert_mode is None:
        raise ConfigError(f"preset {cfg.name} does not define a certification mode")
    if pipe.net is None or pipe.data is None:
        raise ValueError("certification requires generated data and a trained network")
    domain = cfg.instance.region_of_interest
    if cfg.controller_c == "hull":
        domain = feasible_hull(pipe.data)
    return certifier.certify(pipe.net, pipe.data, cfg.instance, cfg.cert_mode,
                             mpqp=pipe.mpqp, domain=domain, equivalence_set=pipe.olqr,
                             probe_factor=cfg.probe_factor,
                             boundary_samples=cfg.boundary_samples, seed=seed)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass
class SimulationTrace:
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    total_cost: float
    iterations: list
    flops: list
    algorithm: str
    converged: bool
    error_note: str = ""
    wall_time: float = 0.0

    @property
    def final_state(self):
        return self.states[-1]

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.size else 0
        with open(path, "w") as f:
            cols = (["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
                    + ["stageCost", "iters", "flops"])
            f.write(",".join(cols) + "\n")
            for t in range(len(self.inputs)):
                vals = [str(t)]
                vals += [f"{v:.17g}" for v in self.states[t]]
                vals += [f"{v:.17g}" for v in self.inputs[t]]
                vals += [f"{self.stage_costs[t]:.17g}", str(self.iterations[t]),
                         str(self.flops[t])]
                f.write(",".join(vals) + "\n")


def _rollout(instance: ProblemInstance, x0, T: int, step_fn, algorithm: str) -> SimulationTrace:
    system = instance.system
    Q, R = system.Q, system.R
    x = np.asarray(x0, float).ravel()
    states, inputs, costs, iters, flops = [x.copy()], [], [], [], []
    converged, note = False, ""
    t0 = time.perf_counter()
    for _ in range(T):
        if float(np.linalg.norm(x)) <= CONVERGED_NORM:
            converged = True
            break
        try:
            u, n_iter, n_flops = step_fn(x)
        except (InfeasibleError, SolverError) as exc:
            note = f"controller failed: {exc}"
            break
        u = np.asarray(u, float).ravel()
        costs.append(float(x @ Q @ x + u @ R @ u))
        iters.append(n_iter)
        flops.append(n_flops)
        x = system.A @ x + system.B @ u
        states.append(x.copy())
        inputs.append(u)
    wall = time.perf_counter() - t0
    if not note and float(np.linalg.norm(x)) <= CONVERGED_NORM:
        converged = True
    return SimulationTrace(states=np.array(states), inputs=np.array(inputs).reshape(len(inputs), -1),
                           stage_costs=np.array(costs), total_cost=float(np.sum(costs)),
                           iterations=iters, flops=flops, algorithm=algorithm,
                           converged=converged, error_note=note, wall_time=wall)


def simulate(instance: ProblemInstance, controller: Controller, x0, T: int) -> SimulationTrace:
    """Closed-loop rollout under the one-step DP controller."""
    def step(x):
        res = controller.step(x)
        return res.u, res.iterations, res.flops
    return _rollout(instance, x0, T, step, controller.algorithm)


def simulate_mpc(instance: ProblemInstance, mpqp: mpc.MpqpData, x0, T: int) -> SimulationTrace:
    """Receding-horizon baseline with shifted warm starts."""
    solver = qp.ActiveSetSolver()
    prev: list = [None]

    def step(x):
        sol = mpc.solve_mpc(mpqp, x, warm=prev[0], solver=solver)
        prev[0] = mpc.shifted_warm(mpqp, sol)
        return mpc.first_input(mpqp, sol), sol.iterations, sol.flops
    return _rollout(instance, x0, T, step, "mpc")


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    algorithm: str
    n_runs: int
    n_failures: int
    mean_total_cost: float
    mean_iterations_per_step: float
    mean_flops_per_step: float
    wall_time: float


@dataclass
class ComparisonResult:
    rows: list
    per_run_costs: dict

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("algorithm,n_runs,n_failures,mean_total_cost,"
                    "mean_iterations_per_step,mean_flops_per_step\n")
            for r in self.rows:
                f.write(f"{r.algorithm},{r.n_runs},{r.n_failures},"
                        f"{r.mean_total_cost:.17g},{r.mean_iterations_per_step:.17g},"
                        f"{r.mean_flops_per_step:.17g}\n")

    def summary(self) -> dict:
        return {r.algorithm: {"mean_total_cost": r.mean_total_cost,
                              "mean_iterations_per_step": r.mean_iterations_per_step,
                              "mean_flops_per_step": r.mean_flops_per_step,
                              "n_failures": r.n_failures,
                              "wall_time_informational": r.wall_time}
                for r in self.rows}

    def save_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=1)


def compare(pipe: Pipeline, algorithms, x0_set, T: int) -> ComparisonResult:
    """Run each controller from each start; aggregate costs, iterations, and
    counted flops (wall clock recorded as informational)."""
    rows, per_run = [], {}
    for algo in algorithms:
        costs, iters, flops, fails = [], [], [], 0
        t0 = time.perf_counter()
        for x0 in x0_set:
            if algo == "mpc":
                trace = simulate_mpc(pipe.instance, pipe.mpqp, x0, T)
            else:
                trace = simulate(pipe.instance, build_controller(pipe, algo), x0, T)
            if trace.error_note:
                fails += 1
                continue
            costs.append(trace.total_cost)
            if trace.iterations:
                iters.append(float(np.mean(trace.iterations)))
                flops.append(float(np.mean(trace.flops)))
        wall = time.perf_counter() - t0
        rows.append(ComparisonRow(
            algorithm=algo, n_runs=len(x0_set), n_failures=fails,
            mean_total_cost=float(np.mean(costs)) if costs else float("nan"),
            mean_iterations_per_step=float(np.mean(iters)) if iters else float("nan"),
            mean_flops_per_step=float(np.mean(flops)) if flops else float("nan"),
            wall_time=wall))
        per_run[algo] = costs
    return ComparisonResult(rows=rows, per_run_costs=per_run)
