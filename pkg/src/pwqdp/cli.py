"""Command-line interface.

Subcommands: preset, generate, train, certify, simulate, compare.
Exit codes: 0 success, 2 infeasible, 3 certification failed, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, harness, pwq_net
from .exceptions import ConfigError, InfeasibleError

DATASET_FILE = "dataset.txt"
NETWORK_FILE = "network.json"
REPORT_FILE = "report.txt"
TRACE_FILE = "trace.csv"
COMPARE_FILE = "compare.csv"
SUMMARY_FILE = "summary.json"
TRAINLOG_FILE = "training_log.csv"


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return harness.ExperimentConfig.load(args.config)


def _prepared(args) -> harness.Pipeline:
    return harness.prepare(_load_config(args))


def cmd_preset(args) -> int:
    cfg = harness.preset(args.name)
    out = _out_dir(args)
    path = out / "config.json"
    cfg.save(path)
    print(f"wrote {path}")
    return 0


def cmd_generate(args) -> int:
    pipe = _prepared(args)
    data = harness.run_generate(pipe, seed=args.seed)
    out = _out_dir(args)
    data.save(out / DATASET_FILE)
    print(f"wrote {out / DATASET_FILE} ({len(data)} samples)")
    return 0


def cmd_train(args) -> int:
    pipe = _prepared(args)
    out = _out_dir(args)
    pipe.data = datagen.TrainingSet.load(out / DATASET_FILE)
    net, log = harness.run_train(pipe, seed=args.seed)
    net.save(out / NETWORK_FILE, meta={"preset": pipe.config.name,
                                       "final_loss": log.final_loss,
                                       "epochs_run": log.epochs_run,
                                       "chosen_start": log.chosen_start})
    with open(out / TRAINLOG_FILE, "w") as f:
        f.write("epoch,loss\n")
        for i, loss in enumerate(log.losses):
            f.write(f"{i},{loss:.17g}\n")
    print(f"wrote {out / NETWORK_FILE} (final loss {log.final_loss:.6g})")
    return 0


def cmd_certify(args) -> int:
    pipe = _prepared(args)
    out = _out_dir(args)
    pipe.data = datagen.TrainingSet.load(out / DATASET_FILE)
    pipe.net = pwq_net.PwqNetwork.load(out / NETWORK_FILE)
    report = harness.run_certify(pipe, seed=args.seed or 0)
    report.save(out / REPORT_FILE)
    print(report.to_text())
    if not (report.passed and report.coverage_ok):
        return 3
    return 0


def cmd_simulate(args) -> int:
    pipe = _prepared(args)
    out = _out_dir(args)
    x0 = np.asarray(pipe.config.sim_x0, float)
    T = args.steps or pipe.config.sim_steps
    if args.algorithm == "mpc":
        trace = harness.simulate_mpc(pipe.instance, pipe.mpqp, x0, T)
    else:
        pipe.data = datagen.TrainingSet.load(out / DATASET_FILE)
        pipe.net = pwq_net.PwqNetwork.load(out / NETWORK_FILE)
        ctrl = harness.build_controller(pipe, args.algorithm)
        trace = harness.simulate(pipe.instance, ctrl, x0, T)
    trace.to_csv(out / TRACE_FILE)
    print(f"wrote {out / TRACE_FILE}: total cost {trace.total_cost:.17g}, "
          f"converged={trace.converged}"
          + (f", note: {trace.error_note}" if trace.error_note else ""))
    if trace.error_note:
        return 2
    return 0


def cmd_compare(args) -> int:
    pipe = _prepared(args)
    out = _out_dir(args)
    pipe.data = datagen.TrainingSet.load(out / DATASET_FILE)
    pipe.net = pwq_net.PwqNetwork.load(out / NETWORK_FILE)
    algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    T = args.steps or pipe.config.sim_steps
    x0_set = [np.asarray(pipe.config.sim_x0, float)]
    if args.starts > 1:
        x0_set = datagen.sample_feasible_uniform(
            pipe.instance.region_of_interest, args.starts,
            args.seed if args.seed is not None else pipe.config.data_seed,
            mpqp=pipe.mpqp)
    result = harness.compare(pipe, algos, x0_set, T)
    result.to_csv(out / COMPARE_FILE)
    result.save_summary(out / SUMMARY_FILE)
    print(json.dumps(result.summary(), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pwqdp",
        description="Constrained-LQR control via convex PWQ value approximation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="artifact directory")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--algorithm", choices=["pcp", "decomp", "mpc"], default="decomp")

    p = sub.add_parser("preset", help="dump a preset config")
    p.add_argument("name")
    common(p, config=False)
    p.set_defaults(fn=cmd_preset)

    p = sub.add_parser("generate", help="generate the training dataset")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="fit the value network")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("certify", help="emit the stability certificate")
    common(p)
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("simulate", help="closed-loop rollout to CSV")
    common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="controller comparison table")
    common(p)
    p.add_argument("--algorithms", default="decomp,pcp,mpc")
    p.add_argument("--starts", type=int, default=1,
                   help="number of sampled feasible initial states")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
