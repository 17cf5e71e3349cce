"""Command-line front end.

  rollmpc run   --scenario <name|file> [--config F] [--out DIR] [--seed N]
                [--plots] [--async-mpc]
  rollmpc plot  --out DIR
  rollmpc selftest

Exit codes: 0 success, 2 configuration error, 3 run failure (fall),
4 self-test failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import sim as _sim
from .config import ConfigError, build_stack, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN_FAILURE = 3
EXIT_SELFTEST = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="rollmpc",
        description="Whole-body MPC for a wheeled quadruped: closed-loop "
                    "runs, reports and self-checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and export CSV logs")
    run.add_argument("--scenario", required=True,
                     help="built-in name (%s) or a scenario YAML file"
                          % ", ".join(_sim.BUILTIN_SCENARIOS))
    run.add_argument("--config", default=None, help="config YAML overriding "
                                                    "the packaged defaults")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--seed", type=int, default=0, help="run seed "
                     "(recorded; the synchronous loop is deterministic)")
    run.add_argument("--plots", action="store_true",
                     help="render figures after the run")
    run.add_argument("--async-mpc", action="store_true",
                     help="run the solver concurrently (nondeterministic)")

    plot = sub.add_parser("plot", help="render figures from exported CSVs")
    plot.add_argument("--out", default="out", help="run directory holding "
                                                   "the CSVs")

    sub.add_parser("selftest", help="run the fast numerical self-checks")
    return parser


def _load_scenario(spec, seed):
    if spec in _sim.BUILTIN_SCENARIOS:
        return _sim.builtin_scenario(spec, seed=seed)
    import yaml

    try:
        with open(spec) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scenario: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("scenario root must be a mapping")
    data.setdefault("seed", seed)
    try:
        return _sim.scenario_from_config(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def cmd_run(args):
    try:
        config = load_config(args.config)
        stack = build_stack(config)
        scenario = _load_scenario(args.scenario, args.seed)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    scenario.horizon = stack.horizon
    scenario.mpc_period = stack.mpc_period
    scenario.plant_step = stack.plant_step

    runner = _sim.run_scenario_async if args.async_mpc else _sim.run_scenario
    log = runner(scenario, model=stack.model, terrain=stack.terrain,
                 gait_cfg=stack.gait, cost_weights=stack.cost_weights,
                 swing=stack.swing, settings=stack.solver)
    summary = _sim.export_logs(log, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.plots:
        from . import plots

        for path in plots.render_all(args.out):
            print(f"wrote {path}")
    if log.fall:
        print(f"run failed: fall at t={log.fall_time:.3f} s",
              file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


def cmd_plot(args):
    from . import plots

    required = [os.path.join(args.out, f)
                for f in ("states.csv", "contacts.csv", "metrics.csv")]
    missing = [p for p in required if not os.path.exists(p)]
    if missing:
        print("missing run outputs: " + ", ".join(missing), file=sys.stderr)
        return EXIT_CONFIG
    try:
        for path in plots.render_all(args.out):
            print(f"wrote {path}")
    except plots.MissingColumnError as exc:
        print(f"cannot plot: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_selftest(_args):
    from .selftest import run_selftest

    passed = run_selftest()
    return EXIT_OK if passed else EXIT_SELFTEST


def main(argv=None):
    args = _build_parser().parse_args(argv)
    np.set_printoptions(precision=6, suppress=True)
    handlers = {"run": cmd_run, "plot": cmd_plot, "selftest": cmd_selftest}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
