"""Command-line entry point: ``gridars <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .env.surrogate import FaultScenario
from .orchestrator import (EXIT_CONFIG, EXIT_CRASH, EXIT_EVAL, EXIT_OK, EXIT_USAGE, EvaluationError, LearnerCrash,
                           RunDirectory, RunError, RunPlan, build_experiment, evaluate, load_bundle,
                           run_centralized_baseline, run_decentralized_only, run_evaluate, run_hierarchical,
                           write_trace)
from .engine import AlwaysOn, CoordinatorReward, coordinator_obs, run_episodes
from .policy import CheckpointError
from .reward import RewardCoefficients

log = logging.getLogger("gridars")

SUBCOMMANDS = ("discover-neighbors", "train", "train-centralized", "evaluate", "evaluate-decentralized", "simulate")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="run configuration (YAML)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--workers", type=int, help="worker threads per learner")
    p.add_argument("--out-dir", help="run directory (default: the config's output_dir)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="lockstep scheduling, single worker, no wall-clock columns")
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                   help="threaded learners, wall-clock columns")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridars", description="Hierarchical ARS load-shedding training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("discover-neighbors", help="probe each area with zero control and pick neighbour buses")
    _common(p)

    p = sub.add_parser("train", help="hierarchical training: area learners plus the coordinator")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from run_state.json in the run directory")
    p.add_argument("--allow-config-change", action="store_true",
                   help="resume even if hyperparameters differ from the saved run")
    p.add_argument("--stop-after", type=int, help="stop after this many ticks (state is saved)")

    p = sub.add_parser("train-centralized", help="one ARS learner over the whole grid")
    _common(p)

    for name, text in (("evaluate", "closed-loop evaluation of a bundle"),
                       ("evaluate-decentralized", "evaluate with only the fault area's policy acting")):
        p = sub.add_parser(name, help=text)
        _common(p, config_required=False)
        p.add_argument("--bundle", required=True, help="bundle.json written by a training run")
        p.add_argument("--scenarios", required=True,
                       help="scenario set name from the config, 'training', 'coordinator', a topology scenario "
                            "name, or a YAML/JSON file with a list of {bus, duration}")
        if name == "evaluate":
            p.add_argument("--policy", default="hierarchical",
                           choices=("hierarchical", "decentralized", "all_areas", "centralized", "none"))

    p = sub.add_parser("simulate", help="run one scenario and dump its trace")
    _common(p, config_required=False)
    p.add_argument("--scenario", required=True, help="topology scenario name, or BUS:DURATION")
    p.add_argument("--no-control", action="store_true", help="zero actions (default unless --bundle is given)")
    p.add_argument("--bundle", help="act with this bundle's hierarchical policy")
    return parser


def _load_config(args) -> RunConfig:
    if args.config is None:
        from .config import example_config_path
        path = example_config_path()
    else:
        path = Path(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    if getattr(args, "out_dir", None) is not None:
        overrides["output_dir"] = str(Path(args.out_dir).resolve())
    return parse_config(path, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    return cfg.resolve(cfg.output_dir)


def _plan(mode: str, cfg: RunConfig, args) -> RunPlan:
    return RunPlan(mode, cfg, _out_dir(cfg), cfg.workers, cfg.deterministic,
                   resume=getattr(args, "resume", False), stop_after=getattr(args, "stop_after", None),
                   allow_config_change=getattr(args, "allow_config_change", False))


def _parse_bus_duration(text: str):
    bus, _, dur = text.partition(":")
    return int(bus), float(dur or 0.0)


def _scenarios_from(spec: str, cfg: RunConfig | None):
    """Resolver over a bundle: named sets need a config, files and BUS:DURATION do not."""
    path = Path(spec)
    if path.suffix in (".yaml", ".yml", ".json") and path.exists():
        import yaml
        entries = yaml.safe_load(path.read_text())
        if isinstance(entries, dict):
            entries = entries.get("scenarios", [])

        def from_file(bundle):
            return [bundle.scenario(e.get("bus"), e.get("duration", 0.0), e.get("name")) for e in entries]
        return from_file
    if ":" in spec and spec.split(":")[0].isdigit():
        bus, dur = _parse_bus_duration(spec)
        return lambda bundle: [bundle.scenario(bus, dur)]

    def named(bundle):
        if spec == "training" or (cfg is not None and spec in cfg.evaluation) or spec == "coordinator":
            if cfg is None:
                raise EvaluationError(f"scenario set {spec!r} needs --config")
            exp = build_experiment(cfg, {a: bundle.tasks[a].views[0].neighbor_buses for a in bundle.areas})
            return exp.scenario_set(spec)
        named_sc = bundle.model.topology.scenarios
        if spec in named_sc:
            d = named_sc[spec]
            return [FaultScenario(d.get("fault_bus", d.get("bus")), float(d.get("duration", 0.0)),
                                  float(d.get("t_fault", 1.0)),
                                  float(d.get("depth", 0.9)), float(d.get("episode_length", bundle.episode["length"])),
                                  spec)]
        raise EvaluationError(f"unknown scenario set {spec!r}")
    return named


def cmd_discover(args) -> int:
    cfg = _load_config(args)
    exp = build_experiment(cfg, neighbors={a: () for a in cfg.area_ids})
    from .neighbors import discover_neighbors
    n = cfg.neighbors
    reports = discover_neighbors(exp.model, tuple(n.durations), nadir_threshold=n.nadir_threshold,
                                 small_fraction=n.small_fraction, max_per_area=n.max_per_area)
    rd = RunDirectory(_out_dir(cfg))
    body = {str(a): r.to_dict() for a, r in sorted(reports.items())}
    rd.path("neighbors.json").parent.mkdir(parents=True, exist_ok=True)
    rd.path("neighbors.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    for a, r in sorted(reports.items()):
        print(f"area {a}: {list(r.selected)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    plan = _plan("hierarchical", cfg, args)
    run = run_hierarchical(plan, on_tick=_progress)
    if not run.done:
        print(f"stopped after tick {run.tick}; resume with --resume")
    else:
        print(f"bundle: {RunDirectory(plan.out_dir).bundle_file}")
    return EXIT_OK


def _progress(run) -> None:
    if run.tick % 10 == 0:
        c = run.cars.curve[-1].eval_return if run.cars.curve else float("nan")
        areas = " ".join(f"{a}:{r.curve[-1].eval_return:.2f}" for a, r in run.runs.items() if r.curve)
        log.info("tick %d  areas %s  coordinator %.2f", run.tick, areas, c)


def cmd_train_centralized(args) -> int:
    cfg = _load_config(args)
    res = run_centralized_baseline(_plan("centralized", cfg, args))
    print(f"bundle: {res.bundle_path}")
    return EXIT_OK


def _eval_config(args) -> RunConfig | None:
    return _load_config(args) if args.config is not None else None


def cmd_evaluate(args, decentralized: bool = False) -> int:
    cfg = _eval_config(args)
    out = Path(args.out_dir) if args.out_dir else (_out_dir(cfg) if cfg else Path(args.bundle).parent) / "eval"
    resolver = _scenarios_from(args.scenarios, cfg)
    name = Path(args.scenarios).stem if Path(args.scenarios).suffix else args.scenarios.replace(":", "_")
    if decentralized:
        report = run_decentralized_only(args.bundle, resolver, out, f"{name}_decentralized")
    else:
        report = run_evaluate(args.bundle, resolver, out, f"{name}_{args.policy}", args.policy)
    cleared = int(report.cleared().sum())
    print(f"{len(report.rows)} scenarios, {cleared} cleared; summary in {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.bundle:
        bundle = load_bundle(args.bundle)
        model, episode = bundle.model, bundle.episode
    else:
        cfg = _load_config(args)
        exp = build_experiment(cfg, neighbors={a: () for a in cfg.area_ids})
        model, episode, bundle = exp.model, {"t_fault": cfg.episode.t_fault, "length": cfg.episode.length}, None
    named = model.topology.scenarios
    if args.scenario in named:
        d = named[args.scenario]
        sc = FaultScenario(d.get("fault_bus", d.get("bus")), float(d.get("duration", 0.0)),
                           float(d.get("t_fault", episode["t_fault"])),
                           float(d.get("depth", 0.9)), float(d.get("episode_length", episode["length"])),
                           args.scenario)
    else:
        try:
            bus, dur = _parse_bus_duration(args.scenario)
        except ValueError:
            raise EvaluationError(f"unknown scenario {args.scenario!r}") from None
        sc = FaultScenario(bus, dur, episode["t_fault"], episode_length=episode["length"])
    try:
        model.check_scenario(sc)
    except (ValueError, KeyError) as exc:
        raise EvaluationError(str(exc)) from exc
    if bundle is not None and not args.no_control:
        tr = evaluate(bundle, [sc], "hierarchical").traces[sc.label]
        t, V, D, U = tr[:4]
    else:
        reward = CoordinatorReward(coordinator_obs(model), np.ones(len(model.topology.area_ids)),
                                   RewardCoefficients())
        out = run_episodes(model, [sc], [], AlwaysOn(), reward, record=True, terminate=False)
        t, V, D, U = out.traces["t"], out.traces["V"][:, 0], out.traces["D"][:, 0], out.traces["U"][:, 0]
    out_dir = Path(args.out_dir) if args.out_dir else Path(".")
    path = write_trace(out_dir / f"simulate_{sc.label}.csv", model, t, V, D, U)
    print(f"trace: {path}")
    return EXIT_OK


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {
        "discover-neighbors": cmd_discover,
        "train": cmd_train,
        "train-centralized": cmd_train_centralized,
        "evaluate": cmd_evaluate,
        "evaluate-decentralized": lambda a: cmd_evaluate(a, decentralized=True),
        "simulate": cmd_simulate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_EVAL if args.command.startswith("evaluate") or args.command == "simulate" else EXIT_CRASH
    except LearnerCrash as exc:
        print(f"{exc}", file=sys.stderr)
        if exc.resume_token:
            print(f"resume token: {exc.resume_token}", file=sys.stderr)
        return EXIT_CRASH
    except RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # semantic config problems found while wiring the experiment
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
