"""Command-line entry point: ``fogfed <subcommand>``.

Stages communicate through a run directory.  Its default location is
``<root>/<scenario name>-seed<seed>`` where ``<root>`` is ``runs`` or the
value of the ``FOGFED_RUN_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from fogfed import pipeline
from fogfed.config import ExperimentConfig, desk_config, load_config, save_config
from fogfed.domain import ScenarioError
from fogfed.qos_data import IngestionError, load_wsdream, load_wsdream_dir, synthesize, write_wsdream

RUN_ROOT_ENV = "FOGFED_RUN_ROOT"

log = logging.getLogger("fogfed")


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.scenario) if args.scenario else desk_config(args.seed or 0)
    except FileNotFoundError as exc:
        raise CliError("config", f"scenario file not found: {exc.filename}") from None
    except ScenarioError as exc:
        raise CliError("config", str(exc)) from None
    if args.seed is not None and args.seed != cfg.seed:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run_dir_for(cfg: ExperimentConfig, explicit: str | None = None) -> Path:
    if explicit:
        return Path(explicit)
    root = Path(os.environ.get(RUN_ROOT_ENV) or "runs")
    return root / f"{cfg.name}-seed{cfg.seed}"


def _stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (CliError, pipeline.StageError):
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(name, str(exc)) from exc


# --------------------------------------------------------------------------
# Subcommands


def cmd_scenario(args) -> int:
    cfg = desk_config(args.seed or 0)
    path = save_config(cfg, args.out)
    sc = cfg.scenario
    print(f"wrote {path}: {len(sc.providers)} providers, {len(sc.servers)} servers, "
          f"{len(sc.applications)} apps, {len(sc.users)} users, m={sc.m}")
    return 0


def cmd_synth(args) -> int:
    ds = synthesize(args.seed, args.users, args.nodes, args.noise)
    out = write_wsdream(ds, args.out)
    print(f"wrote {out}: {ds.n_users} users, {ds.n_nodes} nodes, {len(ds)} records")
    return 0


def cmd_ingest(args) -> int:
    kw = {"max_users": args.max_users, "max_nodes": args.max_nodes}

    def load():
        if len(args.paths) == 1:
            return load_wsdream_dir(args.paths[0], **kw)
        if len(args.paths) == 4:
            return load_wsdream(*args.paths, **kw)
        raise CliError("ingest", "expected a directory or four files: rt tp userlist wslist")

    try:
        ds = load()
    except FileNotFoundError as exc:
        raise CliError("ingest", f"missing file: {exc.args[0] if exc.args else exc}") from None
    except IngestionError as exc:
        raise CliError("ingest", str(exc)) from None
    print(f"{ds.n_users} users, {ds.n_nodes} nodes, {len(ds)} records, {ds.filtered} filtered")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = run_dir_for(cfg, args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    prep = _stage("ingest", pipeline.prepare, cfg)
    metrics = _stage(
        "train", pipeline.train_stage, cfg, run_dir, prep,
        selection=args.selection, rounds=args.rounds, targets=(args.target,),
    )
    mse, mae = metrics[args.target]
    print(f"{args.target}: mse={mse:.6f} mae={mae:.6f} -> {run_dir / f'model_{args.target}.json'}")
    return 0


def cmd_form(args) -> int:
    cfg = _config(args)
    run_dir = run_dir_for(cfg, args.run_dir)
    model = _stage("form", pipeline.formation_model, cfg, run_dir)
    run = _stage("form", pipeline.form_stage, cfg, run_dir, args.engine, model)
    s = pipeline.summarize(run, model)
    conv = "" if run.converged is None else f" converged={str(run.converged).lower()}"
    print(f"{args.engine}: payoff={s.total_payoff:.2f} sat_rt={s.satisfaction_rt:.2f}% "
          f"sat_tp={s.satisfaction_tp:.2f}% churn_rounds={s.churn_rounds}/{s.rounds}{conv}")
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    run_dir = run_dir_for(cfg, args.run_dir)
    _stage("report", pipeline.report_stage, cfg, run_dir)
    print((run_dir / "report.txt").read_text(), end="")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    run_dir = run_dir_for(cfg, args.run_dir)
    pipeline.simulate(cfg, run_dir)
    print((run_dir / "report.txt").read_text(), end="")
    print(f"artifacts in {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fogfed",
        description="Federated QoS prediction and fog-federation formation experiments.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_scenario(p):
        p.add_argument("--scenario", help="scenario JSON file (default: built-in desk scenario)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--run-dir", help=f"run directory (default: ${RUN_ROOT_ENV} or ./runs, per scenario and seed)")
        return p

    p = sub.add_parser("scenario", help="write the default desk scenario to a JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("synth", help="write a synthetic dataset in the WS-Dream text layout")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=60)
    p.add_argument("--nodes", type=int, default=160)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load WS-Dream files and print a summary")
    p.add_argument("paths", nargs="+", help="dataset directory, or rtMatrix tpMatrix userlist wslist")
    p.add_argument("--max-users", type=int)
    p.add_argument("--max-nodes", type=int)
    p.set_defaults(func=cmd_ingest)

    p = with_scenario(sub.add_parser("train", help="train one federated QoS model"))
    p.add_argument("--target", choices=("rt", "tp"), required=True)
    p.add_argument("--selection", choices=("uniform", "weighted"))
    p.add_argument("--rounds", type=int, help="override the number of federated rounds")
    p.set_defaults(func=cmd_train)

    p = with_scenario(sub.add_parser("form", help="run one formation engine on the trained models"))
    p.add_argument("--engine", choices=pipeline.ENGINES, required=True)
    p.set_defaults(func=cmd_form)

    p = with_scenario(sub.add_parser("report", help="summarize formation outputs"))
    p.set_defaults(func=cmd_report)

    p = with_scenario(sub.add_parser("simulate", help="ingest, train both models, run all engines, report"))
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except pipeline.StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
