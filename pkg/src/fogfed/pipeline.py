"""End-to-end stages: data, training, formation engines and reporting.

Every stage writes its artifacts into a run directory so later stages (and
independent checks) can start from files alone.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fogfed.baselines import kmeans_init, run_greedy
from fogfed.config import ExperimentConfig
from fogfed.domain import FormationModel
from fogfed.evo import churn, run_evolution
from fogfed.fl import (
    Client,
    EvalReport,
    ModelSpec,
    QosPredictor,
    TrainedModel,
    load_model,
    run_federated_training,
    save_model,
    write_history,
)
from fogfed.ga import fitness, run_ga, run_ga_open_ended
from fogfed.qos_data import (
    FeatureTable,
    QosDataset,
    load_wsdream_dir,
    partition_by_provider,
    preprocess,
    synthesize,
    train_test_split,
)

log = logging.getLogger(__name__)

ENGINES = ("evo", "ga", "greedy")
TRACE_FIELDS = ["generation", "churn", "welfare", "fitness", "mean_fitness", "entropy", "deviation_check"]
REPORT_FIELDS = [
    "engine", "satisfaction_rt", "satisfaction_tp", "total_payoff", "converged",
    "generation_of_convergence", "churn_rounds", "rounds", "churn_fraction", "post_convergence_churn",
]
ROUTING_FIELDS = ["user_id", "app_id", "server_id", "rt", "tp", "rt_ok", "tp_ok"]
# reference values quoted for the pooled-data Bagging model on the same dataset
BAGGING_MAE = {"rt": 0.0203, "tp": 0.659}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Data and training


def load_dataset(cfg: ExperimentConfig) -> QosDataset:
    ds = cfg.dataset
    if ds.source == "wsdream":
        directory = Path(ds.directory or "")
        if ds.directory and directory.exists():
            return load_wsdream_dir(directory, max_users=ds.max_users, max_nodes=ds.max_nodes)
        if not ds.synthesize_if_missing:
            raise FileNotFoundError(f"WS-Dream directory not found: {directory}")
        log.warning("dataset directory %s missing; synthesizing instead", directory)
    return synthesize(ds.seed, ds.n_users, ds.n_nodes, ds.noise)


@dataclass
class PreparedData:
    dataset: QosDataset
    features: FeatureTable
    train_idx: np.ndarray
    test_idx: np.ndarray
    node_to_provider: dict[int, int]


def prepare(cfg: ExperimentConfig, dataset: QosDataset | None = None) -> PreparedData:
    data = dataset if dataset is not None else load_dataset(cfg)
    train_idx, test_idx = train_test_split(len(data), cfg.dataset.test_fraction, cfg.dataset.seed)
    return PreparedData(data, preprocess(data, train_idx), train_idx, test_idx, cfg.dataset.node_mapping(data.n_nodes))


def make_clients(prep: PreparedData, target: str) -> list[Client]:
    shards = partition_by_provider(prep.dataset, prep.node_to_provider, prep.train_idx)
    feats = prep.features
    clients = []
    for shard in shards:
        sub = feats.take(shard.indices)
        clients.append(Client(shard.provider_id, sub.inputs(), sub.targets(target)))
    return clients


def model_spec(cfg: ExperimentConfig, width: int) -> ModelSpec:
    return ModelSpec((width, *cfg.model.hidden, 1), cfg.model.activation)


def train_target(cfg: ExperimentConfig, prep: PreparedData, target: str, selection: str | None = None,
                 rounds: int | None = None) -> tuple[TrainedModel, EvalReport]:
    selection = selection or cfg.selection
    config = cfg.training if rounds is None else replace(cfg.training, rounds=rounds)
    test = prep.features.take(prep.test_idx)
    params, report = run_federated_training(
        make_clients(prep, target), model_spec(cfg, prep.features.width), config,
        selection=selection, test=(test.inputs(), test.targets(target)),
    )
    model = TrainedModel(target, params, prep.features.normalization, prep.features.n_users, prep.features.n_nodes)
    return model, report


# --------------------------------------------------------------------------
# Formation


@dataclass
class EngineRun:
    engine: str
    genes: tuple[int, ...]
    trace: list[dict]
    converged: bool | None = None
    generation_of_convergence: int | None = None
    nash_passed: bool | None = None
    extra: dict = field(default_factory=dict)

    @property
    def churn(self) -> list[int]:
        return [row["churn"] for row in self.trace[1:]]


def _ga_trace(history, model, lam):
    rows = []
    prev = None
    for h in history:
        g = h["genes"]
        rows.append({
            "generation": h["generation"],
            "churn": 0 if prev is None else churn(prev, g),
            "welfare": float(sum(h["federation_utilities"])),
            "fitness": h["best_fitness"],
            "mean_fitness": h["mean_fitness"],
            "federation_utilities": h["federation_utilities"],
        })
        prev = g
    return rows


def run_engine(engine: str, model: FormationModel, cfg: ExperimentConfig) -> EngineRun:
    lam = cfg.ga.lambda_fairness
    seed_genes = model.genes(kmeans_init(model.scenario, model.m, cfg.seed))
    if engine == "evo":
        ga = run_ga(model, cfg.ga, initial_population=[seed_genes])
        res = run_evolution(model, cfg.evo, ga.best_genes)
        return EngineRun(
            "evo", res.genes, res.trace, res.report.converged, res.report.generation_of_convergence,
            res.report.deviation_check.passed if res.report.deviation_check else None,
            {"ga_generations": len(ga.history) - 1, "ga_best_fitness": ga.best_fitness},
        )
    if engine == "ga":
        res = run_ga_open_ended(model, cfg.ga, cfg.ga_open_ended_epochs, initial_population=[seed_genes])
        return EngineRun("ga", res.best_genes, _ga_trace(res.history, model, lam))
    if engine == "greedy":
        res = run_greedy(model, cfg.greedy, initial=seed_genes)
        trace = []
        for r, (g, u) in enumerate(zip(res.profiles, res.utilities)):
            trace.append({
                "generation": r,
                "churn": 0 if r == 0 else churn(res.profiles[r - 1], g),
                "welfare": float(sum(u)),
                "fitness": fitness(g, model, lam),
                "federation_utilities": u,
            })
        return EngineRun("greedy", res.final, trace)
    raise ValueError(f"unknown engine {engine!r}")


def write_trace(run: EngineRun, m: int, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TRACE_FIELDS + [f"u_{j}" for j in range(1, m + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in run.trace:
            w.writerow([_fmt(row.get(k)) for k in TRACE_FIELDS] + [_fmt(u) for u in row["federation_utilities"]])
    return path


def write_profile(genes, model: FormationModel, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["server_id", "provider_id", "federation"])
        for s, g in zip(model.servers, genes):
            w.writerow([s.id, s.provider_id, int(g)])
    return path


def read_profile(path, model: FormationModel) -> tuple[int, ...]:
    with open(path) as fh:
        rows = {int(r["server_id"]): int(r["federation"]) for r in csv.DictReader(fh)}
    missing = [sid for sid in model.server_ids if sid not in rows]
    if missing:
        raise ValueError(f"{path}: no federation for servers {missing}")
    return tuple(rows[sid] for sid in model.server_ids)


def write_routing(genes, model: FormationModel, path) -> Path:
    plan = model.routing_plan(genes)
    econ = model.econ
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUTING_FIELDS)
        for (uid, aid), r in plan.items():
            if r.server_id is None:
                w.writerow([uid, aid, "", "", "", 0, 0])
            else:
                w.writerow([uid, aid, r.server_id, repr(r.rt), repr(r.tp),
                            int(r.rt <= econ.rt_sla), int(r.tp >= econ.tp_sla)])
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------------------
# Reporting


@dataclass
class EngineSummary:
    engine: str
    satisfaction_rt: float
    satisfaction_tp: float
    total_payoff: float
    converged: bool | None
    generation_of_convergence: int | None
    churn_rounds: int
    rounds: int
    post_convergence_churn: int | None

    @property
    def churn_fraction(self) -> float:
        return self.churn_rounds / self.rounds if self.rounds else 0.0


def summarize(run: EngineRun, model: FormationModel) -> EngineSummary:
    rt, tp = model.satisfaction(run.genes)
    series = run.churn
    post = None
    if run.converged:
        post = sum(series[run.generation_of_convergence:])
    return EngineSummary(
        run.engine, rt, tp, model.evaluate(run.genes).welfare, run.converged,
        run.generation_of_convergence, sum(1 for c in series if c > 0), len(series), post,
    )


def write_report(summaries: list[EngineSummary], fl_metrics: dict, run_dir) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    csv_path = run_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for s in summaries:
            w.writerow([
                s.engine, f"{s.satisfaction_rt:.4f}", f"{s.satisfaction_tp:.4f}", f"{s.total_payoff:.6f}",
                _fmt(s.converged), _fmt(s.generation_of_convergence), s.churn_rounds, s.rounds,
                f"{s.churn_fraction:.4f}", _fmt(s.post_convergence_churn),
            ])
    lines = ["engine     sat_rt%  sat_tp%   payoff  converged  churn_rounds"]
    for s in summaries:
        conv = "-" if s.converged is None else ("yes@%d" % s.generation_of_convergence if s.converged else "no")
        lines.append(f"{s.engine:<9} {s.satisfaction_rt:7.2f}  {s.satisfaction_tp:7.2f}  {s.total_payoff:7.2f}"
                     f"  {conv:>9}  {s.churn_rounds}/{s.rounds}")
    if fl_metrics:
        lines.append("")
        lines.append("model  mse         mae         bagging_mae")
        for target in ("rt", "tp"):
            if target in fl_metrics:
                mse, mae = fl_metrics[target]
                lines.append(f"{target:<5}  {mse:.6f}  {mae:.6f}  {BAGGING_MAE[target]}")
    txt_path = run_dir / "report.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


def read_report(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def read_metrics(run_dir) -> dict:
    path = Path(run_dir) / "fl_metrics.json"
    return json.loads(path.read_text()) if path.exists() else {}


# --------------------------------------------------------------------------
# Whole pipeline


def train_stage(cfg: ExperimentConfig, run_dir, prep: PreparedData | None = None, selection=None, rounds=None,
                targets=("rt", "tp")) -> dict:
    run_dir = Path(run_dir)
    prep = prep or prepare(cfg)
    metrics = {}
    for target in targets:
        model, report = train_target(cfg, prep, target, selection, rounds)
        save_model(model, run_dir / f"model_{target}.json")
        write_history(report, run_dir / f"history_{target}.csv")
        metrics[target] = [report.mse, report.mae]
    existing = read_metrics(run_dir)
    existing.update(metrics)
    (run_dir / "fl_metrics.json").write_text(json.dumps(existing, sort_keys=True) + "\n")
    return metrics


def formation_model(cfg: ExperimentConfig, run_dir) -> FormationModel:
    run_dir = Path(run_dir)
    paths = [run_dir / "model_rt.json", run_dir / "model_tp.json"]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"missing model file {p}")
    predictor = QosPredictor(load_model(paths[0]), load_model(paths[1]))
    return FormationModel(cfg.scenario, predictor)


def form_stage(cfg: ExperimentConfig, run_dir, engine: str, model: FormationModel | None = None) -> EngineRun:
    run_dir = Path(run_dir)
    model = model or formation_model(cfg, run_dir)
    run = run_engine(engine, model, cfg)
    write_trace(run, model.m, run_dir / f"trace_{engine}.csv")
    write_profile(run.genes, model, run_dir / f"profile_{engine}.csv")
    write_routing(run.genes, model, run_dir / f"routing_{engine}.csv")
    meta = {
        "engine": engine,
        "converged": run.converged,
        "generation_of_convergence": run.generation_of_convergence,
        "nash_passed": run.nash_passed,
        "churn": run.churn,
    }
    (run_dir / f"formation_{engine}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return run


def report_stage(cfg: ExperimentConfig, run_dir, model: FormationModel | None = None) -> list[EngineSummary]:
    run_dir = Path(run_dir)
    model = model or formation_model(cfg, run_dir)
    summaries = []
    for engine in ENGINES:
        meta_path = run_dir / f"formation_{engine}.json"
        if not meta_path.exists():
            continue
        meta = json.loads(meta_path.read_text())
        genes = read_profile(run_dir / f"profile_{engine}.csv", model)
        run = EngineRun(engine, genes, [], meta["converged"], meta["generation_of_convergence"], meta["nash_passed"])
        series = meta["churn"]
        rt, tp = model.satisfaction(genes)
        post = sum(series[run.generation_of_convergence:]) if run.converged else None
        summaries.append(EngineSummary(
            engine, rt, tp, model.evaluate(genes).welfare, run.converged, run.generation_of_convergence,
            sum(1 for c in series if c > 0), len(series), post,
        ))
    if not summaries:
        raise FileNotFoundError(f"no formation outputs in {run_dir}")
    write_report(summaries, read_metrics(run_dir), run_dir)
    return summaries


def simulate(cfg: ExperimentConfig, run_dir) -> list[EngineSummary]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        prep = prepare(cfg)
    except Exception as exc:
        raise StageError("ingest", str(exc)) from exc
    try:
        train_stage(cfg, run_dir, prep)
    except Exception as exc:
        raise StageError("train", str(exc)) from exc
    try:
        model = formation_model(cfg, run_dir)
        for engine in ENGINES:
            form_stage(cfg, run_dir, engine, model)
    except Exception as exc:
        raise StageError("form", str(exc)) from exc
    try:
        return report_stage(cfg, run_dir, model)
    except Exception as exc:
        raise StageError("report", str(exc)) from exc
