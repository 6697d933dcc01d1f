"""Scenario files: a versioned JSON document describing one experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from fogfed.baselines import GreedyConfig
from fogfed.domain import Application, EconomicModel, Provider, Scenario, ScenarioError, Server, User
from fogfed.evo import EvoConfig
from fogfed.fl import TrainConfig
from fogfed.ga import GaConfig
from fogfed.qos_data import block_mapping, synthesize, synthetic_rt, synthetic_tp
from fogfed.geo import haversine_km

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" | "wsdream"
    directory: str | None = None
    synthesize_if_missing: bool = True
    n_users: int = 60
    n_nodes: int = 160
    noise: float = 0.1
    seed: int = 0
    max_users: int | None = None
    max_nodes: int | None = None
    test_fraction: float = 0.2
    node_blocks: tuple[int, ...] | None = None
    node_providers: dict[int, int] | None = None

    def node_mapping(self, n_nodes: int) -> dict[int, int]:
        if self.node_providers is not None:
            return dict(self.node_providers)
        if self.node_blocks is not None:
            return block_mapping(n_nodes, self.node_blocks)
        return {j: 0 for j in range(n_nodes)}


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "relu"


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    scenario: Scenario
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    selection: str = "weighted"
    ga: GaConfig = field(default_factory=GaConfig)
    ga_open_ended_epochs: int = 60
    evo: EvoConfig = field(default_factory=EvoConfig)
    greedy: GreedyConfig = field(default_factory=GreedyConfig)

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Same experiment with every stochastic component re-seeded from ``seed``."""
        return replace(
            self,
            seed=seed,
            training=replace(self.training, seed=seed),
            ga=replace(self.ga, seed=seed),
            evo=replace(self.evo, seed=seed),
            greedy=replace(self.greedy, seed=seed),
        )


def _section(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    for k, v in list(data.items()):
        if isinstance(v, list):
            data[k] = tuple(v)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def scenario_from_dict(doc: dict[str, Any]) -> Scenario:
    try:
        servers = []
        providers = []
        for p in doc["providers"]:
            ids = []
            for s in p["servers"]:
                servers.append(Server(
                    int(s["id"]), int(p["id"]), float(s["lat"]), float(s["lon"]),
                    int(s.get("capacity", 1)), s.get("node_id"),
                ))
                ids.append(int(s["id"]))
            providers.append(Provider(int(p["id"]), tuple(ids)))
        apps = [Application(int(a["id"]), int(a["provider"]), float(a["payment"])) for a in doc.get("applications", [])]
        users = [
            User(int(u["id"]), float(u["lat"]), float(u["lon"]), tuple(int(x) for x in u.get("apps", [])),
                 u.get("dataset_user_id"))
            for u in doc.get("users", [])
        ]
        econ = _section(EconomicModel, doc.get("economics"), "economics")
        return Scenario(providers, servers, apps, users, int(doc["federations"]), econ)
    except KeyError as exc:
        raise ScenarioError(f"missing key {exc}") from None
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    servers = {s.id: s for s in sc.servers}
    return {
        "federations": sc.m,
        "economics": asdict(sc.economics),
        "providers": [
            {"id": p.id, "servers": [
                {"id": s.id, "lat": s.lat, "lon": s.lon, "capacity": s.capacity, "node_id": s.node_id}
                for s in (servers[i] for i in p.server_ids)
            ]}
            for p in sc.providers
        ],
        "applications": [{"id": a.id, "provider": a.provider_id, "payment": a.payment} for a in sc.applications],
        "users": [
            {"id": u.id, "lat": u.lat, "lon": u.lon, "apps": list(u.app_ids), "dataset_user_id": u.dataset_user_id}
            for u in sc.users
        ],
    }


def config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    ds = dict(doc.get("dataset") or {})
    if "node_providers" in ds and ds["node_providers"] is not None:
        ds["node_providers"] = {int(k): int(v) for k, v in ds["node_providers"].items()}
    node_providers = ds.pop("node_providers", None)
    dataset = _section(DatasetConfig, ds, "dataset")
    if node_providers is not None:
        dataset = replace(dataset, node_providers=node_providers)
    if dataset.source not in ("synthetic", "wsdream"):
        raise ScenarioError(f"dataset.source must be 'synthetic' or 'wsdream', got {dataset.source!r}")
    training = dict(doc.get("training") or {})
    selection = training.pop("selection", "weighted")
    if selection not in ("uniform", "weighted"):
        raise ScenarioError(f"training.selection must be 'uniform' or 'weighted', got {selection!r}")
    engines = doc.get("engines") or {}
    cfg = ExperimentConfig(
        name=str(doc.get("name", "scenario")),
        seed=int(doc.get("seed", 0)),
        scenario=scenario_from_dict(doc),
        dataset=dataset,
        model=_section(ModelConfig, doc.get("model"), "model"),
        training=_section(TrainConfig, training, "training"),
        selection=selection,
        ga=_section(GaConfig, engines.get("ga"), "engines.ga"),
        ga_open_ended_epochs=int(engines.get("ga_open_ended_epochs", 60)),
        evo=_section(EvoConfig, engines.get("evo"), "engines.evo"),
        greedy=_section(GreedyConfig, engines.get("greedy"), "engines.greedy"),
    )
    return cfg.with_seed(cfg.seed)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    ds = asdict(cfg.dataset)
    if ds["node_providers"] is not None:
        ds["node_providers"] = {str(k): v for k, v in ds["node_providers"].items()}
    for k, v in ds.items():
        if isinstance(v, tuple):
            ds[k] = list(v)
    training = asdict(cfg.training)
    training["selection"] = cfg.selection
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "seed": cfg.seed,
        **scenario_to_dict(cfg.scenario),
        "dataset": ds,
        "model": {"hidden": list(cfg.model.hidden), "activation": cfg.model.activation},
        "training": training,
        "engines": {
            "ga": asdict(cfg.ga),
            "ga_open_ended_epochs": cfg.ga_open_ended_epochs,
            "evo": asdict(cfg.evo),
            "greedy": asdict(cfg.greedy),
        },
    }
    return doc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return config_from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n")
    return path


# --------------------------------------------------------------------------
# Default desk scenario

DESK_FEDERATIONS = 8
DESK_NODE_BLOCKS = (56, 36, 20, 14, 10, 8, 8, 8)
DESK_NOISE = 0.05


def desk_config(seed: int = 0, *, n_users: int = 60, n_nodes: int = 160, n_scenario_users: int = 60) -> ExperimentConfig:
    """The default 8-federation experiment on synthetic WS-Dream-like data.

    Eight fog providers each own one block of the dataset's nodes (the
    blocks double as federated-learning clients) and deploy a few of those
    nodes as servers.  Users are the dataset's first ``n_scenario_users``
    users; every provider sells two applications.  Capacity is scarce (one
    or two requests per server against one to three requests per user), so
    which servers share a federation matters.
    """
    if sum(DESK_NODE_BLOCKS) != n_nodes:
        raise ValueError(f"desk node blocks cover {sum(DESK_NODE_BLOCKS)} nodes, not {n_nodes}")
    data = synthesize(seed, n_users, n_nodes, noise=DESK_NOISE)
    rng = np.random.default_rng([seed, 101])
    providers = []
    servers = []
    start = 0
    sid = 1
    for p, block in enumerate(DESK_NODE_BLOCKS):
        nodes = np.arange(start, start + block)
        start += block
        k = int(rng.integers(3, 6))
        chosen = np.sort(rng.choice(nodes, size=k, replace=False))
        ids = []
        for node in chosen:
            lat, lon = data.node_coords[node]
            servers.append(Server(sid, p + 1, float(lat), float(lon), int(rng.integers(1, 3)), int(node)))
            ids.append(sid)
            sid += 1
        providers.append(Provider(p + 1, tuple(ids)))

    apps = []
    for p in range(len(DESK_NODE_BLOCKS)):
        for _ in range(2):
            apps.append(Application(len(apps) + 1, p + 1, float(rng.integers(10, 31))))
    users = []
    for u in range(n_scenario_users):
        lat, lon = data.user_coords[u]
        k = int(rng.integers(1, 4))
        wanted = tuple(sorted(int(a) + 1 for a in rng.choice(len(apps), size=k, replace=False)))
        users.append(User(u + 1, float(lat), float(lon), wanted, u))

    # thresholds from the distance model: a request is satisfied when served reasonably close
    d = haversine_km(
        np.array([u.lat for u in users])[:, None], np.array([u.lon for u in users])[:, None],
        np.array([s.lat for s in servers])[None, :], np.array([s.lon for s in servers])[None, :],
    )
    econ = EconomicModel(
        oc_unit=0.5,
        tc_unit=0.2,
        sigma_floor=0.0,
        rt_sla=round(float(np.quantile(synthetic_rt(d), 0.3)), 4),
        tp_sla=round(float(np.quantile(synthetic_tp(d), 0.5)), 4),
    )
    scenario = Scenario(providers, servers, apps, users, DESK_FEDERATIONS, econ)
    cfg = ExperimentConfig(
        name="desk",
        seed=seed,
        scenario=scenario,
        dataset=DatasetConfig(
            source="synthetic", n_users=n_users, n_nodes=n_nodes, noise=DESK_NOISE, seed=seed,
            node_blocks=DESK_NODE_BLOCKS,
        ),
        model=ModelConfig(hidden=(32, 16)),
        training=TrainConfig(learning_rate=0.3, local_epochs=2, batch_size=32, rounds=60, clients_per_round=3),
        # keep evolving after convergence so the trace shows the plateau
        evo=EvoConfig(stop_on_convergence=False),
    )
    return cfg.with_seed(seed)
