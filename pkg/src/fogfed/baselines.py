"""Comparison engines: K-means seeding, simultaneous greedy best response, centralized training."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fogfed.domain import STRICT_MARGIN, FormationModel, Scenario, StrategyProfile
from fogfed.fl import Client, EvalReport, ModelParams, ModelSpec, TrainConfig, run_federated_training
from fogfed.geo import map_lat, map_lon

KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class GreedyConfig:
    max_rounds: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


def kmeans_labels(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm from k distinct random points; returns 0-based labels."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    centers = pts[rng.choice(n, size=k, replace=False)].copy()
    labels = np.full(n, -1)
    for _ in range(KMEANS_MAX_ITER):
        d = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d.argmin(axis=1)
        new = _refill_empty(pts, new, centers, k)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = pts[labels == j].mean(axis=0)
    return labels


def _refill_empty(pts, labels, centers, k):
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((pts[members] - centers[big]) ** 2).sum(axis=1))]
        labels[far] = j
    return labels


def kmeans_init(scenario: Scenario, m: int | None = None, seed: int = 0) -> StrategyProfile:
    """Cluster servers by mapped location; cluster j becomes federation j+1."""
    m = scenario.m if m is None else m
    pts = np.column_stack([
        map_lat([s.lat for s in scenario.servers]),
        map_lon([s.lon for s in scenario.servers]),
    ])
    labels = kmeans_labels(pts, m, seed)
    return StrategyProfile({s.id: int(l) + 1 for s, l in zip(scenario.servers, labels)}, scenario.m)


def best_server_move(genes, model: FormationModel, p_idx: int, s: int) -> int:
    """Best federation for server position ``s`` with all else fixed; the incumbent wins ties."""
    incumbent = genes[s]
    best_u = model.evaluate(genes).provider_utilities[p_idx]
    best = incumbent
    for target in range(1, model.m + 1):
        if target == incumbent:
            continue
        moved = genes[:s] + (target,) + genes[s + 1:]
        u = model.evaluate(moved).provider_utilities[p_idx]
        if u > best_u + STRICT_MARGIN:
            best_u = u
            best = target
    return best


def greedy_round(genes, model: FormationModel) -> tuple[int, ...]:
    """Every provider best-responds per server against the current profile; all moves land together."""
    genes = tuple(int(g) for g in genes)
    nxt = list(genes)
    for p_idx in range(len(model.providers)):
        for s in model.provider_servers[p_idx]:
            nxt[s] = best_server_move(genes, model, p_idx, int(s))
    return tuple(nxt)


@dataclass
class GreedyResult:
    profiles: list[tuple[int, ...]]
    utilities: list[list[float]]

    @property
    def final(self) -> tuple[int, ...]:
        return self.profiles[-1]


def run_greedy(model: FormationModel, config: GreedyConfig, initial=None) -> GreedyResult:
    if initial is None:
        initial = model.genes(kmeans_init(model.scenario, model.m, config.seed))
    genes = tuple(int(g) for g in initial)
    profiles = [genes]
    utilities = [model.evaluate(genes).federation_utilities.tolist()]
    for _ in range(config.max_rounds):
        genes = greedy_round(genes, model)
        profiles.append(genes)
        utilities.append(model.evaluate(genes).federation_utilities.tolist())
    return GreedyResult(profiles, utilities)


def centralized_train(X, y, spec: ModelSpec, config: TrainConfig, test=None) -> tuple[ModelParams, EvalReport]:
    """Pooled-data reference: the federated machinery with a single client holding everything."""
    return run_federated_training(
        [Client(0, X, y)], spec, replace(config, clients_per_round=1),
        selection="uniform", test=test,
    )
