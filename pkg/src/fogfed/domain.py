"""Fog federation entities and the utility model.

A strategy profile assigns every fog server to one of ``m`` federations.
Given a profile and a QoS oracle, applications are allocated to federations,
requests are routed to servers, and each federation earns discounted
application payments minus operating and traffic costs.  Provider utilities
split every federation's utility by server headcount.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from fogfed.geo import haversine_km

# Improvements smaller than this are treated as ties everywhere a strict
# comparison between utilities is made.
STRICT_MARGIN = 1e-9


@dataclass(frozen=True)
class Server:
    id: int
    provider_id: int
    lat: float
    lon: float
    capacity: int
    node_id: int | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"server {self.id}: capacity must be >= 1")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"server {self.id}: location out of range")


@dataclass(frozen=True)
class Provider:
    id: int
    server_ids: tuple[int, ...]


@dataclass(frozen=True)
class Application:
    id: int
    provider_id: int
    payment: float

    def __post_init__(self):
        if self.payment < 0:
            raise ValueError(f"application {self.id}: payment must be >= 0")


@dataclass(frozen=True)
class User:
    id: int
    lat: float
    lon: float
    app_ids: tuple[int, ...] = ()
    dataset_user_id: int | None = None


@dataclass(frozen=True)
class EconomicModel:
    oc_unit: float = 1.0
    tc_unit: float = 0.5
    sigma_floor: float = 0.0
    rt_sla: float = 1.0
    tp_sla: float = 0.0

    def __post_init__(self):
        for name in ("oc_unit", "tc_unit", "sigma_floor", "rt_sla", "tp_sla"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_floor > 1:
            raise ValueError("sigma_floor must be <= 1")


@dataclass(frozen=True)
class StrategyProfile:
    """Server -> federation assignment; federation indices are 1-based."""

    assignment: Mapping[int, int]
    m: int

    def federation(self, j: int) -> list[int]:
        return sorted(s for s, f in self.assignment.items() if f == j)

    def federations(self) -> dict[int, list[int]]:
        return {j: self.federation(j) for j in range(1, self.m + 1)}


class QosOracle(Protocol):
    def predict(self, user: User, server: Server) -> tuple[float, float]:
        """Predicted (response time, throughput) for a request of ``user`` served by ``server``."""


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    """Topology, economics and federation count of one experiment."""

    providers: list[Provider]
    servers: list[Server]
    applications: list[Application]
    users: list[User]
    m: int
    economics: EconomicModel = field(default_factory=EconomicModel)

    def __post_init__(self):
        self.providers = sorted(self.providers, key=lambda p: p.id)
        self.servers = sorted(self.servers, key=lambda s: s.id)
        self.applications = sorted(self.applications, key=lambda a: a.id)
        self.users = sorted(self.users, key=lambda u: u.id)
        self.check()

    def check(self) -> None:
        if self.m < 1:
            raise ScenarioError("federation count m must be >= 1")
        server_by_id = {}
        for s in self.servers:
            if s.id in server_by_id:
                raise ScenarioError(f"duplicate server id {s.id}")
            server_by_id[s.id] = s
        provider_ids = set()
        for p in self.providers:
            if p.id in provider_ids:
                raise ScenarioError(f"duplicate provider id {p.id}")
            provider_ids.add(p.id)
            if not p.server_ids:
                raise ScenarioError(f"provider {p.id} has no servers")
            for sid in p.server_ids:
                if sid not in server_by_id:
                    raise ScenarioError(f"provider {p.id} references unknown server {sid}")
                if server_by_id[sid].provider_id != p.id:
                    raise ScenarioError(f"server {sid} does not belong to provider {p.id}")
        listed = sorted(sid for p in self.providers for sid in p.server_ids)
        if listed != sorted(server_by_id):
            raise ScenarioError("provider server lists must cover every server exactly once")
        app_ids = set()
        for a in self.applications:
            if a.id in app_ids:
                raise ScenarioError(f"duplicate application id {a.id}")
            app_ids.add(a.id)
            if a.provider_id not in provider_ids:
                raise ScenarioError(f"application {a.id} contracted to unknown provider {a.provider_id}")
        user_ids = set()
        for u in self.users:
            if u.id in user_ids:
                raise ScenarioError(f"duplicate user id {u.id}")
            user_ids.add(u.id)
            for aid in u.app_ids:
                if aid not in app_ids:
                    raise ScenarioError(f"user {u.id} requests unknown application {aid}")

    @property
    def server_ids(self) -> list[int]:
        return [s.id for s in self.servers]

    def server(self, server_id: int) -> Server:
        for s in self.servers:
            if s.id == server_id:
                return s
        raise KeyError(server_id)

    def requests(self) -> list[tuple[int, int]]:
        """All (user id, app id) requests, in routing order."""
        return [(u.id, a) for u in self.users for a in sorted(set(u.app_ids))]

    def app_users(self, app_id: int) -> list[int]:
        return [u.id for u in self.users if app_id in u.app_ids]


# --------------------------------------------------------------------------
# Oracles


class TableOracle:
    """Oracle backed by explicit per-(user id, server id) predictions."""

    def __init__(self, rt: Mapping[tuple[int, int], float], tp: Mapping[tuple[int, int], float]):
        self.rt = dict(rt)
        self.tp = dict(tp)

    def predict(self, user, server):
        key = (user.id, server.id)
        return float(self.rt[key]), float(self.tp[key])


class DistanceOracle:
    """Distance-driven QoS: response time grows and throughput decays with distance."""

    def __init__(self, base_rt=0.05, rt_per_km=0.5e-3, max_tp=100.0, tp_scale_km=1000.0):
        self.base_rt = base_rt
        self.rt_per_km = rt_per_km
        self.max_tp = max_tp
        self.tp_scale_km = tp_scale_km

    def predict(self, user, server):
        d = float(haversine_km(user.lat, user.lon, server.lat, server.lon))
        return self.base_rt + self.rt_per_km * d, self.max_tp / (1.0 + d / self.tp_scale_km)


# --------------------------------------------------------------------------
# Profile checks


def validate_profile(profile: StrategyProfile, scenario: Scenario) -> list[str]:
    """Return the list of partition violations; an empty list means the profile is valid."""
    problems = []
    if profile.m != scenario.m:
        problems.append(f"profile has m={profile.m}, scenario has m={scenario.m}")
    known = set(scenario.server_ids)
    for sid in scenario.server_ids:
        if sid not in profile.assignment:
            problems.append(f"server {sid} is not assigned to any federation")
    for sid, f in profile.assignment.items():
        if sid not in known:
            problems.append(f"unknown server {sid} in assignment")
        if not isinstance(f, (int, np.integer)) or not 1 <= f <= scenario.m:
            problems.append(f"server {sid} assigned to out-of-range federation {f}")
    return problems


def profile_from_genes(genes: Sequence[int], scenario: Scenario) -> StrategyProfile:
    ids = scenario.server_ids
    if len(genes) != len(ids):
        raise ValueError(f"expected {len(ids)} genes, got {len(genes)}")
    return StrategyProfile({sid: int(g) for sid, g in zip(ids, genes)}, scenario.m)


def genes_from_profile(profile: StrategyProfile, scenario: Scenario) -> tuple[int, ...]:
    problems = validate_profile(profile, scenario)
    if problems:
        raise ValueError("; ".join(problems))
    return tuple(int(profile.assignment[sid]) for sid in scenario.server_ids)


# --------------------------------------------------------------------------
# Fast evaluation


@dataclass(frozen=True)
class Routed:
    server_id: int | None
    rt: float | None
    tp: float | None
    satisfied: bool


@dataclass(frozen=True)
class Evaluation:
    genes: tuple[int, ...]
    federation_utilities: np.ndarray  # (m,), index j-1 for federation j
    provider_utilities: np.ndarray  # aligned with scenario.providers
    app_federation: dict[int, int]
    sigma: dict[int, float]
    assigned: tuple[int, ...]  # per request: server position or -1
    satisfied_rt: tuple[bool, ...]
    satisfied_tp: tuple[bool, ...]

    @property
    def welfare(self) -> float:
        return float(self.federation_utilities.sum())


class FormationModel:
    """A scenario bound to a QoS oracle, with cached profile evaluation.

    Every formation engine goes through :meth:`evaluate`; results are cached
    by chromosome so repeated fitness queries are free.
    """

    def __init__(self, scenario: Scenario, oracle, econ: EconomicModel | None = None, cache_size=200_000):
        self.scenario = scenario
        self.econ = econ if econ is not None else scenario.economics
        self.m = scenario.m
        self.servers = scenario.servers
        self.server_ids = scenario.server_ids
        self.server_pos = {sid: i for i, sid in enumerate(self.server_ids)}
        self.n_servers = len(self.servers)
        self.capacity = [s.capacity for s in self.servers]
        self.providers = scenario.providers
        prov_pos = {p.id: i for i, p in enumerate(self.providers)}
        self.server_provider = np.array([prov_pos[s.provider_id] for s in self.servers], dtype=np.int64)
        self.provider_servers = [
            np.array(sorted(self.server_pos[sid] for sid in p.server_ids), dtype=np.int64)
            for p in self.providers
        ]
        self.apps = scenario.applications
        self.app_pos = {a.id: i for i, a in enumerate(self.apps)}
        self.app_provider = [prov_pos[a.provider_id] for a in self.apps]
        self.payment = [float(a.payment) for a in self.apps]

        users = scenario.users
        self.user_pos = {u.id: i for i, u in enumerate(users)}
        self.requests = scenario.requests()
        self.req_user = [self.user_pos[u] for u, _ in self.requests]
        self.req_app = [self.app_pos[a] for _, a in self.requests]
        self.app_requests = [0] * len(self.apps)
        for a in self.req_app:
            self.app_requests[a] += 1

        rt, tp = qos_tables(scenario, oracle)
        self.rt = rt
        self.tp = tp
        self._rt_rows = rt.tolist()
        self._ok_rt = (rt <= self.econ.rt_sla).tolist()
        self._ok_tp = (tp >= self.econ.tp_sla).tolist()
        self.fixed_cost = [self.econ.oc_unit * c for c in self.capacity]
        self._cache: dict[tuple[int, ...], Evaluation] = {}
        self._cache_size = cache_size
        self.evaluations = 0

    def genes(self, profile: StrategyProfile) -> tuple[int, ...]:
        return genes_from_profile(profile, self.scenario)

    def profile(self, genes: Sequence[int]) -> StrategyProfile:
        return profile_from_genes(genes, self.scenario)

    def evaluate(self, genes) -> Evaluation:
        key = tuple(int(g) for g in genes)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if len(key) != self.n_servers or any(not 1 <= g <= self.m for g in key):
            raise ValueError(f"invalid chromosome {key!r} for {self.n_servers} servers, m={self.m}")
        ev = self._evaluate(key)
        if len(self._cache) >= self._cache_size:
            self._cache.clear()
        self._cache[key] = ev
        return ev

    def _evaluate(self, genes: tuple[int, ...]) -> Evaluation:
        self.evaluations += 1
        m = self.m
        g = np.asarray(genes, dtype=np.int64)
        n_prov = len(self.providers)
        counts = np.zeros((m, n_prov), dtype=np.int64)
        np.add.at(counts, (g - 1, self.server_provider), 1)

        # plurality federation per provider, lowest index on ties
        prov_fed = [int(np.argmax(counts[:, p])) + 1 for p in range(n_prov)]
        app_fed = [prov_fed[p] for p in self.app_provider]

        fed_servers: list[list[int]] = [[] for _ in range(m + 1)]
        for pos, f in enumerate(genes):
            fed_servers[f].append(pos)

        remaining = list(self.capacity)
        served = [0] * self.n_servers
        assigned = []
        sat_rt = []
        sat_tp = []
        app_sat = [0] * len(self.apps)
        for u, a in zip(self.req_user, self.req_app):
            row = self._rt_rows[u]
            best = -1
            best_rt = 0.0
            for s in fed_servers[app_fed[a]]:
                if remaining[s] > 0 and (best < 0 or row[s] < best_rt):
                    best = s
                    best_rt = row[s]
            assigned.append(best)
            if best < 0:
                sat_rt.append(False)
                sat_tp.append(False)
                continue
            remaining[best] -= 1
            served[best] += 1
            ok_rt = self._ok_rt[u][best]
            ok_tp = self._ok_tp[u][best]
            sat_rt.append(ok_rt)
            sat_tp.append(ok_tp)
            if ok_rt and ok_tp:
                app_sat[a] += 1

        floor = self.econ.sigma_floor
        sigma = []
        for a in range(len(self.apps)):
            total = self.app_requests[a]
            sigma.append(1.0 if total == 0 else max(floor, app_sat[a] / total))

        util = [0.0] * m
        for a in range(len(self.apps)):
            util[app_fed[a] - 1] += sigma[a] * self.payment[a]
        tc = self.econ.tc_unit
        for pos, f in enumerate(genes):
            util[f - 1] -= self.fixed_cost[pos] + tc * served[pos]
        fed_util = np.array(util, dtype=float)

        n_f = counts.sum(axis=1)
        prov_util = np.zeros(n_prov, dtype=float)
        for j in range(m):
            if n_f[j] == 0:
                continue
            for p in range(n_prov):
                if counts[j, p]:
                    prov_util[p] += counts[j, p] / n_f[j] * fed_util[j]

        return Evaluation(
            genes=genes,
            federation_utilities=fed_util,
            provider_utilities=prov_util,
            app_federation={app.id: app_fed[i] for i, app in enumerate(self.apps)},
            sigma={app.id: sigma[i] for i, app in enumerate(self.apps)},
            assigned=tuple(assigned),
            satisfied_rt=tuple(sat_rt),
            satisfied_tp=tuple(sat_tp),
        )

    def routing_plan(self, genes) -> dict[tuple[int, int], Routed]:
        ev = self.evaluate(genes)
        plan = {}
        for (uid, aid), u, s, ok_rt, ok_tp in zip(
            self.requests, self.req_user, ev.assigned, ev.satisfied_rt, ev.satisfied_tp
        ):
            if s < 0:
                plan[(uid, aid)] = Routed(None, None, None, False)
            else:
                plan[(uid, aid)] = Routed(
                    self.server_ids[s], float(self.rt[u, s]), float(self.tp[u, s]), bool(ok_rt and ok_tp)
                )
        return plan

    def satisfaction(self, genes) -> tuple[float, float]:
        """Percent of all requests meeting the RT and TP thresholds; unserved requests count as missed."""
        ev = self.evaluate(genes)
        n = len(self.requests)
        if n == 0:
            return 100.0, 100.0
        return 100.0 * sum(ev.satisfied_rt) / n, 100.0 * sum(ev.satisfied_tp) / n


def qos_tables(scenario: Scenario, oracle) -> tuple[np.ndarray, np.ndarray]:
    """Predicted (user x server) response-time and throughput matrices."""
    if hasattr(oracle, "predict_matrix"):
        rt, tp = oracle.predict_matrix(scenario.users, scenario.servers)
        rt = np.asarray(rt, dtype=float)
        tp = np.asarray(tp, dtype=float)
    else:
        rt = np.empty((len(scenario.users), len(scenario.servers)))
        tp = np.empty_like(rt)
        for i, u in enumerate(scenario.users):
            for j, s in enumerate(scenario.servers):
                rt[i, j], tp[i, j] = oracle.predict(u, s)
    if not (np.all(np.isfinite(rt)) and np.all(np.isfinite(tp)) and np.all(rt > 0) and np.all(tp > 0)):
        raise ValueError("oracle predictions must be finite and positive")
    return rt, tp


# --------------------------------------------------------------------------
# Functional API over profiles


def _bind(profile: StrategyProfile, scenario: Scenario, oracle, econ) -> tuple[FormationModel, tuple[int, ...]]:
    model = FormationModel(scenario, oracle, econ)
    return model, model.genes(profile)


def allocate_apps(profile: StrategyProfile, scenario: Scenario) -> dict[int, int]:
    """Each application goes to the federation holding most of its provider's servers."""
    problems = validate_profile(profile, scenario)
    if problems:
        raise ValueError("; ".join(problems))
    home = {}
    for p in scenario.providers:
        counts = [0] * (scenario.m + 1)
        for sid in p.server_ids:
            counts[profile.assignment[sid]] += 1
        home[p.id] = max(range(1, scenario.m + 1), key=lambda j: (counts[j], -j))
    return {a.id: home[a.provider_id] for a in scenario.applications}


def route_requests(profile, scenario, oracle, econ=None) -> dict[tuple[int, int], Routed]:
    model, genes = _bind(profile, scenario, oracle, econ)
    return model.routing_plan(genes)


def sigma(app_id: int, plan: Mapping[tuple[int, int], Routed], econ: EconomicModel) -> float:
    """Payment discount for an application: its clamped satisfied-request fraction."""
    mine = [r for (_, a), r in plan.items() if a == app_id]
    if not mine:
        return 1.0
    return max(econ.sigma_floor, sum(r.satisfied for r in mine) / len(mine))


def federation_utility(j: int, profile, scenario, oracle, econ=None) -> float:
    model, genes = _bind(profile, scenario, oracle, econ)
    return float(model.evaluate(genes).federation_utilities[j - 1])


def provider_utility(provider_id: int, profile, scenario, oracle, econ=None) -> float:
    model, genes = _bind(profile, scenario, oracle, econ)
    idx = [p.id for p in scenario.providers].index(provider_id)
    return float(model.evaluate(genes).provider_utilities[idx])


def welfare(profile, scenario, oracle, econ=None) -> float:
    model, genes = _bind(profile, scenario, oracle, econ)
    return model.evaluate(genes).welfare


def fairness_fitness(utilities: Iterable[float], lambda_fairness: float) -> float:
    """Total utility minus ``lambda_fairness`` times the population std of federation utilities."""
    u = np.asarray(list(utilities), dtype=float)
    if u.size == 0:
        return 0.0
    return float(u.sum() - lambda_fairness * u.std())
