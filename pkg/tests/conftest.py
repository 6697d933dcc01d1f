from __future__ import annotations

import itertools
import sys

import numpy as np
import pytest

from fogfed.domain import (
    Application,
    EconomicModel,
    FormationModel,
    Provider,
    Scenario,
    Server,
    TableOracle,
    User,
)


def build_scenario(servers, apps, users, m, econ=None):
    """servers: (id, provider, capacity[, lat, lon]); apps: (id, provider, payment); users: (id, app ids)."""
    srv = []
    owned: dict[int, list[int]] = {}
    for row in servers:
        sid, pid, cap = row[:3]
        lat, lon = (row[3], row[4]) if len(row) > 3 else (0.0, 0.0)
        srv.append(Server(sid, pid, lat, lon, cap))
        owned.setdefault(pid, []).append(sid)
    providers = [Provider(pid, tuple(ids)) for pid, ids in owned.items()]
    applications = [Application(*a) for a in apps]
    us = [User(uid, 0.0, 0.0, tuple(a)) for uid, a in users]
    return Scenario(providers, srv, applications, us, m, econ or EconomicModel())


def table_oracle(rt: dict, tp: dict | None = None, default_tp=100.0):
    tp = dict(tp or {})
    for k in rt:
        tp.setdefault(k, default_tp)
    return TableOracle(rt, tp)


def random_instance(seed: int, n_servers=None, m=None, n_providers=None):
    """Small random scenario plus a table oracle, for property and brute-force tests."""
    rng = np.random.default_rng(seed)
    n_servers = n_servers or int(rng.integers(2, 8))
    m = m or int(rng.integers(1, 4))
    n_providers = n_providers or int(rng.integers(1, min(n_servers, 4) + 1))
    owner = list(range(1, n_providers + 1)) + [int(x) for x in rng.integers(1, n_providers + 1, n_servers - n_providers)]
    servers = [(i + 1, owner[i], int(rng.integers(1, 4))) for i in range(n_servers)]
    apps = [(a + 1, int(rng.integers(1, n_providers + 1)), float(rng.integers(5, 30))) for a in range(int(rng.integers(1, 5)))]
    users = []
    for u in range(int(rng.integers(1, 7))):
        k = int(rng.integers(1, len(apps) + 1))
        users.append((u + 1, tuple(int(a) + 1 for a in rng.choice(len(apps), size=k, replace=False))))
    econ = EconomicModel(
        oc_unit=float(rng.uniform(0, 2)), tc_unit=float(rng.uniform(0, 1)),
        sigma_floor=float(rng.choice([0.0, 0.2])), rt_sla=0.5, tp_sla=50.0,
    )
    sc = build_scenario(servers, apps, users, m, econ)
    rt = {(u, s): float(rng.uniform(0.1, 1.0)) for u, _ in users for s, *_ in servers}
    tp = {(u, s): float(rng.uniform(10, 100)) for u, _ in users for s, *_ in servers}
    return sc, TableOracle(rt, tp)


def all_chromosomes(n, m):
    return itertools.product(range(1, m + 1), repeat=n)


@pytest.fixture
def utility_fixture():
    """Two apps paying 10 in one federation; two servers with OC 3 and one routed request each.

    App 1's single request is satisfied (sigma 1).  App 2's request misses the
    throughput threshold, and sigma_floor 0.5 lifts its discount to 0.5.
    Expected federation utility: 10 + 5 - (3 + 1) - (3 + 1) = 7.
    """
    econ = EconomicModel(oc_unit=1.0, tc_unit=1.0, sigma_floor=0.5, rt_sla=0.5, tp_sla=50.0)
    sc = build_scenario(
        servers=[(1, 1, 3), (2, 1, 3)],
        apps=[(1, 1, 10.0), (2, 1, 10.0)],
        users=[(1, (1,)), (2, (2,))],
        m=1, econ=econ,
    )
    oracle = TableOracle(
        {(1, 1): 0.1, (1, 2): 0.4, (2, 1): 0.3, (2, 2): 0.2},
        {(1, 1): 80.0, (1, 2): 80.0, (2, 1): 80.0, (2, 2): 10.0},
    )
    return sc, oracle


@pytest.fixture
def model_factory():
    def make(sc, oracle):
        return FormationModel(sc, oracle)
    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.summary_lines():
            terminalreporter.write_line(line)
