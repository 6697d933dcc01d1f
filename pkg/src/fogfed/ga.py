"""Genetic federation formation over integer-encoded server assignments.

A chromosome lists one federation index (1..m) per server, in ascending
server-id order.  Fitness is total federation utility with a fairness
penalty on the spread of federation utilities.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from fogfed.domain import FormationModel, Scenario, StrategyProfile, fairness_fitness, profile_from_genes

ROULETTE_EPS = 1e-6


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 30
    mutation_rate: float = 0.05
    lambda_fairness: float = 0.5
    max_generations: int = 200
    stall_generations: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.lambda_fairness < 0 or self.max_generations < 1 or self.stall_generations < 1:
            raise ValueError("invalid GA configuration")


def encode(profile: StrategyProfile, scenario: Scenario | None = None) -> tuple[int, ...]:
    ids = sorted(profile.assignment) if scenario is None else scenario.server_ids
    if scenario is not None and set(ids) != set(profile.assignment):
        raise ValueError("profile does not cover the scenario's servers")
    genes = tuple(int(profile.assignment[s]) for s in ids)
    bad = [g for g in genes if not 1 <= g <= profile.m]
    if bad:
        raise ValueError(f"genes outside 1..{profile.m}: {bad}")
    return genes


def decode(chromosome: Sequence[int], server_ids: Sequence[int] | Scenario, m: int | None = None) -> StrategyProfile:
    if isinstance(server_ids, Scenario):
        return profile_from_genes(chromosome, server_ids)
    if m is None:
        raise ValueError("m is required when decoding against a plain server id list")
    ids = sorted(server_ids)
    if len(chromosome) != len(ids):
        raise ValueError(f"chromosome length {len(chromosome)} != server count {len(ids)}")
    for g in chromosome:
        if not 1 <= g <= m:
            raise ValueError(f"gene {g} outside 1..{m}")
    return StrategyProfile({s: int(g) for s, g in zip(ids, chromosome)}, m)


def fitness(chromosome, model: FormationModel, lambda_fairness: float) -> float:
    return fairness_fitness(model.evaluate(chromosome).federation_utilities, lambda_fairness)


def roulette_weights(fitnesses, eps: float = ROULETTE_EPS) -> np.ndarray:
    f = np.asarray(fitnesses, dtype=float)
    return f - f.min() + eps


def roulette_select(population: Sequence, fitnesses, rng: np.random.Generator, eps: float = ROULETTE_EPS):
    """Pick one individual with probability proportional to its min-shifted fitness."""
    if len(population) == 0:
        raise ValueError("empty population")
    w = roulette_weights(fitnesses, eps)
    i = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
    return population[min(i, len(population) - 1)]


def crossover(a: Sequence, b: Sequence, rng: np.random.Generator, point: int | None = None) -> tuple[tuple, tuple]:
    """Single-point crossover; children swap the suffixes starting at ``point``."""
    if len(a) != len(b):
        raise ValueError("parents must have equal length")
    n = len(a)
    if n < 2:
        return tuple(a), tuple(b)
    p = int(rng.integers(1, n)) if point is None else point
    if not 1 <= p <= n - 1:
        raise ValueError(f"crossover point {p} outside [1, {n - 1}]")
    return tuple(a[:p]) + tuple(b[p:]), tuple(b[:p]) + tuple(a[p:])


def mutate(chromosome: Sequence[int], rate: float, m: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Resample each gene with probability ``rate`` uniformly among the other m-1 federations."""
    g = np.asarray(chromosome, dtype=np.int64)
    hit = rng.random(g.size) < rate
    shift = rng.integers(1, m, size=g.size) if m > 1 else np.zeros(g.size, dtype=np.int64)
    if m > 1:
        g = np.where(hit, (g - 1 + shift) % m + 1, g)
    return tuple(int(x) for x in g)


def random_chromosome(n: int, m: int, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(x) for x in rng.integers(1, m + 1, size=n))


@dataclass
class GaResult:
    best: StrategyProfile
    best_genes: tuple[int, ...]
    best_fitness: float
    history: list[dict]
    population: list[tuple[int, ...]]


def _sorted_unique(pool, fit):
    seen = set()
    ranked = []
    for chrom in sorted(pool, key=lambda c: -fit(c)):  # sorted() is stable
        if chrom not in seen:
            seen.add(chrom)
            ranked.append(chrom)
    return ranked


def _initial_population(model, config, rng, initial_population):
    pop = [tuple(int(g) for g in c) for c in (initial_population or [])]
    for c in pop:
        if len(c) != model.n_servers or any(not 1 <= g <= model.m for g in c):
            raise ValueError(f"invalid initial chromosome {c}")
    while len(pop) < config.population_size:
        pop.append(random_chromosome(model.n_servers, model.m, rng))
    return pop


def _history_row(gen, population, fit, model):
    fits = [fit(c) for c in population]
    best = population[0]
    return {
        "generation": gen,
        "best_fitness": fits[0],
        "mean_fitness": float(np.mean(fits)),
        "federation_utilities": model.evaluate(best).federation_utilities.tolist(),
        "genes": best,
    }


def breed(population, fits, model, config, rng):
    """One round of roulette-paired single-point crossover plus mutation."""
    children = []
    for _ in range((len(population) + 1) // 2):
        a = roulette_select(population, fits, rng)
        b = roulette_select(population, fits, rng)
        c1, c2 = crossover(a, b, rng)
        children.append(mutate(c1, config.mutation_rate, model.m, rng))
        children.append(mutate(c2, config.mutation_rate, model.m, rng))
    return children


def run_ga(model: FormationModel, config: GaConfig, initial_population=None) -> GaResult:
    """Evolve server assignments; survivors are the fittest distinct members of parents plus children.

    Stops after ``max_generations`` or once the best fitness has not improved
    for ``stall_generations`` generations.
    """
    rng = np.random.default_rng([config.seed, 7])

    def fit(c):
        return fitness(c, model, config.lambda_fairness)

    pop = _sorted_unique(_initial_population(model, config, rng, initial_population), fit)
    pop = pop[: config.population_size]
    history = [_history_row(0, pop, fit, model)]
    best = fit(pop[0])
    stall = 0
    for gen in range(1, config.max_generations + 1):
        fits = [fit(c) for c in pop]
        children = breed(pop, fits, model, config, rng)
        pop = _sorted_unique(pop + children, fit)[: config.population_size]
        history.append(_history_row(gen, pop, fit, model))
        now = fit(pop[0])
        if now > best + 1e-12:
            best = now
            stall = 0
        else:
            stall += 1
            if stall >= config.stall_generations:
                break
    return GaResult(model.profile(pop[0]), pop[0], fit(pop[0]), history, pop)


def run_ga_open_ended(model: FormationModel, config: GaConfig, epochs: int, initial_population=None) -> GaResult:
    """GA without a stabilizer: every epoch breeds and then keeps survivors by roulette.

    Survivors are drawn by fitness-proportional sampling rather than
    truncation, so the reported fittest member keeps moving as the operators
    continue to act.
    """
    rng = np.random.default_rng([config.seed, 11])

    def fit(c):
        return fitness(c, model, config.lambda_fairness)

    pop = _sorted_unique(_initial_population(model, config, rng, initial_population), fit)
    pop = pop[: config.population_size]
    history = [_history_row(0, pop, fit, model)]
    for epoch in range(1, epochs + 1):
        fits = [fit(c) for c in pop]
        pool = pop + breed(pop, fits, model, config, rng)
        pool_fits = [fit(c) for c in pool]
        survivors = [roulette_select(pool, pool_fits, rng) for _ in range(config.population_size)]
        pop = _sorted_unique(survivors, fit)
        history.append(_history_row(epoch, pop, fit, model))
    return GaResult(model.profile(pop[0]), pop[0], fit(pop[0]), history, pop)
