"""Replicator-dynamics stabilizer over a population of strategy profiles."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from fogfed.domain import STRICT_MARGIN, FormationModel, StrategyProfile, fairness_fitness
from fogfed.ga import mutate

SHIFT_EPS = 1e-6


@dataclass(frozen=True)
class EvoConfig:
    population_size: int = 12
    epsilon_stationary: float = 1e-4
    stationary_window: int = 5
    max_generations: int = 500
    replication_strength: float = 10.0
    exploration_rate: float = 0.2
    dt: float = 0.1
    variant_mutation_rate: float = 0.1
    lambda_fairness: float = 0.5
    extinction_share: float = 1e-4
    move_budget: int = 100_000
    stop_on_convergence: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 1 or self.stationary_window < 1 or self.max_generations < 1:
            raise ValueError("invalid evolution configuration")
        if self.epsilon_stationary <= 0 or self.replication_strength <= 0 or self.dt <= 0:
            raise ValueError("epsilon_stationary, replication_strength and dt must be positive")
        if not 0 <= self.exploration_rate <= 1:
            raise ValueError("exploration_rate must lie in [0, 1]")
        if not 0 <= self.extinction_share < 1:
            raise ValueError("extinction_share must lie in [0, 1)")


@dataclass
class Population:
    individuals: list[tuple[int, ...]]
    shares: np.ndarray

    def __post_init__(self):
        self.shares = np.asarray(self.shares, dtype=float)
        if len(self.individuals) != len(self.shares):
            raise ValueError("one share per individual required")
        if len(set(self.individuals)) != len(self.individuals):
            raise ValueError("individuals must be distinct")
        if np.any(self.shares < 0) or abs(self.shares.sum() - 1.0) > 1e-9:
            raise ValueError("shares must lie on the simplex")

    def dominant(self) -> int:
        return int(np.argmax(self.shares))


@dataclass(frozen=True)
class Deviation:
    provider_id: int
    server_id: int
    from_federation: int
    to_federation: int
    gain: float


@dataclass
class NashResult:
    passed: bool
    deviation: Deviation | None = None
    moves_checked: int = 0
    exhaustive: bool = True


@dataclass
class StabilityReport:
    converged: bool
    generation_of_convergence: int | None
    deviation_check: NashResult | None
    churn: list[int] = field(default_factory=list)


@dataclass
class EvoResult:
    profile: StrategyProfile
    genes: tuple[int, ...]
    report: StabilityReport
    trace: list[dict]


def population_fitness(population: Population, model: FormationModel, lambda_fairness: float):
    """Per-individual fairness fitness and the share-weighted population average."""
    f = np.array(
        [fairness_fitness(model.evaluate(g).federation_utilities, lambda_fairness) for g in population.individuals]
    )
    return f, float(np.dot(population.shares, f))


def replicator_step(shares, fitnesses, dt: float) -> np.ndarray:
    """Euler step of x_i' = x_i + dt * x_i * (f_i - v), clamped at zero and renormalized."""
    x = np.asarray(shares, dtype=float)
    f = np.asarray(fitnesses, dtype=float)
    if not np.any(x > 0):
        raise ValueError("all shares are zero")
    if np.all(f == f[0]):
        return x.copy()
    v = float(np.dot(x, f))
    nxt = np.maximum(x + dt * x * (f - v), 0.0)
    return nxt / nxt.sum()


def shifted_fitness(fitnesses, strength: float = 1.0) -> np.ndarray:
    """Map fitnesses into (0, strength]: shift by the minimum, scale by the range, add a small epsilon."""
    f = np.asarray(fitnesses, dtype=float)
    spread = f.max() - f.min()
    if spread == 0:
        return np.full_like(f, strength)
    return strength * ((f - f.min()) / spread + SHIFT_EPS)


def choose_donor(fitnesses, rng: np.random.Generator) -> int:
    w = np.asarray(fitnesses, dtype=float)
    w = w - w.min() + SHIFT_EPS
    return int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right").clip(0, len(w) - 1))


def imitate(recipient: Sequence[int], donor: Sequence[int], server_positions) -> tuple[int, ...]:
    """Copy one provider's whole per-server strategy from ``donor`` into ``recipient``."""
    out = list(recipient)
    for s in server_positions:
        out[s] = donor[s]
    return tuple(out)


def replicate_strategies(
    population: Population,
    fitnesses,
    rng: np.random.Generator,
    exploration_rate: float,
    provider_servers: Sequence[Sequence[int]] = (),
    dt: float = 0.1,
    strength: float = 1.0,
) -> Population:
    """Replicator update of the shares, then optional imitation by one below-average individual."""
    f = np.asarray(fitnesses, dtype=float)
    shares = replicator_step(population.shares, shifted_fitness(f, strength), dt)
    individuals = list(population.individuals)
    if len(individuals) > 1 and provider_servers and rng.random() < exploration_rate:
        v = float(np.dot(population.shares, f))
        below = [i for i in range(len(individuals)) if f[i] < v]
        if below:
            r = below[int(rng.integers(len(below)))]
            d = choose_donor(f, rng)
            p = int(rng.integers(len(provider_servers)))
            child = imitate(individuals[r], individuals[d], provider_servers[p])
            if child in individuals:
                # merging into the existing copy keeps individuals distinct
                j = individuals.index(child)
                if j != r:
                    shares[j] += shares[r]
                    del individuals[r]
                    shares = np.delete(shares, r)
            else:
                individuals[r] = child
    return Population(individuals, shares / shares.sum())


def prune_extinct(population: Population, threshold: float) -> Population:
    """Drop individuals whose share fell below ``threshold`` and renormalize the rest."""
    keep = [i for i, x in enumerate(population.shares) if x >= threshold]
    if len(keep) == len(population.individuals):
        return population
    if not keep:
        keep = [population.dominant()]
    shares = population.shares[keep]
    return Population([population.individuals[i] for i in keep], shares / shares.sum())


def check_strict_nash(genes, model: FormationModel, move_budget: int = 100_000) -> NashResult:
    """Look for a single-server reassignment that strictly raises its provider's utility.

    Providers, their servers and target federations are scanned in ascending
    order; the first move gaining more than the strictness margin is reported.
    """
    genes = tuple(int(g) for g in genes)
    base = model.evaluate(genes).provider_utilities
    checked = 0
    for p_idx, provider in enumerate(model.providers):
        for s in model.provider_servers[p_idx]:
            for target in range(1, model.m + 1):
                if target == genes[s]:
                    continue
                if checked >= move_budget:
                    return NashResult(True, None, checked, exhaustive=False)
                checked += 1
                moved = genes[:s] + (target,) + genes[s + 1:]
                gain = model.evaluate(moved).provider_utilities[p_idx] - base[p_idx]
                if gain > STRICT_MARGIN:
                    dev = Deviation(provider.id, model.server_ids[s], genes[s], target, float(gain))
                    return NashResult(False, dev, checked)
    return NashResult(True, None, checked)


def profitable_deviations(genes, model: FormationModel) -> list[Deviation]:
    """Every single-server move that strictly raises its provider's utility."""
    genes = tuple(int(g) for g in genes)
    base = model.evaluate(genes).provider_utilities
    out = []
    for p_idx, provider in enumerate(model.providers):
        for s in model.provider_servers[p_idx]:
            for target in range(1, model.m + 1):
                if target == genes[s]:
                    continue
                moved = genes[:s] + (target,) + genes[s + 1:]
                gain = model.evaluate(moved).provider_utilities[p_idx] - base[p_idx]
                if gain > STRICT_MARGIN:
                    out.append(Deviation(provider.id, model.server_ids[s], genes[s], target, float(gain)))
    return out


def choose_deviation(genes, model: FormationModel, lambda_fairness: float, visited=frozenset()) -> Deviation | None:
    """The profitable move whose resulting profile has the highest fairness fitness.

    A profitable deviation is a mutant able to invade; the fittest one takes
    over, as replication would favour it.  Unilateral improvement paths can
    cycle, so moves back to already visited profiles are skipped while any
    other exists.  Ties go to the larger gain, then to scan order.
    """
    devs = profitable_deviations(genes, model)
    if not devs:
        return None
    fresh = [d for d in devs if apply_deviation(genes, model, d) not in visited]
    best, best_key = None, None
    for d in fresh or devs:
        moved = apply_deviation(genes, model, d)
        key = (fairness_fitness(model.evaluate(moved).federation_utilities, lambda_fairness), d.gain)
        if best_key is None or key > best_key:
            best, best_key = d, key
    return best


def apply_deviation(genes, model: FormationModel, dev: Deviation) -> tuple[int, ...]:
    out = list(genes)
    out[model.server_pos[dev.server_id]] = dev.to_federation
    return tuple(out)


def churn(a, b) -> int:
    """Number of servers whose federation differs between two assignments (genes or profiles)."""
    if isinstance(a, StrategyProfile):
        if set(a.assignment) != set(b.assignment):
            raise ValueError("profiles cover different servers")
        return sum(1 for s in a.assignment if a.assignment[s] != b.assignment[s])
    if len(a) != len(b):
        raise ValueError("assignments have different lengths")
    return sum(1 for x, y in zip(a, b) if x != y)


def share_entropy(shares) -> float:
    x = np.asarray(shares, dtype=float)
    x = x[x > 0]
    return float(-(x * np.log(x)).sum())


def initial_population(seed_genes, model: FormationModel, config: EvoConfig, rng) -> Population:
    individuals = [tuple(int(g) for g in seed_genes)]
    attempts = 0
    while len(individuals) < config.population_size and attempts < 50 * config.population_size:
        attempts += 1
        variant = mutate(individuals[0], config.variant_mutation_rate, model.m, rng)
        if variant not in individuals:
            individuals.append(variant)
    return Population(individuals, np.full(len(individuals), 1.0 / len(individuals)))


def run_evolution(model: FormationModel, config: EvoConfig, seed_genes) -> EvoResult:
    """Stabilize a formation by replicator dynamics seeded from ``seed_genes``.

    Each generation evaluates the population, replicates successful profiles
    and lets one lagging individual imitate a provider strategy.  Once the
    largest share-change stays below ``epsilon_stationary`` for
    ``stationary_window`` generations, the dominant profile is checked for
    profitable single-server deviations every generation.  While one exists,
    the fittest such mutant replaces the dominant profile (see
    ``choose_deviation``); no such deviation means the population has
    converged.

    With ``stop_on_convergence=False`` the dynamics keep running to
    ``max_generations`` so the trace shows what happens after convergence.
    """
    rng = np.random.default_rng([config.seed, 23])
    pop = initial_population(seed_genes, model, config, rng)
    provider_servers = [list(map(int, s)) for s in model.provider_servers]
    trace = []
    churn_series = []
    converged_at = None
    nash = None
    stable_for = 0
    prev_dom = pop.individuals[pop.dominant()]
    visited = {prev_dom}

    for gen in range(config.max_generations + 1):
        f, v = population_fitness(pop, model, config.lambda_fairness)
        dom = pop.individuals[pop.dominant()]
        status = "-"
        if converged_at is None and stable_for >= config.stationary_window:
            nash = check_strict_nash(dom, model, config.move_budget)
            if nash.passed:
                converged_at = gen
                status = "pass"
            else:
                status = "fail"
                dev = choose_deviation(dom, model, config.lambda_fairness, visited)
                moved = apply_deviation(dom, model, dev)
                visited.add(moved)
                i = pop.dominant()
                individuals = list(pop.individuals)
                shares = pop.shares.copy()
                if moved in individuals:
                    j = individuals.index(moved)
                    shares[j] += shares[i]
                    del individuals[i]
                    shares = np.delete(shares, i)
                else:
                    individuals[i] = moved
                pop = Population(individuals, shares)
                f, v = population_fitness(pop, model, config.lambda_fairness)
        elif converged_at is not None:
            status = "pass"
        # churn compares the dominant at the end of consecutive generations
        c = churn(prev_dom, pop.individuals[pop.dominant()])
        churn_series.append(c)
        ev = model.evaluate(pop.individuals[pop.dominant()])
        trace.append({
            "generation": gen,
            "entropy": share_entropy(pop.shares),
            "federation_utilities": ev.federation_utilities.tolist(),
            "welfare": ev.welfare,
            "fitness": float(f[pop.dominant()]),
            "mean_fitness": v,
            "churn": c,
            "deviation_check": status,
            "dominant_share": float(pop.shares.max()),
        })
        prev_dom = pop.individuals[pop.dominant()]
        if converged_at is not None and config.stop_on_convergence:
            break
        if gen == config.max_generations:
            break
        nxt = replicate_strategies(
            pop, f, rng, config.exploration_rate, provider_servers, config.dt, config.replication_strength
        )
        delta = float(np.max(np.abs(nxt.shares - pop.shares))) if len(nxt.shares) == len(pop.shares) else 1.0
        stable_for = stable_for + 1 if delta < config.epsilon_stationary else 0
        pop = prune_extinct(nxt, config.extinction_share)

    final = pop.individuals[pop.dominant()]
    if converged_at is None:
        nash = check_strict_nash(final, model, config.move_budget)
    report = StabilityReport(converged_at is not None, converged_at, nash, churn_series)
    return EvoResult(model.profile(final), final, report, trace)
