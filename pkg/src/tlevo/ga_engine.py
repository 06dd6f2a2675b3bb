"""Genetic algorithm over transfer-learning chromosomes.

One generation is: evaluate (with a fitness cache), record statistics, check
termination, then breed the next population from tournament-selected parents.

Random draw order
-----------------
All randomness comes from one ``random.Random(seed)`` consumed in a fixed
order, which is what makes runs replayable:

1. Initialisation: ``population_size`` chromosomes, genes drawn in the order
   included, frozen, learning rate, dropout.
2. Each breeding step: two tournaments pick the elite pair. Then for every
   offspring slot: tournament for parent A, tournament for parent B, four
   crossover coin flips (one per gene, same gene order), then per gene one
   mutation roll followed by one direction roll if the roll hits.
3. A tournament draws ``tournament_draws`` indices with replacement; ties go
   to the earliest draw.

Evaluation never touches the RNG, so concurrent evaluation cannot change a run.
"""

from __future__ import annotations

import enum
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .chromosome import (
    DEFAULT_DOMAINS,
    Chromosome,
    GeneDomains,
    canonical_key,
    map_to_architecture,
    sample_chromosome,
)
from .fitness import DEFAULT_EPOCHS, Concurrency, EvaluatorError, FitnessEvaluator, _check_loss

log = logging.getLogger(__name__)


class StopReason(enum.Enum):
    GENERATION_CAP = "GenerationCap"
    PLATEAU = "Plateau"
    EVALUATOR_FAILURE = "EvaluatorFailure"


class FailurePolicy(enum.Enum):
    ABORT = "abort"
    PENALTY = "penalty"


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 10
    max_generations: int = 10
    plateau_epsilon: float = 0.001
    mutation_rate: float = 0.10
    tournament_draws: int = 2
    seed: int = 0
    domains: GeneDomains = DEFAULT_DOMAINS
    layer_mutation_step: int = 5
    epochs: int = DEFAULT_EPOCHS
    on_evaluator_failure: FailurePolicy = FailurePolicy.ABORT

    def __post_init__(self):
        if isinstance(self.on_evaluator_failure, str):
            object.__setattr__(self, "on_evaluator_failure", FailurePolicy(self.on_evaluator_failure))
        if not isinstance(self.population_size, int) or self.population_size < 2:
            raise ValueError(f"population_size must be an integer >= 2, got {self.population_size!r}")
        if not isinstance(self.max_generations, int) or self.max_generations < 1:
            raise ValueError(f"max_generations must be an integer >= 1, got {self.max_generations!r}")
        if not self.plateau_epsilon > 0:
            raise ValueError(f"plateau_epsilon must be positive, got {self.plateau_epsilon!r}")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError(f"mutation_rate must be in [0, 1], got {self.mutation_rate!r}")
        if not isinstance(self.tournament_draws, int) or self.tournament_draws < 2:
            raise ValueError(f"tournament_draws must be an integer >= 2, got {self.tournament_draws!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not isinstance(self.layer_mutation_step, int) or self.layer_mutation_step < 1:
            raise ValueError(f"layer_mutation_step must be a positive integer, got {self.layer_mutation_step!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs!r}")


@dataclass(frozen=True)
class EvaluatedChromosome:
    chromosome: Chromosome
    fitness: float
    from_cache: bool = False

    @property
    def loss(self) -> float:
        return -self.fitness


@dataclass
class GenerationRecord:
    index: int
    population: list[EvaluatedChromosome]
    best_fitness: float
    avg_fitness: float
    evaluator_calls: int
    cache_hits: int

    @property
    def best(self) -> EvaluatedChromosome:
        return max(self.population, key=lambda e: e.fitness)


@dataclass
class RunResult:
    generations: list[GenerationRecord]
    best: EvaluatedChromosome | None
    stop_reason: StopReason
    error: str | None = None


class EvaluationFailure(EvaluatorError):
    """An evaluator error with the chromosome that triggered it."""

    def __init__(self, chromosome: Chromosome, cause: BaseException):
        super().__init__(f"evaluation of {chromosome!r} failed: {cause}")
        self.chromosome = chromosome
        self.cause = cause


class FitnessCache:
    """Losses keyed by :func:`canonical_key`, plus call/hit counters."""

    def __init__(self, losses: dict | None = None):
        self.losses: dict[tuple, float] = dict(losses or {})
        self.calls = 0
        self.hits = 0
        self.max_loss = max(self.losses.values(), default=None)
        self.penalized: set = set()

    def __contains__(self, key) -> bool:
        return key in self.losses

    def __len__(self):
        return len(self.losses)

    def get(self, key):
        return self.losses.get(key)

    def put(self, key, loss: float, *, real: bool = True):
        self.losses[key] = loss
        if not real:
            self.penalized.add(key)
        elif (self.max_loss is None or loss > self.max_loss):
            self.max_loss = loss


def initialize_population(config: GaConfig, rng: random.Random) -> list[Chromosome]:
    return [sample_chromosome(config.domains, rng) for _ in range(config.population_size)]


def _penalty_loss(cache: FitnessCache) -> float:
    # Ten times the worst real loss so far; 1.0 stands in before any loss is known.
    worst = cache.max_loss if cache.max_loss is not None else 1.0
    return 10.0 * max(worst, 1e-12)


def evaluate_population(
    pop: Sequence[Chromosome],
    evaluator: FitnessEvaluator,
    cache: FitnessCache | None = None,
    *,
    epochs: int = DEFAULT_EPOCHS,
    policy: FailurePolicy = FailurePolicy.ABORT,
) -> list[EvaluatedChromosome]:
    """Score a population, consulting and updating ``cache``.

    Fitness is the negated loss. Each distinct uncached chromosome is evaluated
    once; repeats within the population count as cache hits. Evaluators that
    declare concurrency are run on a thread pool, but results are merged in
    population order.
    """
    if cache is None:
        cache = FitnessCache()

    pending: dict[tuple, Chromosome] = {}
    for c in pop:
        key = canonical_key(c)
        if key not in cache and key not in pending:
            pending[key] = c

    def run_one(c: Chromosome):
        plan = map_to_architecture(c)
        try:
            return _check_loss(evaluator.evaluate(plan, epochs), plan), None
        except EvaluatorError as exc:
            return None, exc

    items = list(pending.items())
    workers = evaluator.max_workers if evaluator.concurrency is Concurrency.CONCURRENT else 1
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            outcomes = list(pool.map(lambda kv: run_one(kv[1]), items))
    else:
        outcomes = []
        for _, c in items:
            outcome = run_one(c)
            outcomes.append(outcome)
            if outcome[1] is not None and policy is FailurePolicy.ABORT:
                break

    # Merge in population order: first occurrence is the evaluator call, the rest are hits.
    fresh = dict(zip((k for k, _ in items), outcomes))
    evaluated = []
    for c in pop:
        key = canonical_key(c)
        if key in fresh:
            loss, error = fresh.pop(key)
            cache.calls += 1
            if error is not None:
                if policy is FailurePolicy.ABORT:
                    raise EvaluationFailure(c, error) from error
                loss = _penalty_loss(cache)
                log.warning("penalising %r with loss %g after evaluator error: %s", c, loss, error)
                cache.put(key, loss, real=False)
            else:
                cache.put(key, loss)
            evaluated.append(EvaluatedChromosome(c, -loss, False))
        else:
            cache.hits += 1
            evaluated.append(EvaluatedChromosome(c, -cache.get(key), True))
    return evaluated


def tournament_select(pop: Sequence[EvaluatedChromosome], rng: random.Random, draws: int = 2) -> Chromosome:
    """Best of ``draws`` uniform picks with replacement; earliest draw wins ties."""
    if not pop:
        raise ValueError("cannot select from an empty population")
    winner = pop[rng.randrange(len(pop))]
    for _ in range(draws - 1):
        challenger = pop[rng.randrange(len(pop))]
        if challenger.fitness > winner.fitness:
            winner = challenger
    return winner.chromosome


def _repair(included: int, frozen: int, lr_index: int, dropout_index: int, domains: GeneDomains) -> Chromosome:
    frozen = min(frozen, included, domains.frozen_layers_range[1])
    return Chromosome(included, frozen, lr_index, dropout_index, domains)


def crossover_with_mask(parent_a: Chromosome, parent_b: Chromosome, from_a: Sequence[bool]) -> Chromosome:
    """Take gene ``i`` from ``parent_a`` when ``from_a[i]`` is true, then repair."""
    a, b = canonical_key(parent_a), canonical_key(parent_b)
    genes = [x if pick else y for x, y, pick in zip(a, b, from_a)]
    return _repair(*genes, parent_a.domains)


def uniform_crossover(parent_a: Chromosome, parent_b: Chromosome, rng: random.Random) -> Chromosome:
    if parent_a.domains != parent_b.domains:
        raise ValueError("parents come from different gene domains")
    mask = [rng.random() < 0.5 for _ in range(4)]
    return crossover_with_mask(parent_a, parent_b, mask)


def _step_menu(index: int, menu: Sequence[float], upward: bool) -> int:
    """Move one menu entry towards larger (or smaller) values, stopping at the ends."""
    ascending = len(menu) < 2 or menu[0] < menu[1]
    delta = 1 if upward == ascending else -1
    return min(max(index + delta, 0), len(menu) - 1)


def mutate(c: Chromosome, config: GaConfig, rng: random.Random) -> Chromosome:
    """Per-gene mutation with probability ``config.mutation_rate``.

    Layer genes move by exactly +/- ``layer_mutation_step`` and are clamped to
    their range. The learning rate is multiplied or divided by ten and dropout
    moves by 0.1, both as a single step along their menu, clamped at the ends.
    """
    d = config.domains
    step = config.layer_mutation_step
    included, frozen, lr_index, dropout_index = canonical_key(c)

    def hit() -> bool:
        return rng.random() < config.mutation_rate

    def up() -> bool:
        return rng.random() < 0.5

    if hit():
        lo, hi = d.included_layers_range
        included = min(max(included + (step if up() else -step), lo), hi)
    if hit():
        lo, hi = d.frozen_layers_range
        frozen = min(max(frozen + (step if up() else -step), lo), hi)
    if hit():
        lr_index = _step_menu(lr_index, d.learning_rate_menu, up())
    if hit():
        dropout_index = _step_menu(dropout_index, d.dropout_menu, up())
    return _repair(included, frozen, lr_index, dropout_index, d)


def next_generation(current: Sequence[EvaluatedChromosome], config: GaConfig, rng: random.Random) -> list[Chromosome]:
    """Two tournament-selected elites survive unchanged; offspring fill the rest."""
    k = config.tournament_draws
    elites = [tournament_select(current, rng, k), tournament_select(current, rng, k)]
    offspring = []
    for _ in range(config.population_size - len(elites)):
        parent_a = tournament_select(current, rng, k)
        parent_b = tournament_select(current, rng, k)
        offspring.append(mutate(uniform_crossover(parent_a, parent_b, rng), config, rng))
    return elites + offspring


def _record(index: int, evaluated: list[EvaluatedChromosome], cache: FitnessCache, calls0: int, hits0: int) -> GenerationRecord:
    fitnesses = [e.fitness for e in evaluated]
    return GenerationRecord(
        index=index,
        population=evaluated,
        best_fitness=max(fitnesses),
        avg_fitness=math.fsum(fitnesses) / len(fitnesses),
        evaluator_calls=cache.calls - calls0,
        cache_hits=cache.hits - hits0,
    )


def run(config: GaConfig, evaluator: FitnessEvaluator, cache: FitnessCache | None = None) -> RunResult:
    """Evolve until the generation cap or an average-fitness plateau.

    The plateau test compares consecutive generations' mean fitness and stops
    once the absolute change is below ``plateau_epsilon``; it needs two
    generations, so generation 0 can never plateau. ``cache`` may be pre-filled
    to warm-start a resumed search.
    """
    rng = random.Random(config.seed)
    cache = cache if cache is not None else FitnessCache()
    records: list[GenerationRecord] = []
    best: EvaluatedChromosome | None = None

    population = initialize_population(config, rng)
    for g in range(config.max_generations):
        calls0, hits0 = cache.calls, cache.hits
        try:
            evaluated = evaluate_population(
                population, evaluator, cache, epochs=config.epochs, policy=config.on_evaluator_failure
            )
        except EvaluationFailure as exc:
            log.error("generation %d aborted: %s", g, exc)
            return RunResult(records, best, StopReason.EVALUATOR_FAILURE, str(exc))

        record = _record(g, evaluated, cache, calls0, hits0)
        records.append(record)
        gen_best = record.best
        if best is None or gen_best.fitness > best.fitness:
            best = gen_best
        log.info(
            "generation %d: best=%.6g avg=%.6g calls=%d hits=%d",
            g, record.best_fitness, record.avg_fitness, record.evaluator_calls, record.cache_hits,
        )

        if g >= 1 and abs(record.avg_fitness - records[-2].avg_fitness) < config.plateau_epsilon:
            return RunResult(records, best, StopReason.PLATEAU)
        if g == config.max_generations - 1:
            break
        population = next_generation(evaluated, config, rng)

    return RunResult(records, best, StopReason.GENERATION_CAP)

