"""Exhaustive and genetic search over augmentation subsets.

A genome is a bit vector over an ordered slice of catalog names; it decodes
to the parallel composition of ``aug > dst`` branches. Fitness comes from an
injected oracle (usually the mean transferability to a set of targets), so
synthetic oracles can exercise the search without any model.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .compose import CompositionNode, branch_with_dst
from .tensorcore import RngStream

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 20


@dataclass(frozen=True)
class Genome:
    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_string(cls, s: str) -> "Genome":
        if set(s) - {"0", "1"}:
            raise ValueError(f"genome string must be 0/1, got {s!r}")
        return cls(tuple(c == "1" for c in s))

    @classmethod
    def from_int(cls, value: int, k: int) -> "Genome":
        return cls(tuple((value >> i) & 1 for i in range(k)))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    def with_bit(self, i: int, value: bool = True) -> "Genome":
        b = list(self.bits)
        b[i] = value
        return Genome(tuple(b))

    def selected(self, names) -> list:
        if len(names) != len(self.bits):
            raise ValueError(f"genome length {len(self.bits)} != slice size {len(names)}")
        return [n for n, b in zip(names, self.bits) if b]

    def decode(self, names, dst=None) -> CompositionNode:
        """Branch-with-DST composition of the selected augmentations."""
        return branch_with_dst(self.selected(names), dst=dst)


def _rank_key(genome: Genome, fitness: float):
    # higher fitness first, then fewer augmentations, then lexicographic
    return (-fitness, genome.popcount, str(genome))


@dataclass(frozen=True)
class GeneticConfig:
    population_size: int = 20
    n_gen: int = 2
    p_cross: float = 0.60
    p_mutate: float = 0.10
    p_aug: float = 0.55
    mutate_after_crossover: bool = False
    elitism: bool = True

    def __post_init__(self):
        for name in ("p_cross", "p_mutate", "p_aug"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.n_gen < 0:
            raise ValueError("n_gen must be >= 0")


@dataclass
class SearchReport:
    """Every genome the search evaluated, with fitness and first generation seen."""

    names: tuple
    fitness: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    oracle_calls: int = 0
    method: str = "exhaustive"

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def best(self) -> Genome:
        if not self.fitness:
            raise ValueError("empty report")
        return min(self.fitness, key=lambda g: _rank_key(g, self.fitness[g]))

    @property
    def best_fitness(self) -> float:
        return self.fitness[self.best]

    @property
    def coverage(self) -> float:
        return len(self.fitness) / 2 ** self.k

    @property
    def complete(self) -> bool:
        return len(self.fitness) == 2 ** self.k

    def rows(self):
        """``(genome, fitness, generation)`` sorted by genome string."""
        return [(str(g), self.fitness[g], self.generation[g]) for g in sorted(self.fitness, key=str)]

    def manifest(self) -> dict:
        return {
            "method": self.method,
            "names": list(self.names),
            "best": str(self.best),
            "best_augmentations": self.best.selected(self.names),
            "best_fitness": self.best_fitness,
            "evaluated": len(self.fitness),
            "oracle_calls": self.oracle_calls,
            "coverage": self.coverage,
            "history": list(self.history),
        }

    def write(self, csv_path, manifest_path=None) -> None:
        csv_path = Path(csv_path)
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["genome", "augmentations", "fitness", "generation"])
            for g, fit, gen in self.rows():
                aug = "+".join(Genome.from_string(g).selected(self.names)) or "-"
                w.writerow([g, aug, repr(float(fit)), gen])
        if manifest_path is None:
            manifest_path = csv_path.with_suffix(".json")
        Path(manifest_path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


class _Memo:
    """Memoized fitness oracle that also records call counts."""

    def __init__(self, oracle: Callable, report: SearchReport):
        self.oracle = oracle
        self.report = report

    def __call__(self, genome: Genome, generation: int) -> float:
        rep = self.report
        if genome not in rep.fitness:
            value = float(self.oracle(genome))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"fitness must be finite and non-negative, got {value} for {genome}")
            rep.fitness[genome] = value
            rep.generation[genome] = generation
            rep.oracle_calls += 1
        return rep.fitness[genome]


def exhaustive_search(names, oracle: Callable[[Genome], float]) -> SearchReport:
    """Evaluate all ``2**k`` genomes over the slice ``names``."""
    names = tuple(names)
    k = len(names)
    if k > MAX_EXHAUSTIVE:
        raise ValueError(
            f"exhaustive search over {k} augmentations needs 2**{k} evaluations; "
            f"use at most {MAX_EXHAUSTIVE} or switch to genetic_search"
        )
    report = SearchReport(names, method="exhaustive")
    memo = _Memo(oracle, report)
    for value in range(2 ** k):
        memo(Genome.from_int(value, k), 0)
    report.history.append(report.best_fitness)
    log.info("exhaustive search over %d augmentations: best %s (%.3f)", k, report.best, report.best_fitness)
    return report


def selection_probabilities(fitness) -> np.ndarray:
    """Fitness-proportional selection; uniform when every fitness is zero."""
    f = np.asarray(fitness, dtype=np.float64)
    if f.ndim != 1 or len(f) == 0:
        raise ValueError("fitness must be a non-empty vector")
    if np.any(f < 0):
        raise ValueError("fitness must be non-negative")
    total = f.sum()
    if total == 0:
        return np.full(len(f), 1.0 / len(f))
    return f / total


def crossover(a: Genome, b: Genome, gen: np.random.Generator) -> Genome:
    """Keep bits the parents agree on; draw the others uniformly."""
    if len(a) != len(b):
        raise ValueError("parents differ in length")
    coin = gen.random(len(a)) < 0.5
    return Genome(tuple(x if x == y else bool(c) for x, y, c in zip(a.bits, b.bits, coin)))


def mutate(a: Genome, p: float, gen: np.random.Generator) -> Genome:
    flip = gen.random(len(a)) < p
    return Genome(tuple(x != f for x, f in zip(a.bits, flip)))


def genetic_search(names, cfg: GeneticConfig, oracle: Callable[[Genome], float],
                   rng: RngStream | int = 0) -> SearchReport:
    """Generational search with fitness-proportional selection.

    Each generation draws a pool of ``population_size`` parents with
    replacement. Each parent crosses over with probability ``p_cross``
    (partner drawn uniformly from the rest of the pool) and is otherwise
    mutated. The best genome survives unchanged when ``elitism`` is on.
    """
    names = tuple(names)
    k = len(names)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    gen = stream.derive("genetic").generator()
    report = SearchReport(names, method="genetic")
    memo = _Memo(oracle, report)
    n = cfg.population_size

    population = [Genome(tuple(gen.random(k) < cfg.p_aug)) for _ in range(n)]
    scores = [memo(g, 0) for g in population]
    report.history.append(report.best_fitness)

    for g_idx in range(1, cfg.n_gen + 1):
        probs = selection_probabilities(scores)
        pool = [population[i] for i in gen.choice(n, size=n, replace=True, p=probs)]
        children = []
        if cfg.elitism:
            elite = min(range(n), key=lambda i: _rank_key(population[i], scores[i]))
            children.append(population[elite])
        for i in range(len(children), n):
            parent = pool[i]
            if gen.random() < cfg.p_cross:
                j = int(gen.integers(n - 1))
                partner = pool[j if j < i else j + 1]
                child = crossover(parent, partner, gen)
                if cfg.mutate_after_crossover:
                    child = mutate(child, cfg.p_mutate, gen)
            else:
                child = mutate(parent, cfg.p_mutate, gen)
            children.append(child)
        population = children
        scores = [memo(g, g_idx) for g in population]
        report.history.append(report.best_fitness)
    log.info("genetic search: %d evaluations, best %s (%.3f)", report.oracle_calls, report.best,
             report.best_fitness)
    return report


@dataclass(frozen=True)
class MonotonicityRow:
    name: str
    pairs: int
    fraction_nondecreasing: float
    mean_delta: float
    worst_delta: float
    deltas: tuple


def monotonicity_analysis(report: SearchReport) -> list[MonotonicityRow]:
    """Effect of adding each augmentation, over all pairs ``(G, G + a)``."""
    if not report.complete:
        raise ValueError(
            f"monotonicity needs every genome; report covers {len(report.fitness)} of {2 ** report.k}"
        )
    k = report.k
    fit = {str(g): v for g, v in report.fitness.items()}
    rows = []
    for j, name in enumerate(report.names):
        deltas = []
        for value in range(2 ** k):
            base = Genome.from_int(value, k)
            if base.bits[j]:
                continue
            deltas.append(fit[str(base.with_bit(j))] - fit[str(base)])
        d = np.array(deltas)
        rows.append(MonotonicityRow(name, len(d), float(np.mean(d >= 0)), float(d.mean()), float(d.min()),
                                    tuple(d.tolist())))
    return rows


def fraction_dropping(rows, threshold: float) -> float:
    """Fraction of all pairs in which adding an augmentation lowers fitness by more than ``threshold``."""
    d = np.concatenate([np.asarray(r.deltas) for r in rows])
    return float(np.mean(d < -threshold))


def table_oracle(table: dict) -> Callable[[Genome], float]:
    """Oracle backed by a precomputed ``{genome string: fitness}`` table."""
    def oracle(g: Genome) -> float:
        return table[str(g)]
    return oracle


def write_monotonicity(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["augmentation", "pairs", "fraction_nondecreasing", "mean_delta", "worst_delta"])
        for r in rows:
            w.writerow([r.name, r.pairs, repr(r.fraction_nondecreasing), repr(r.mean_delta), repr(r.worst_delta)])
