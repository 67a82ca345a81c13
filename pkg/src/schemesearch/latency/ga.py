"""Genetic search over execution parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .executors import TILES, UNROLLS, TuningParams


@dataclass
class GAConfig:
    generations: int = 10
    population: int = 8
    tournament: int = 2
    p_crossover: float = 0.7
    p_mutation: float = 0.1
    elitism: int = 1


@dataclass
class GAResult:
    best: tuple
    cost: float
    initial_best: float
    evaluations: int
    history: list = field(default_factory=list)   # best cost after each generation

    def params(self) -> TuningParams:
        return TuningParams(*self.best)


def ga_tune(cost: Callable[[tuple], float], genes: Sequence[Sequence] = (TILES, UNROLLS),
            cfg: GAConfig | None = None, seed: int = 0) -> GAResult:
    """Minimise ``cost(genome)`` where genome[i] is drawn from ``genes[i]``.

    Costs are memoised, so each distinct genome is measured once.  The
    initial population is drawn without replacement from the full grid.
    """
    cfg = cfg or GAConfig()
    rng = np.random.default_rng(seed)
    genes = [tuple(g) for g in genes]
    grid = [tuple(int(i) for i in idx) for idx in np.ndindex(*[len(g) for g in genes])]
    cache: dict = {}

    def f(ind):
        if ind not in cache:
            cache[ind] = float(cost(tuple(g[i] for g, i in zip(genes, ind))))
        return cache[ind]

    size = max(1, min(cfg.population, len(grid)))
    pop = [grid[i] for i in rng.choice(len(grid), size=size, replace=False)]
    fits = [f(ind) for ind in pop]
    initial_best = min(fits)
    history = []
    for _ in range(cfg.generations):
        order = np.argsort(fits, kind="stable")
        nxt = [pop[i] for i in order[:cfg.elitism]]
        while len(nxt) < size:
            a = _tournament(pop, fits, cfg.tournament, rng)
            b = _tournament(pop, fits, cfg.tournament, rng)
            if len(genes) > 1 and rng.random() < cfg.p_crossover:
                cut = int(rng.integers(1, len(genes)))
                a = a[:cut] + b[cut:]
            child = tuple(int(rng.integers(len(genes[j]))) if rng.random() < cfg.p_mutation else g
                          for j, g in enumerate(a))
            # duplicate elimination: re-mutate one gene of a clone, a few times at most
            for _ in range(3):
                if child not in nxt:
                    break
                j = int(rng.integers(len(genes)))
                child = child[:j] + (int(rng.integers(len(genes[j]))),) + child[j + 1:]
            nxt.append(child)
        pop = nxt
        fits = [f(ind) for ind in pop]
        history.append(min(cache.values()))
    best = min(cache, key=lambda k: (cache[k], k))
    return GAResult(tuple(g[i] for g, i in zip(genes, best)), cache[best], initial_best,
                    len(cache), history)


def _tournament(pop, fits, k, rng):
    idx = rng.choice(len(pop), size=min(k, len(pop)), replace=False)
    return pop[min(idx, key=lambda i: (fits[i], i))]


def tune_layer(layer, ptype=None, ratio: float = 0.0, winograd: bool = False,
               cfg: GAConfig | None = None, reps: int = 30, seed: int = 0) -> GAResult:
    """GA over (tile, unroll) with measured median latency as the cost."""
    from .bench import bench_case, case_mask

    rng = np.random.default_rng(seed)
    weight = rng.normal(size=layer.weight_shape()).astype(np.float32)
    mask = case_mask(layer, weight, ptype, ratio)

    def cost(genome):
        return bench_case(layer, params=TuningParams(*genome), winograd=winograd, reps=reps,
                          seed=seed, weight=weight, mask=mask).median_ms

    return ga_tune(cost, cfg=cfg, seed=seed)
