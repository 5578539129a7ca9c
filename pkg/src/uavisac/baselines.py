"""Comparison policies: uniform random actions and a per-slot genetic search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import GaConfig
from .env import IsacEnv, JointAction

ACTION_LOW, ACTION_HIGH = -1.0, 1.0


def action_size(env: IsacEnv) -> int:
    return 3 * env.n + env.cfg.bs_action_dim


def split_action(flat, n_uavs: int) -> JointAction:
    flat = np.asarray(flat, float)
    return JointAction(flat[: 3 * n_uavs].reshape(n_uavs, 3), flat[3 * n_uavs :])


def random_policy(env: IsacEnv, rng: np.random.Generator) -> JointAction:
    """Every raw action entry uniform on [-1, 1]; the env projections do the rest."""
    return split_action(rng.uniform(ACTION_LOW, ACTION_HIGH, action_size(env)), env.n)


@dataclass
class GaResult:
    best: np.ndarray
    best_fitness: float
    history: list[float]


def _tournament(fitness: np.ndarray, k: int, rng) -> int:
    idx = rng.integers(len(fitness), size=k)
    return int(idx[np.argmax(fitness[idx])])


def ga_optimize(fitness_fn: Callable[[np.ndarray], float], dim: int, cfg: GaConfig, rng: np.random.Generator,
                init: np.ndarray | None = None, low: float = ACTION_LOW, high: float = ACTION_HIGH) -> GaResult:
    """Maximise ``fitness_fn`` over the box ``[low, high]^dim``.

    Tournament selection, uniform crossover, Gaussian mutation with std
    ``mutation_std * (high - low)`` and elitism. ``init`` (population x dim)
    replaces the uniform initial population when given.
    """
    if init is None:
        pop = rng.uniform(low, high, (cfg.population, dim))
    else:
        pop = np.array(init, float).reshape(cfg.population, dim)
    fit = np.array([fitness_fn(x) for x in pop])
    history = [float(fit.max())]
    sigma = cfg.mutation_std * (high - low)
    for _ in range(cfg.generations):
        elite_idx = np.argsort(-fit, kind="stable")[: cfg.elite]
        children = [pop[i].copy() for i in elite_idx]
        while len(children) < cfg.population:
            a = pop[_tournament(fit, cfg.tournament, rng)]
            b = pop[_tournament(fit, cfg.tournament, rng)]
            if rng.random() < cfg.crossover_rate:
                child = np.where(rng.random(dim) < 0.5, a, b)
            else:
                child = a.copy()
            if sigma > 0:
                child = np.clip(child + sigma * rng.standard_normal(dim), low, high)
            children.append(child)
        new_pop = np.array(children)
        new_fit = np.empty(cfg.population)
        new_fit[: cfg.elite] = fit[elite_idx]
        for i in range(cfg.elite, cfg.population):
            new_fit[i] = fitness_fn(new_pop[i])
        pop, fit = new_pop, new_fit
        history.append(float(fit.max()))
    best = int(np.argmax(fit))
    return GaResult(pop[best].copy(), float(fit[best]), history)


def ga_policy(env: IsacEnv, cfg: GaConfig, rng: np.random.Generator) -> JointAction:
    """Myopic GA: maximise the one-step reward on the next slot's frozen draws."""
    env.draw_slot()

    def fitness(x):
        return env.evaluate(split_action(x, env.n))

    return split_action(ga_optimize(fitness, action_size(env), cfg, rng).best, env.n)


def as_episode_policy(fn: Callable[[IsacEnv, np.random.Generator], JointAction], rng: np.random.Generator):
    """Adapt a baseline to the ``policy(env, core) -> (obs, acts, logps)`` interface of learned agents."""

    def policy(env: IsacEnv, core):
        a = fn(env, rng)
        acts = [row for row in a.uav] + [a.bs]
        return np.zeros((env.n_agents, 0)), acts, np.zeros(env.n_agents)

    return policy
