"""Meta-evolution loop: database seeding, per-individual MAP-Elites and CMA-ES updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.spatial.distance import pdist

from . import arm
from .archive import BehaviourMap, mutate
from .cmaes import CmaState
from .control import (
    DEFAULTS,
    GENERATIONS,
    MUTATION_RATE,
    Controller,
    Observation,
    REWARD_SCALE,
    StaticControl,
    consume_generations,
    round_half_up,
)
from .database import KBestDatabase, build_map
from .featuremaps import decode, gene_box, genome_length

log = logging.getLogger(__name__)

BATCH_SIZE = 400
INITIAL_POPULATION = 2000
META_BATCH_FRACTION = 0.10
DESK_BUDGET = 200_000
META_BINS = 8


class BudgetTracker:
    """Counts every bottom-level arm evaluation against the budget."""

    def __init__(self, budget: int):
        self.budget = budget
        self.used = 0

    def add(self, n: int) -> int:
        self.used += int(n)
        return int(n)

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget


def train_damage_set(rng: np.random.Generator) -> List[arm.StuckJoint]:
    """Two stuck-joint damages per joint, one at a negative and one at a positive angle."""
    damages = []
    for joint in range(1, arm.N_JOINTS + 1):
        damages.append(arm.StuckJoint(joint, float(rng.uniform(-math.pi / 2, 0.0))))
        damages.append(arm.StuckJoint(joint, float(rng.uniform(0.0, math.pi / 2))))
    return damages


class SolutionBuffer:
    """Safe solutions collected during iterations, merged into the database later."""

    def __init__(self):
        self.genotypes: List[np.ndarray] = []
        self.features: List[np.ndarray] = []
        self.fitness: List[np.ndarray] = []

    def extend(self, g, b, f):
        if len(f):
            self.genotypes.append(g)
            self.features.append(b)
            self.fitness.append(f)

    def flush_into(self, db: KBestDatabase) -> None:
        for g, b, f in zip(self.genotypes, self.features, self.fitness):
            db.insert_many(g, b, f)
        self.__init__()


def seed_database(db: KBestDatabase, p: int, rng: np.random.Generator) -> int:
    """Evaluate ``p`` random genotypes and store the safe ones; returns ``p``."""
    if p <= 0:
        return 0
    g = arm.random_genotypes(rng, p)
    res = arm.evaluate_batch(g)
    s = res.safe
    db.insert_many(g[s], res.base_features[s], res.fitness[s])
    return p


def seed_map(archive: BehaviourMap, feature_map, p: int, rng: np.random.Generator) -> int:
    """Initial random population for plain MAP-Elites runs."""
    if p <= 0:
        return 0
    g = arm.random_genotypes(rng, p)
    res = arm.evaluate_batch(g)
    s = res.safe
    archive.insert_batch(g[s], feature_map(res.base_features[s]), res.fitness[s])
    return p


def map_elites_iterations(
    archive: BehaviourMap,
    feature_map,
    generations: int,
    mutation_rate: float,
    rng: np.random.Generator,
    sink: Optional[SolutionBuffer] = None,
    batch_size: int = BATCH_SIZE,
) -> int:
    """Run ``generations`` batches of select, mutate, evaluate, insert.

    Parents of a batch are drawn from the map as it stands at the start of
    that batch.  An empty map falls back to uniform random genotypes.
    Returns the number of evaluations used.
    """
    used = 0
    for _ in range(generations):
        if len(archive):
            children = mutate(archive.sample_batch(rng, batch_size), mutation_rate, rng)
        else:
            children = arm.random_genotypes(rng, batch_size)
        res = arm.evaluate_batch(children)
        s = res.safe
        g, b, f = children[s], res.base_features[s], res.fitness[s]
        archive.insert_batch(g, feature_map(b), f)
        if sink is not None:
            sink.extend(g, b, f)
        used += batch_size
    return used


def meta_batch_size(coverage: int) -> int:
    return max(1, round_half_up(META_BATCH_FRACTION * coverage))


def meta_fitness(archive: BehaviourMap, damages, rng: np.random.Generator):
    """Damage-averaged summed pairwise distance of end-effectors over a 10% elite sample.

    Returns ``(meta_fitness, evaluations_used)``.  Genotypes that are unsafe
    under a damage are left out of that damage's sum.
    """
    if len(archive) == 0:
        log.warning("meta-fitness of an empty map is defined as 0")
        return 0.0, 0
    genotypes = archive.genotypes()
    n = meta_batch_size(len(genotypes))
    batch = genotypes[np.sort(rng.choice(len(genotypes), size=n, replace=False))]
    total = 0.0
    for d in damages:
        ee, safe = arm.end_effectors(batch, d)
        pts = ee[safe]
        if len(pts) > 1:
            total += float(pdist(pts).sum())
    return total / len(damages), n * len(damages)


def pairwise_sum(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(pdist(pts).sum()) if len(pts) > 1 else 0.0


@dataclass
class RunConfig:
    kind: str = "selection"
    control: Controller = field(default_factory=lambda: StaticControl(MUTATION_RATE))
    budget: int = DESK_BUDGET
    batch_size: int = BATCH_SIZE
    initial_population: int = INITIAL_POPULATION
    popsize: int = 5
    seed: int = 0
    db_k: int = 5000
    db_capacity: int = 3**14

    def __post_init__(self):
        if self.budget < self.initial_population:
            raise ValueError("budget must cover the initial population")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")


@dataclass
class MetaGenerationResult:
    meta_generation: int
    evaluations: int
    meta_fitness: np.ndarray
    coverage: np.ndarray
    global_fitness: np.ndarray
    average_fitness: np.ndarray
    param_values: List[float]
    sigma: float
    evaluations_this_generation: int
    observation: Optional[Observation] = None
    reward: float = 0.0
    controller_info: dict = field(default_factory=dict)

    def row(self) -> dict:
        def ms(a):
            a = np.asarray(a, dtype=float)
            return float(np.mean(a)), float(np.std(a))

        cov_m, cov_s = ms(self.coverage)
        gf_m, gf_s = ms(self.global_fitness)
        af_m, af_s = ms(self.average_fitness)
        mf_m, mf_s = ms(self.meta_fitness)
        return {
            "meta_generation": self.meta_generation,
            "evaluations": self.evaluations,
            "coverage_mean": cov_m,
            "coverage_sd": cov_s,
            "global_fitness_mean": gf_m,
            "global_fitness_sd": gf_s,
            "average_fitness_mean": af_m,
            "average_fitness_sd": af_s,
            "meta_fitness_mean": mf_m,
            "meta_fitness_sd": mf_s,
            "meta_fitness_max": float(np.max(self.meta_fitness)),
            "param_value": float(np.mean(self.param_values)),
            "sigma": self.sigma,
        }


class MetaEvolution:
    """Stateful driver for one meta-evolution run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.kind = config.kind
        self.box = gene_box(config.kind)
        self.controller = config.control
        dim = genome_length(config.kind) + self.controller.extra_genes
        self.cma = CmaState.init(dim, self.box, popsize=config.popsize)
        self.db = KBestDatabase(k=config.db_k, capacity=config.db_capacity)
        self.tracker = BudgetTracker(config.budget)
        self.meta_generation = 0
        self.best_max_mf = -math.inf
        self.prev_max_mf: Optional[float] = None
        self.stagnation = 0
        self.last_reward = 0.0
        self.bins = META_BINS

    def seed(self) -> int:
        used = seed_database(self.db, self.config.initial_population, self.rng)
        self.controller.start(self.rng)
        return self.tracker.add(used)

    def _settings(self, controlled: float):
        which = self.controller.which
        gens = DEFAULTS[GENERATIONS]
        mr = DEFAULTS[MUTATION_RATE]
        if which == GENERATIONS:
            gens = controlled
        elif which == MUTATION_RATE:
            mr = controlled
        return consume_generations(gens), float(mr)

    def feature_map_of(self, w: np.ndarray):
        """Feature-map for a meta-genotype, ignoring any trailing control gene."""
        w = np.clip(np.asarray(w, dtype=float), self.box[0], self.box[1])
        return decode(w[: genome_length(self.kind)], self.kind)

    def step(self) -> MetaGenerationResult:
        start = self.tracker.used
        damages = train_damage_set(self.rng)
        W = self.cma.ask(self.rng)
        values, stripped = self.controller.values(W, self.tracker.used, self.box)
        maps = [build_map(self.db, decode(w, self.kind), self.bins) for w in stripped]
        child_rngs = self.rng.spawn(len(maps))

        buffers = []
        mf, cov, gfit, afit = [], [], [], []
        for i, archive in enumerate(maps):
            gens, mr = self._settings(values[i])
            fmap = decode(stripped[i], self.kind)
            buf = SolutionBuffer()
            self.tracker.add(
                map_elites_iterations(
                    archive, fmap, gens, mr, child_rngs[i], buf, self.config.batch_size
                )
            )
            buffers.append(buf)
            m = archive.safe_metrics()
            cov.append(m["coverage"])
            gfit.append(m["global_fitness"])
            afit.append(m["average_fitness"])
            F, used = meta_fitness(archive, damages, child_rngs[i])
            self.tracker.add(used)
            mf.append(F)
        for buf in buffers:
            buf.flush_into(self.db)

        mf = np.array(mf)
        self.cma.tell(mf)
        self.meta_generation += 1
        spent = self.tracker.used - start

        max_mf = float(mf.max())
        reward = 0.0
        if self.prev_max_mf is not None:
            reward = (max_mf - self.prev_max_mf) / max(1, spent) * REWARD_SCALE
        self.prev_max_mf = max_mf
        if max_mf > self.best_max_mf:
            self.best_max_mf = max_mf
            self.stagnation = 0
        else:
            self.stagnation += 1
        diversity = float(pdist(W).mean()) if len(W) > 1 else 0.0
        obs = Observation(
            max_mf=max_mf,
            mean_mf=float(mf.mean()),
            std_mf=float(mf.std()),
            diversity=diversity,
            stagnation=self.stagnation,
            last_reward=self.last_reward,
        )
        self.last_reward = reward
        info = self.controller.update(obs, reward, self.rng)

        return MetaGenerationResult(
            meta_generation=self.meta_generation,
            evaluations=self.tracker.used,
            meta_fitness=mf,
            coverage=np.array(cov),
            global_fitness=np.array(gfit),
            average_fitness=np.array(afit),
            param_values=[float(v) for v in values],
            sigma=float(self.cma.sigma),
            evaluations_this_generation=spent,
            observation=obs,
            reward=reward,
            controller_info=info,
        )

    def run(self, on_generation: Optional[Callable[[MetaGenerationResult], None]] = None):
        if self.tracker.used == 0:
            self.seed()
        results = []
        while not self.tracker.exhausted:
            res = self.step()
            results.append(res)
            if on_generation is not None:
                on_generation(res)
        return results

    def mean_archive(self) -> BehaviourMap:
        """Archive built from the database through the mean meta-genotype."""
        return build_map(self.db, self.feature_map_of(self.cma.clamped_mean()), self.bins)


run_meta_generation = MetaEvolution.step
