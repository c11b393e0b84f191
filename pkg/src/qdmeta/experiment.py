"""Experiment plumbing: conditions, baseline runs, output files, damage tests and summaries."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from scipy.spatial import cKDTree

from . import __version__, arm
from .archive import BehaviourMap, default_bins
from .cmaes import CmaState
from .control import (
    MUTATION_RATE,
    AnnealControl,
    Controller,
    StaticControl,
    make_controller,
)
from .featuremaps import BASELINES, KINDS, ConfigurationError, decode, gene_box, genome_length
from .metaloop import (
    BATCH_SIZE,
    DESK_BUDGET,
    INITIAL_POPULATION,
    MetaEvolution,
    RunConfig,
    map_elites_iterations,
    meta_fitness,
    seed_map,
    train_damage_set,
)

log = logging.getLogger(__name__)

BASELINE_LOG_EVERY = 5  # generations between metric rows for plain MAP-Elites
DEFAULT_TOLERANCE = 0.05 * arm.ARM_LENGTH
DEFAULT_GRID = (20, 36)
OFFSET_STEPS = tuple(s / 10 for s in range(-10, 11) if s != 0)

META_COLUMNS = [
    "meta_generation",
    "evaluations",
    "coverage_mean",
    "coverage_sd",
    "global_fitness_mean",
    "global_fitness_sd",
    "average_fitness_mean",
    "average_fitness_sd",
    "meta_fitness_mean",
    "meta_fitness_sd",
    "meta_fitness_max",
    "param_value",
    "sigma",
]
BASELINE_COLUMNS = [
    "generation",
    "evaluations",
    "coverage",
    "global_fitness",
    "average_fitness",
    "meta_fitness",
    "mutation_rate",
]
CONTROLLER_COLUMNS = [
    "meta_generation",
    "max_mf",
    "mean_mf",
    "std_mf",
    "diversity",
    "stagnation",
    "last_reward",
    "action",
    "value",
    "reward",
    "leaf_id",
]


class UsageError(ValueError):
    """Invalid condition or flag combination."""


# --------------------------------------------------------------------------
# conditions


@dataclass(frozen=True)
class Condition:
    name: str
    family: str  # "meta", "baseline" or "random"
    kind: str  # feature-map kind or baseline space name

    @property
    def is_meta(self) -> bool:
        return self.family == "meta"


def parse_condition(name: str) -> Condition:
    name = name.strip().lower()
    prefix, _, rest = name.partition("-")
    if prefix in ("meta", "random") and rest in KINDS:
        return Condition(name, prefix, rest)
    if name in BASELINES:
        return Condition(name, "baseline", name)
    raise UsageError(
        f"unknown condition {name!r}; expected meta-<kind>, random-<kind> "
        f"(kind in {', '.join(KINDS)}) or one of {', '.join(BASELINES)}"
    )


def all_conditions() -> List[str]:
    return [f"meta-{k}" for k in KINDS] + list(BASELINES) + [f"random-{k}" for k in KINDS]


def build_controller(condition: Condition, control: str, budget: int) -> Controller:
    try:
        ctl = make_controller(control, budget)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if not condition.is_meta:
        # plain MAP-Elites has no meta-generations: only the mutation rate can be set
        if ctl.which != MUTATION_RATE or not isinstance(ctl, (StaticControl, AnnealControl)):
            raise UsageError(f"{condition.name} supports only static or anneal mutation-rate control")
    return ctl


def random_feature_map(kind: str, rng: np.random.Generator):
    """One draw from the initial CMA-ES search distribution, clamped into the gene box."""
    lo, hi = gene_box(kind)
    state = CmaState.init(genome_length(kind), (lo, hi))
    w = state.mean + state.sigma * rng.standard_normal(state.dim)
    return decode(np.clip(w, lo, hi), kind)


# --------------------------------------------------------------------------
# runs


@dataclass
class EvolveConfig:
    condition: str
    control: str = "static"
    budget: int = DESK_BUDGET
    seed: int = 0
    out: str = "runs/run"
    batch_size: int = BATCH_SIZE
    initial_population: int = INITIAL_POPULATION
    popsize: int = 5
    save_database: bool = False

    def validate(self) -> Tuple[Condition, Controller]:
        cond = parse_condition(self.condition)
        if self.budget < self.initial_population:
            raise UsageError("budget must be at least the initial population")
        if self.batch_size <= 0:
            raise UsageError("batch size must be positive")
        return cond, build_controller(cond, self.control, self.budget)


def versions() -> Dict[str, str]:
    return {
        "qdmeta": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class CsvLog:
    def __init__(self, path: Path, columns: Sequence[str]):
        self.columns = list(columns)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.columns)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def run_evolve(config: EvolveConfig) -> Path:
    """Run one condition to budget and write its outputs into ``config.out``."""
    cond, ctl = config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(config),
        "condition": cond.name,
        "family": cond.family,
        "seed": config.seed,
        "damage_test_defaults": {"tolerance": DEFAULT_TOLERANCE, "grid": list(DEFAULT_GRID)},
        "versions": versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if cond.is_meta:
        _run_meta(cond, ctl, config, out)
    else:
        _run_baseline(cond, ctl, config, out)
    return out


def _run_meta(cond: Condition, ctl: Controller, config: EvolveConfig, out: Path) -> None:
    me = MetaEvolution(
        RunConfig(
            kind=cond.kind,
            control=ctl,
            budget=config.budget,
            batch_size=config.batch_size,
            initial_population=config.initial_population,
            popsize=config.popsize,
            seed=config.seed,
        )
    )
    metrics = CsvLog(out / "metrics.csv", META_COLUMNS)
    ctl_log = CsvLog(out / "controller.csv", CONTROLLER_COLUMNS)

    def record(res):
        metrics.write(res.row())
        row = {"meta_generation": res.meta_generation, "reward": res.reward, "value": res.row()["param_value"]}
        row.update(asdict(res.observation))
        row.update(res.controller_info)
        ctl_log.write(row)
        log.info(
            "meta-gen %d evals %d mf max %.1f", res.meta_generation, res.evaluations, res.meta_fitness.max()
        )

    try:
        me.run(record)
    finally:
        metrics.close()
        ctl_log.close()
    me.mean_archive().save_jsonl(out / "archive_mean.jsonl")
    (out / "cma_state.json").write_text(json.dumps(me.cma.to_dict()) + "\n")
    (out / "feature_map.json").write_text(json.dumps(me.feature_map_of(me.cma.clamped_mean()).to_json()) + "\n")
    if config.save_database:
        me.db.save_snapshot(out / "database.kbdb")


def _run_baseline(cond: Condition, ctl: Controller, config: EvolveConfig, out: Path) -> None:
    rng = np.random.default_rng(config.seed)
    if cond.family == "random":
        fmap = random_feature_map(cond.kind, rng)
        dims = fmap.dims
        (out / "feature_map.json").write_text(json.dumps(fmap.to_json()) + "\n")
    else:
        fmap = BASELINES[cond.kind]
        dims = fmap.dims
    archive = BehaviourMap(dims, default_bins(dims))
    # meta-fitness is only measured here, with its own stream so search is unaffected
    probe_rng = np.random.default_rng([config.seed, 1])
    used = seed_map(archive, fmap, config.initial_population, rng)
    generation = 0
    metrics = CsvLog(out / "metrics.csv", BASELINE_COLUMNS)
    try:
        while used < config.budget:
            rate = ctl.current(used)
            used += map_elites_iterations(archive, fmap, 1, rate, rng, batch_size=config.batch_size)
            generation += 1
            if generation % BASELINE_LOG_EVERY == 0 or used >= config.budget:
                m = archive.safe_metrics()
                mf, _ = meta_fitness(archive, train_damage_set(probe_rng), probe_rng)
                metrics.write(
                    dict(generation=generation, evaluations=used, meta_fitness=mf, mutation_rate=rate, **m)
                )
    finally:
        metrics.close()
    archive.save_jsonl(out / "archive.jsonl")


# --------------------------------------------------------------------------
# damage test


def damage_test_set() -> List[arm.Offset]:
    """Offsets of +-0.1 .. +-1.0 pi on every joint (160 damages)."""
    return [
        arm.Offset(s * math.pi, joint) for joint in range(1, arm.N_JOINTS + 1) for s in OFFSET_STEPS
    ]


def parse_grid(grid) -> Tuple[int, int]:
    if isinstance(grid, (tuple, list)):
        r, a = grid
    else:
        try:
            r, a = (int(x) for x in str(grid).lower().split("x"))
        except ValueError:
            raise UsageError(f"grid must look like RxA, e.g. 20x36, got {grid!r}") from None
    if int(r) < 1 or int(a) < 1:
        raise UsageError("grid needs at least one radial and one angular cell")
    return int(r), int(a)


def target_grid(radial: int = DEFAULT_GRID[0], angular: int = DEFAULT_GRID[1]) -> np.ndarray:
    """Cell centres of a polar grid over the lower half-disc of radius L."""
    r = (np.arange(radial) + 0.5) * arm.ARM_LENGTH / radial
    t = math.pi + (np.arange(angular) + 0.5) * math.pi / angular
    R, T = np.meshgrid(r, t, indexing="ij")
    return np.stack([R.ravel() * np.cos(T.ravel()), R.ravel() * np.sin(T.ravel())], axis=1)


def targets_reached(genotypes: np.ndarray, damage, targets: np.ndarray, tolerance: float) -> int:
    if len(genotypes) == 0:
        return 0
    ee, safe = arm.end_effectors(genotypes, damage)
    if not safe.any():
        return 0
    dist, _ = cKDTree(ee[safe]).query(targets, k=1)
    return int(np.count_nonzero(dist <= tolerance))


@dataclass
class DamageTestResult:
    tolerance: float
    grid: Tuple[int, int]
    n_targets: int
    rows: List[dict] = field(default_factory=list)

    @property
    def percentages(self) -> np.ndarray:
        return np.array([r["percent"] for r in self.rows], dtype=float)

    def aggregate(self) -> dict:
        p = self.percentages
        return {"mean": float(p.mean()), "sd": float(p.std()), "n_damages": len(p)}

    def to_json(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "grid": list(self.grid),
            "n_targets": self.n_targets,
            "aggregate": self.aggregate(),
            "per_damage": self.rows,
        }


def run_damage_test(
    archive,
    tolerance: float = DEFAULT_TOLERANCE,
    grid=DEFAULT_GRID,
    damages: Optional[Sequence] = None,
    no_damage: bool = False,
) -> DamageTestResult:
    """Percentage of grid targets reached per damage by some safe archive genotype.

    ``archive`` is a ``BehaviourMap``, an array of genotypes or a JSONL path.
    ``no_damage`` replaces the test set with the single undamaged case.
    """
    if tolerance < 0:
        raise UsageError("tolerance must be non-negative")
    genotypes = _genotypes_of(archive)
    grid = parse_grid(grid)
    targets = target_grid(*grid)
    if no_damage:
        damages = [None]
    elif damages is None:
        damages = damage_test_set()
    result = DamageTestResult(float(tolerance), grid, len(targets))
    for d in damages:
        n = targets_reached(genotypes, d, targets, tolerance)
        result.rows.append(
            {
                "joint": getattr(d, "joint", 0),
                "offset": getattr(d, "epsilon", 0.0),
                "reached": n,
                "percent": 100.0 * n / len(targets),
            }
        )
    return result


def _genotypes_of(archive) -> np.ndarray:
    if isinstance(archive, BehaviourMap):
        return archive.genotypes()
    if isinstance(archive, (str, Path)):
        return BehaviourMap.load_jsonl(archive).genotypes()
    g = np.asarray(archive, dtype=float)
    return g.reshape(-1, arm.N_JOINTS)


def cliffs_delta(a, b) -> float:
    """(#pairs a > b - #pairs a < b) / (n_a n_b), via sorting."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Cliff's delta needs two non-empty samples")
    greater = np.searchsorted(b, a, side="left").sum()
    less = (len(b) - np.searchsorted(b, a, side="right")).sum()
    return float(greater - less) / (len(a) * len(b))


# --------------------------------------------------------------------------
# summaries


def _read_metrics(path: Path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def run_values(run_dir: Path) -> dict:
    """Final meta-fitness (mean over the last 10% of evaluations), final coverage and damage aggregate."""
    m = _read_metrics(run_dir / "metrics.csv")
    if not m:
        raise ValueError(f"{run_dir}: empty metrics")
    ev = m["evaluations"]
    mf = m["meta_fitness_mean"] if "meta_fitness_mean" in m else m["meta_fitness"]
    cov = m["coverage_mean"] if "coverage_mean" in m else m["coverage"]
    window = ev >= ev[-1] - 0.1 * ev[-1]
    out = {"meta_fitness": float(np.mean(mf[window])), "coverage": float(cov[-1])}
    dt = run_dir / "damage_test.json"
    if dt.exists():
        out["damage_test"] = json.loads(dt.read_text())["aggregate"]["mean"]
    return out


def _condition_label(manifest: dict) -> str:
    if manifest.get("family") == "meta":
        return f"{manifest['condition']}/{manifest['config']['control']}"
    return manifest["condition"]


def export_summary(directory) -> dict:
    """Group completed runs under ``directory`` by condition and write summary.json and summary.csv."""
    directory = Path(directory)
    groups: Dict[str, List[dict]] = {}
    for mpath in sorted(directory.rglob("manifest.json")):
        run_dir = mpath.parent
        if not (run_dir / "metrics.csv").exists():
            continue
        manifest = json.loads(mpath.read_text())
        vals = run_values(run_dir)
        vals["run"] = str(run_dir.relative_to(directory))
        vals["seed"] = manifest.get("seed")
        groups.setdefault(_condition_label(manifest), []).append(vals)
    if not groups:
        raise FileNotFoundError(f"no completed runs under {directory}")

    summary = {}
    for label, runs in sorted(groups.items()):
        entry = {"n_runs": len(runs), "runs": runs}
        for key in ("meta_fitness", "coverage", "damage_test"):
            xs = np.array([r[key] for r in runs if key in r], dtype=float)
            if len(xs):
                sd = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
                entry[key] = {"mean": float(xs.mean()), "sd": sd}
        summary[label] = entry

    (directory / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(directory / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["condition", "n_runs", "meta_fitness_mean", "meta_fitness_sd", "coverage_mean",
             "coverage_sd", "damage_test_mean", "damage_test_sd"]
        )
        for label, e in summary.items():
            row = [label, e["n_runs"]]
            for key in ("meta_fitness", "coverage", "damage_test"):
                row += [_fmt(e[key]["mean"]), _fmt(e[key]["sd"])] if key in e else ["", ""]
            w.writerow(row)
    return summary
