"""Grid behaviour-performance map (MAP-Elites archive) and the mutation operator."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .arm import GRID_POINTS

MAX_CELLS = 4096


class EmptyArchiveError(RuntimeError):
    """Raised when an operation needs at least one elite."""


class InsertOutcome(enum.Enum):
    INSERTED_EMPTY = "InsertedEmpty"
    REPLACED_WORSE = "ReplacedWorse"
    REJECTED = "Rejected"

    @property
    def added(self) -> bool:
        return self is not InsertOutcome.REJECTED


@dataclass
class Elite:
    genotype: np.ndarray
    descriptor: np.ndarray
    fitness: float


def bin_index(descriptor, bins_per_dim: int) -> Tuple[int, ...]:
    """Grid cell of a descriptor in [0, 1]^D; the upper edge falls in the last bin."""
    d = np.asarray(descriptor, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0) or np.any(d > 1):
        raise ValueError(f"descriptor outside [0, 1]: {d}")
    idx = np.minimum(np.floor(d * bins_per_dim).astype(np.int64), bins_per_dim - 1)
    return tuple(int(i) for i in idx)


def bin_indices(descriptors: np.ndarray, bins_per_dim: int) -> np.ndarray:
    """Vectorised ``bin_index`` over rows; components are clamped into [0, 1] first."""
    d = np.clip(np.asarray(descriptors, dtype=float), 0.0, 1.0)
    return np.minimum(np.floor(d * bins_per_dim).astype(np.int64), bins_per_dim - 1)


def cell_centre(index, bins_per_dim: int) -> np.ndarray:
    return (np.asarray(index, dtype=float) + 0.5) / bins_per_dim


def mutate(genotypes: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Step each gene by +-0.025 with probability ``rate``, clamped to [0, 1].

    Works on a single genotype or a batch; the result stays on the grid.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mutation rate {rate} outside [0, 1]")
    g = np.asarray(genotypes, dtype=float)
    steps = np.rint(g * (GRID_POINTS - 1)).astype(np.int64)
    hit = rng.random(g.shape) < rate
    sign = np.where(rng.random(g.shape) < 0.5, -1, 1)
    steps = np.clip(steps + hit * sign, 0, GRID_POINTS - 1)
    return steps / (GRID_POINTS - 1)


class BehaviourMap:
    """Sparse grid archive keeping the best-fitness elite per cell.

    Cells are stored in first-insertion order, which makes uniform parent
    selection reproducible for a given random stream.
    """

    def __init__(self, dims: int, bins_per_dim: int):
        if dims < 1 or bins_per_dim < 1:
            raise ValueError("dims and bins_per_dim must be positive")
        if bins_per_dim**dims > MAX_CELLS:
            raise ValueError(
                f"{bins_per_dim}^{dims} cells exceeds the {MAX_CELLS}-cell limit"
            )
        self.dims = dims
        self.bins_per_dim = bins_per_dim
        self.cells: Dict[Tuple[int, ...], Elite] = {}
        self._keys: List[Tuple[int, ...]] = []

    @property
    def capacity(self) -> int:
        return self.bins_per_dim**self.dims

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[Tuple[Tuple[int, ...], Elite]]:
        for key in self._keys:
            yield key, self.cells[key]

    def try_insert(self, genotype, descriptor, fitness: float) -> InsertOutcome:
        d = np.clip(np.asarray(descriptor, dtype=float), 0.0, 1.0)
        if d.shape != (self.dims,):
            raise ValueError(f"descriptor must have shape ({self.dims},), got {d.shape}")
        key = bin_index(d, self.bins_per_dim)
        return self._offer(key, genotype, d, float(fitness))

    def _offer(self, key, genotype, descriptor, fitness) -> InsertOutcome:
        incumbent = self.cells.get(key)
        if incumbent is None:
            self.cells[key] = Elite(np.array(genotype, dtype=float), descriptor, fitness)
            self._keys.append(key)
            return InsertOutcome.INSERTED_EMPTY
        if fitness > incumbent.fitness:
            self.cells[key] = Elite(np.array(genotype, dtype=float), descriptor, fitness)
            return InsertOutcome.REPLACED_WORSE
        return InsertOutcome.REJECTED

    def insert_batch(self, genotypes, descriptors, fitnesses) -> List[InsertOutcome]:
        """Sequential ``try_insert`` over rows, with binning done in one pass."""
        descriptors = np.clip(np.asarray(descriptors, dtype=float), 0.0, 1.0)
        keys = bin_indices(descriptors, self.bins_per_dim)
        return [
            self._offer(tuple(k.tolist()), g, d, float(f))
            for k, g, d, f in zip(keys, genotypes, descriptors, fitnesses)
        ]

    def sample_random(self, rng: np.random.Generator) -> np.ndarray:
        if not self._keys:
            raise EmptyArchiveError("cannot select from an empty map; seed it first")
        key = self._keys[rng.integers(len(self._keys))]
        return self.cells[key].genotype.copy()

    def sample_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` independent uniform draws over occupied cells."""
        if not self._keys:
            raise EmptyArchiveError("cannot select from an empty map; seed it first")
        picks = rng.integers(len(self._keys), size=n)
        return np.stack([self.cells[self._keys[i]].genotype for i in picks])

    def genotypes(self) -> np.ndarray:
        if not self._keys:
            return np.empty((0, 8))
        return np.stack([self.cells[k].genotype for k in self._keys])

    def fitnesses(self) -> np.ndarray:
        return np.array([self.cells[k].fitness for k in self._keys], dtype=float)

    def metrics(self) -> dict:
        """Coverage plus best and mean elite fitness; raises on an empty map."""
        if not self.cells:
            raise EmptyArchiveError("fitness metrics are undefined for an empty map")
        f = self.fitnesses()
        return {
            "coverage": len(f),
            "global_fitness": float(f.max()),
            "average_fitness": float(f.mean()),
        }

    def safe_metrics(self) -> dict:
        """Like ``metrics`` but with NaN fitness entries for an empty map."""
        if not self.cells:
            return {"coverage": 0, "global_fitness": float("nan"), "average_fitness": float("nan")}
        return self.metrics()

    # serialisation -------------------------------------------------------

    def to_records(self) -> List[dict]:
        return [
            {
                "genotype": [float(x) for x in e.genotype],
                "descriptor": [float(x) for x in e.descriptor],
                "fitness": float(e.fitness),
                "bin": list(key),
            }
            for key, e in self
        ]

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path, bins_per_dim: int | None = None) -> "BehaviourMap":
        """Load an archive file; the grid size is inferred from the stored bins if not given."""
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not records:
            return cls(dims=1, bins_per_dim=1)
        dims = len(records[0]["descriptor"])
        if bins_per_dim is None:
            bins_per_dim = default_bins(dims)
        archive = cls(dims, bins_per_dim)
        for rec in records:
            key = tuple(int(i) for i in rec["bin"])
            archive.cells[key] = Elite(
                np.array(rec["genotype"], dtype=float),
                np.array(rec["descriptor"], dtype=float),
                float(rec["fitness"]),
            )
            archive._keys.append(key)
        return archive


def default_bins(dims: int) -> int:
    """Largest equal per-axis resolution within the 4096-cell limit (64, 16, 8, 5, 4, ...)."""
    b = int(round(MAX_CELLS ** (1.0 / dims)))
    while b**dims > MAX_CELLS:
        b -= 1
    return max(b, 1)
