"""k-best solution database.

The 14-dimensional base-feature space is cut into coarse bins of width
``delta``.  Each coarse bin keeps at most ``k`` solutions and, inside a bin,
at most one solution per fine hypercube of width ``delta / k``.  When the
total capacity is reached, ``k`` shrinks and every over-full bin drops its
worst solution.

Snapshot format (little-endian)::

    b"KBDB"  magic
    u32      format version (1)
    f64 delta, u32 k, u64 capacity, u64 n_records
    n_records x (u32 payload length, payload)
    payload = u64 sequence number, 8 x f64 genotype, 14 x f64 base-features, f64 fitness
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .archive import BehaviourMap
from .arm import N_BASE_FEATURES, N_JOINTS

DEFAULT_DELTA = 1.0 / 3.0
DEFAULT_K = 5000
DEFAULT_CAPACITY = 3**N_BASE_FEATURES

SNAPSHOT_MAGIC = b"KBDB"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIdIQQ")
_PAYLOAD = struct.Struct("<Q" + "d" * (N_JOINTS + N_BASE_FEATURES + 1))


class DatabaseFullError(RuntimeError):
    """Capacity exceeded with ``k`` already at 1."""


class DbOutcome(enum.Enum):
    ADDED = "Added"
    REPLACED_SIMILAR = "ReplacedSimilar"
    REJECTED_LOWER_FITNESS = "RejectedLowerFitness"
    EVICTED_WORST = "EvictedWorst"


@dataclass(frozen=True)
class SolutionRecord:
    genotype: np.ndarray
    base_features: np.ndarray
    fitness: float


class _Bin:
    """Growable column storage for one coarse bin; removal is swap-with-last."""

    __slots__ = ("genotypes", "features", "fitness", "seq", "n", "fine", "fine_k", "keys", "shared")

    def __init__(self):
        self.genotypes = np.empty((8, N_JOINTS))
        self.features = np.empty((8, N_BASE_FEATURES))
        self.fitness = np.empty(8)
        self.seq = np.empty(8, dtype=np.int64)
        self.n = 0
        self.fine: Dict[bytes, int] = {}
        self.fine_k = -1
        self.keys: List[bytes] = []  # fine key per slot, valid while fine_k is current
        self.shared = False  # some fine cube holds more than one resident

    def append(self, g, b, f, seq, key: bytes) -> int:
        if self.n == len(self.fitness):
            cap = 2 * self.n
            self.genotypes = np.resize(self.genotypes, (cap, N_JOINTS))
            self.features = np.resize(self.features, (cap, N_BASE_FEATURES))
            self.fitness = np.resize(self.fitness, cap)
            self.seq = np.resize(self.seq, cap)
        i = self.n
        self.genotypes[i] = g
        self.features[i] = b
        self.fitness[i] = f
        self.seq[i] = seq
        self.keys.append(key)
        self.fine[key] = i
        self.n += 1
        return i

    def worst(self) -> int:
        # lowest fitness, oldest first among ties
        f = self.fitness[: self.n]
        candidates = np.flatnonzero(f == f.min())
        return int(candidates[np.argmin(self.seq[candidates])])

    def remove(self, i: int) -> None:
        last = self.n - 1
        if self.shared:
            self.fine_k = -1  # rebuild lazily
        else:
            del self.fine[self.keys[i]]
            if i != last:
                self.fine[self.keys[last]] = i
        if i != last:
            self.genotypes[i] = self.genotypes[last]
            self.features[i] = self.features[last]
            self.fitness[i] = self.fitness[last]
            self.seq[i] = self.seq[last]
            self.keys[i] = self.keys[last]
        self.keys.pop()
        self.n -= 1


class KBestDatabase:
    def __init__(
        self,
        delta: float = DEFAULT_DELTA,
        k: int = DEFAULT_K,
        capacity: int = DEFAULT_CAPACITY,
    ):
        n = int(round(1.0 / delta))
        if n < 1 or abs(n * delta - 1.0) > 1e-9:
            raise ValueError(f"delta must be 1/n for an integer n, got {delta}")
        if k < 1 or capacity < 1:
            raise ValueError("k and capacity must be positive")
        self.delta = delta
        self.bins_per_dim = n
        self.k = k
        self.capacity = capacity
        self.bins: Dict[Tuple[int, ...], _Bin] = {}
        self.size = 0
        self._seq = 0
        self._version = 0
        self._flat_cache = None

    def __len__(self) -> int:
        return self.size

    # indexing --------------------------------------------------------------

    def coarse_index(self, b) -> Tuple[int, ...]:
        b = np.asarray(b, dtype=float)
        if b.shape != (N_BASE_FEATURES,) or np.any(b < 0) or np.any(b > 1):
            raise ValueError(f"base-features must be a 14-vector in [0, 1], got {b}")
        return tuple(int(i) for i in self._coarse(b))

    def _coarse(self, b: np.ndarray) -> np.ndarray:
        n = self.bins_per_dim
        return np.minimum(np.floor(b * n).astype(np.int64), n - 1)

    def _fine(self, b: np.ndarray, coarse: np.ndarray, k: int) -> np.ndarray:
        """Fine-cube index (width delta/k) relative to the coarse bin's corner."""
        scaled = np.floor(b * (self.bins_per_dim * k)).astype(np.int64)
        return np.clip(scaled - coarse * k, 0, k - 1)

    def _refresh_fine(self, bin_: _Bin) -> None:
        if bin_.fine_k == self.k:
            return
        feats = bin_.features[: bin_.n]
        coarse = self._coarse(feats)
        keys = self._fine(feats, coarse, self.k)
        fine: Dict[bytes, int] = {}
        slot_keys = [key.tobytes() for key in keys]
        for i, kb in enumerate(slot_keys):
            j = fine.get(kb)
            # after k shrinks two residents may share a cube; compare against the best
            if j is None or bin_.fitness[i] > bin_.fitness[j]:
                fine[kb] = i
        bin_.fine = fine
        bin_.keys = slot_keys
        bin_.shared = len(fine) < bin_.n
        bin_.fine_k = self.k

    # mutation --------------------------------------------------------------

    def insert(self, record: SolutionRecord) -> DbOutcome:
        b = np.asarray(record.base_features, dtype=float)
        if b.shape != (N_BASE_FEATURES,) or np.any(b < 0) or np.any(b > 1):
            raise ValueError("record base-features must be a 14-vector in [0, 1]")
        return self._insert(np.asarray(record.genotype, dtype=float), b, float(record.fitness))

    def insert_many(self, genotypes, features, fitnesses) -> List[DbOutcome]:
        return [
            self._insert(g, b, float(f))
            for g, b, f in zip(np.asarray(genotypes, float), np.asarray(features, float), fitnesses)
        ]

    def _insert(self, g: np.ndarray, b: np.ndarray, f: float) -> DbOutcome:
        coarse = self._coarse(b)
        key = tuple(coarse.tolist())
        bin_ = self.bins.get(key)
        fine_key = self._fine(b, coarse, self.k).tobytes()
        if bin_ is not None:
            self._refresh_fine(bin_)
            j = bin_.fine.get(fine_key)
            if j is not None:
                if f > bin_.fitness[j]:
                    bin_.genotypes[j] = g
                    bin_.features[j] = b
                    bin_.fitness[j] = f
                    bin_.seq[j] = self._next_seq()
                    self._touch()
                    return DbOutcome.REPLACED_SIMILAR
                return DbOutcome.REJECTED_LOWER_FITNESS
        if self.size >= self.capacity:
            while self.size >= self.capacity:
                self.shrink()
            # k changed, so the fine-cube width did too
            return self._insert(g, b, f)
        if bin_ is None:
            bin_ = self.bins[key] = _Bin()
            bin_.fine_k = self.k
        bin_.append(g, b, f, self._next_seq(), fine_key)
        self.size += 1
        self._touch()
        if bin_.n > self.k:
            bin_.remove(bin_.worst())
            self.size -= 1
            return DbOutcome.EVICTED_WORST
        return DbOutcome.ADDED

    def shrink(self) -> int:
        """Decrement ``k`` and drop the worst record of every bin now above it."""
        if self.k <= 1:
            raise DatabaseFullError("database capacity exceeded with k = 1")
        self.k -= 1
        for bin_ in self.bins.values():
            if bin_.n > self.k:
                bin_.remove(bin_.worst())
                self.size -= 1
            bin_.fine_k = -1
        self._touch()
        return self.k

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _touch(self) -> None:
        self._version += 1
        self._flat_cache = None

    # reading ---------------------------------------------------------------

    def bin_sizes(self) -> Dict[Tuple[int, ...], int]:
        return {key: b.n for key, b in self.bins.items()}

    def arrays(self):
        """All records as ``(genotypes, base_features, fitness)`` in iteration order.

        Iteration order is coarse bins sorted by index, then insertion order
        inside each bin.  The result is cached until the next mutation.
        """
        if self._flat_cache is None:
            gs, bs, fs = [], [], []
            for key in sorted(self.bins):
                bin_ = self.bins[key]
                order = np.argsort(bin_.seq[: bin_.n], kind="stable")
                gs.append(bin_.genotypes[order])
                bs.append(bin_.features[order])
                fs.append(bin_.fitness[order])
            if gs:
                self._flat_cache = (np.concatenate(gs), np.concatenate(bs), np.concatenate(fs))
            else:
                self._flat_cache = (
                    np.empty((0, N_JOINTS)),
                    np.empty((0, N_BASE_FEATURES)),
                    np.empty(0),
                )
        return self._flat_cache

    def records(self) -> Iterable[SolutionRecord]:
        g, b, f = self.arrays()
        for i in range(len(f)):
            yield SolutionRecord(g[i], b[i], float(f[i]))

    # persistence -----------------------------------------------------------

    def save_snapshot(self, path) -> None:
        items = []
        for key in sorted(self.bins):
            bin_ = self.bins[key]
            for i in range(bin_.n):
                items.append((int(bin_.seq[i]), bin_.genotypes[i], bin_.features[i], bin_.fitness[i]))
        items.sort(key=lambda t: t[0])
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.delta, self.k, self.capacity, len(items)
                )
            )
            for seq, g, b, f in items:
                payload = _PAYLOAD.pack(seq, *g.tolist(), *b.tolist(), float(f))
                fh.write(struct.pack("<I", len(payload)))
                fh.write(payload)

    @classmethod
    def load_snapshot(cls, path) -> "KBestDatabase":
        with open(path, "rb") as fh:
            data = fh.read()
        magic, version, delta, k, capacity, n = _HEADER.unpack_from(data, 0)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a database snapshot")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        db = cls(delta=delta, k=k, capacity=capacity)
        off = _HEADER.size
        for _ in range(n):
            (length,) = struct.unpack_from("<I", data, off)
            off += 4
            vals = _PAYLOAD.unpack_from(data, off)
            off += length
            seq = vals[0]
            g = np.array(vals[1 : 1 + N_JOINTS])
            b = np.array(vals[1 + N_JOINTS : 1 + N_JOINTS + N_BASE_FEATURES])
            f = vals[-1]
            key = tuple(db._coarse(b).tolist())
            bin_ = db.bins.get(key)
            if bin_ is None:
                bin_ = db.bins[key] = _Bin()
            bin_.append(g, b, f, seq, b"")
            bin_.fine_k = -1
            db.size += 1
            db._seq = max(db._seq, seq)
        db._touch()
        return db

    def export_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(
                    json.dumps(
                        {
                            "genotype": rec.genotype.tolist(),
                            "base_features": rec.base_features.tolist(),
                            "fitness": rec.fitness,
                        }
                    )
                    + "\n"
                )


def build_map(db: KBestDatabase, feature_map, bins_per_dim: int, dims: Optional[int] = None) -> BehaviourMap:
    """Fresh archive filled from every database record through ``feature_map``.

    Equivalent to offering records one by one in iteration order with the
    strict-improvement rule: per cell the highest fitness wins and the
    earliest record wins ties.  Cells appear in order of first arrival.
    """
    dims = dims if dims is not None else feature_map.dims
    archive = BehaviourMap(dims, bins_per_dim)
    g, b, f = db.arrays()
    if len(f) == 0:
        return archive
    beta = np.clip(feature_map(b), 0.0, 1.0)
    cells = np.minimum(np.floor(beta * bins_per_dim).astype(np.int64), bins_per_dim - 1)
    flat = np.ravel_multi_index(cells.T, (bins_per_dim,) * dims)
    order = np.arange(len(f))
    # primary key cell, then fitness descending, then arrival
    ranked = np.lexsort((order, -f, flat))
    first_of_cell = np.r_[True, flat[ranked][1:] != flat[ranked][:-1]]
    winners = ranked[first_of_cell]
    _, first_arrival = np.unique(flat, return_index=True)
    # winners and first_arrival are both sorted by cell id
    for w in winners[np.argsort(first_arrival, kind="stable")]:
        archive._offer(tuple(cells[w].tolist()), g[w], beta[w], float(f[w]))
    return archive
