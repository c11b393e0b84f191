"""Feature-maps from the 14 base-features to a low-dimensional descriptor.

Three parametrised maps are evolvable (linear, selection, non-linear).  The
hand-designed baseline spaces are exposed through the same ``apply``
interface so that archives and the database can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from .arm import N_BASE_FEATURES

N_TARGET = 4
N_HIDDEN = 10
SIGMOID_SCALE = 30.0
NORM_LOW, NORM_HIGH = 0.20, 0.80

KINDS = ("linear", "selection", "nonlinear")


class ConfigurationError(ValueError):
    """Inconsistent feature-map or controller configuration."""


def genome_length(kind: str) -> int:
    if kind in ("linear", "selection"):
        return N_TARGET * N_BASE_FEATURES
    if kind == "nonlinear":
        return N_HIDDEN * N_BASE_FEATURES + N_TARGET * N_HIDDEN + 2
    raise ConfigurationError(f"unknown feature-map kind {kind!r}")


def gene_box(kind: str) -> Tuple[float, float]:
    genome_length(kind)
    return (-1.0, 1.0) if kind == "nonlinear" else (0.0, 1.0)


def scaled_sigmoid(x, n_inputs: int):
    """``1 / (1 + exp(-alpha * x / (n_inputs + 1)))``."""
    return expit(SIGMOID_SCALE * np.asarray(x, dtype=float) / (n_inputs + 1))


@dataclass(frozen=True)
class FeatureMap:
    kind: str
    W: Optional[np.ndarray] = None  # (4, 14) for linear/selection
    W1: Optional[np.ndarray] = None  # (10, 14)
    W2: Optional[np.ndarray] = None  # (4, 10)
    B1: float = 0.0
    B2: float = 0.0
    dims: int = field(default=N_TARGET)

    def __call__(self, b):
        return apply(self, b)

    def to_json(self) -> dict:
        return {"kind": self.kind, "genes": [float(x) for x in flatten(self)]}

    @classmethod
    def from_json(cls, data: dict) -> "FeatureMap":
        return decode(np.asarray(data["genes"], dtype=float), data["kind"])


def decode(genes, kind: str) -> FeatureMap:
    """Row-major unpacking; non-linear order is W1, W2, B1, B2."""
    w = np.asarray(genes, dtype=float)
    n = genome_length(kind)
    if w.shape != (n,):
        raise ConfigurationError(f"{kind} feature-map needs {n} genes, got {w.shape}")
    if kind in ("linear", "selection"):
        return FeatureMap(kind, W=w.reshape(N_TARGET, N_BASE_FEATURES).copy())
    n1 = N_HIDDEN * N_BASE_FEATURES
    n2 = N_TARGET * N_HIDDEN
    return FeatureMap(
        kind,
        W1=w[:n1].reshape(N_HIDDEN, N_BASE_FEATURES).copy(),
        W2=w[n1 : n1 + n2].reshape(N_TARGET, N_HIDDEN).copy(),
        B1=float(w[n1 + n2]),
        B2=float(w[n1 + n2 + 1]),
    )


def flatten(params: FeatureMap) -> np.ndarray:
    if params.kind in ("linear", "selection"):
        return params.W.ravel().copy()
    return np.concatenate([params.W1.ravel(), params.W2.ravel(), [params.B1, params.B2]])


def apply_linear(params: FeatureMap, b) -> np.ndarray:
    """Row-normalised weighted sum, then expanding normalisation from [0.2, 0.8] to [0, 1]."""
    b = np.asarray(b, dtype=float)
    W = params.W
    rowsum = W.sum(axis=1)
    degenerate = rowsum == 0
    Wn = W / np.where(degenerate, 1.0, rowsum)[:, None]
    beta = b @ Wn.T
    beta = (beta - NORM_LOW) / (NORM_HIGH - NORM_LOW)
    beta = np.where(degenerate, 0.5, beta)
    return np.clip(beta, 0.0, 1.0)


def apply_selection(params: FeatureMap, b) -> np.ndarray:
    """Pick, per target feature, the base-feature with the largest weight (lowest index on ties)."""
    b = np.asarray(b, dtype=float)
    cols = np.argmax(params.W, axis=1)
    return b[..., cols]


def apply_nonlinear(params: FeatureMap, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    h = scaled_sigmoid(b @ params.W1.T + params.B1, N_BASE_FEATURES)
    f = h @ params.W2.T + params.B2
    return scaled_sigmoid(f, N_HIDDEN)


@dataclass(frozen=True)
class BaselineSpace:
    """A fixed slice of the base-features used directly as the descriptor."""

    name: str
    start: int
    stop: int

    @property
    def dims(self) -> int:
        return self.stop - self.start

    def __call__(self, b):
        return np.clip(np.asarray(b, dtype=float)[..., self.start : self.stop], 0.0, 1.0)


BASELINES = {
    "position": BaselineSpace("position", 0, 2),
    "polar": BaselineSpace("polar", 2, 4),
    "jointpairangle": BaselineSpace("jointpairangle", 4, 8),
    "anglesum": BaselineSpace("anglesum", 8, 14),
}

_APPLY = {"linear": apply_linear, "selection": apply_selection, "nonlinear": apply_nonlinear}


def apply(params: FeatureMap, b) -> np.ndarray:
    return _APPLY[params.kind](params, b)
