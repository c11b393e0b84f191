"""(mu/mu_W, lambda)-CMA-ES with active covariance update, for maximisation.

Strategy constants and the weight profile are the usual defaults from
Hansen's CMA-ES tutorial; sampled points are clamped into the search box
for evaluation while the unclamped steps drive every update.  Ranking adds
a boundary penalty and the mean is kept inside the box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

DEFAULT_POPSIZE = 5
REPAIR_RATIO = 1e-12
REPAIR_JITTER = 1e-10


class CovarianceError(RuntimeError):
    pass


def default_weights(popsize: int, dim: int):
    """Recombination weights and learning rates for a population of ``popsize``.

    Returns ``(weights, mu, mu_eff, constants)`` where positive weights sum
    to one and negative weights are scaled by the usual active-CMA bound.
    """
    lam = popsize
    mu = lam // 2
    raw = math.log((lam + 1) / 2) - np.log(np.arange(1, lam + 1))
    pos = raw[raw > 0]
    neg = raw[raw < 0]
    mu_eff = pos.sum() ** 2 / (pos**2).sum()
    mu_eff_neg = neg.sum() ** 2 / (neg**2).sum() if len(neg) else 0.0

    n = dim
    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))

    alpha_mu = 1 + c_1 / c_mu
    alpha_mu_eff = 1 + 2 * mu_eff_neg / (mu_eff + 2)
    alpha_posdef = (1 - c_1 - c_mu) / (n * c_mu)
    neg_scale = min(alpha_mu, alpha_mu_eff, alpha_posdef)

    weights = np.where(
        raw >= 0,
        raw / pos.sum(),
        neg_scale * raw / (np.abs(neg).sum() if len(neg) else 1.0),
    )
    consts = dict(c_m=1.0, c_sigma=c_sigma, d_sigma=d_sigma, c_c=c_c, c_1=c_1, c_mu=c_mu)
    return weights, mu, mu_eff, consts


def expected_norm(n: int) -> float:
    """Approximation of E||N(0, I_n)||."""
    return math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))


@dataclass
class CmaState:
    dim: int
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_c: np.ndarray
    p_sigma: np.ndarray
    weights: np.ndarray
    popsize: int
    mu: int
    mu_eff: float
    c_m: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    lower: np.ndarray
    upper: np.ndarray
    generation: int = 0
    # last ask batch: unclamped steps s_i (rows), shape (lambda, n)
    steps: Optional[np.ndarray] = field(default=None, repr=False)
    _B: Optional[np.ndarray] = field(default=None, repr=False)
    _D: Optional[np.ndarray] = field(default=None, repr=False)
    _outside: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def init(cls, dim: int, box: Tuple[float, float] | Sequence, popsize: int = DEFAULT_POPSIZE):
        """Start at the box midpoint with sigma a third of the box width and C = I."""
        if dim < 1:
            raise ValueError("dim must be >= 1")
        lower, upper = _box_arrays(box, dim)
        if np.any(upper <= lower):
            raise ValueError("box upper bounds must exceed lower bounds")
        width = upper - lower
        if not np.allclose(width, width[0]):
            raise ValueError("a single step size needs equal box widths")
        weights, mu, mu_eff, consts = default_weights(popsize, dim)
        return cls(
            dim=dim,
            mean=(lower + upper) / 2,
            sigma=float(width[0]) / 3,
            C=np.eye(dim),
            p_c=np.zeros(dim),
            p_sigma=np.zeros(dim),
            weights=weights,
            popsize=popsize,
            mu=mu,
            mu_eff=mu_eff,
            lower=lower,
            upper=upper,
            **consts,
        )

    # sampling ------------------------------------------------------------

    def _eigensystem(self):
        if self._B is None:
            try:
                self._decompose()
            except (np.linalg.LinAlgError, CovarianceError):
                self.C = self.C + REPAIR_JITTER * np.eye(self.dim)
                try:
                    self._decompose()
                except np.linalg.LinAlgError as exc:
                    raise CovarianceError("covariance decomposition failed after repair") from exc
        return self._B, self._D

    def _decompose(self):
        C = (self.C + self.C.T) / 2
        if not np.all(np.isfinite(C)):
            raise CovarianceError("non-finite covariance matrix")
        evals, B = np.linalg.eigh(C)
        if evals.min() <= REPAIR_RATIO * evals.max():
            C = C + REPAIR_JITTER * np.eye(self.dim)
            evals, B = np.linalg.eigh(C)
            if evals.min() <= 0:
                raise np.linalg.LinAlgError("covariance not positive definite")
        self.C = C
        self._B, self._D = B, np.sqrt(evals)

    def ask(self, rng: np.random.Generator) -> np.ndarray:
        """Sample ``popsize`` candidates; returns them clamped into the box."""
        B, D = self._eigensystem()
        z = rng.standard_normal((self.popsize, self.dim))
        self.steps = (z * D) @ B.T
        raw = self.mean + self.sigma * self.steps
        clamped = np.clip(raw, self.lower, self.upper)
        self._outside = np.sum((raw - clamped) ** 2, axis=1)
        return clamped

    def _penalised(self, f: np.ndarray) -> np.ndarray:
        """Fitness minus a quadratic penalty on how far each raw sample left the box.

        Clamped evaluation is flat outside the box, so without this the mean
        drifts along boundary directions and sigma grows unchecked.  The
        penalty is measured in units of sigma and scaled by the batch's
        fitness spread, keeping the ranking invariant to fitness offsets.
        """
        outside = getattr(self, "_outside", None)
        if outside is None or not np.any(outside > 0):
            return f
        finite = f[np.isfinite(f)]
        spread = float(np.ptp(finite)) if len(finite) > 1 else 0.0
        scale = spread if spread > 0 else 1.0
        return f - scale * outside / (self.sigma**2 * self.dim)

    def _invsqrt_apply(self, y: np.ndarray) -> np.ndarray:
        B, D = self._eigensystem()
        return ((y @ B) / D) @ B.T

    # update --------------------------------------------------------------

    def tell(self, fitnesses) -> "CmaState":
        """Update the distribution from the fitness of the last ``ask`` batch (higher is better)."""
        f = np.asarray(fitnesses, dtype=float)
        if self.steps is None:
            raise RuntimeError("tell() called before ask()")
        if f.shape != (self.popsize,):
            raise ValueError(f"expected {self.popsize} fitness values, got shape {f.shape}")
        f = np.where(np.isfinite(f), f, -np.inf)
        order = np.argsort(-self._penalised(f), kind="stable")
        y = self.steps[order]
        n = self.dim
        w = self.weights

        y_w = w[: self.mu] @ y[: self.mu]
        # the mean is projected into the box: clamped evaluation is flat outside it
        self.mean = np.clip(self.mean + self.c_m * self.sigma * y_w, self.lower, self.upper)

        cs = self.c_sigma
        self.p_sigma = (1 - cs) * self.p_sigma + math.sqrt(cs * (2 - cs) * self.mu_eff) * self._invsqrt_apply(y_w)
        norm_ps = float(np.linalg.norm(self.p_sigma))
        chi_n = expected_norm(n)
        h_sigma = norm_ps / math.sqrt(1 - (1 - cs) ** (2 * (self.generation + 1))) < (1.4 + 2 / (n + 1)) * chi_n
        cc = self.c_c
        self.p_c = (1 - cc) * self.p_c + h_sigma * math.sqrt(cc * (2 - cc) * self.mu_eff) * y_w

        w_circ = w.copy()
        negative = w < 0
        if np.any(negative):
            mahal = np.sum(self._invsqrt_apply(y[negative]) ** 2, axis=1)
            w_circ[negative] *= n / np.maximum(mahal, 1e-300)
        delta_h = (1 - h_sigma) * cc * (2 - cc)
        rank_mu = (y * w_circ[:, None]).T @ y
        self.C = (
            (1 + self.c_1 * delta_h - self.c_1 - self.c_mu * w.sum()) * self.C
            + self.c_1 * np.outer(self.p_c, self.p_c)
            + self.c_mu * rank_mu
        )
        self.C = (self.C + self.C.T) / 2

        # exponent capped at 1 like pycma, so sigma can at most grow e-fold per step
        self.sigma *= math.exp(min(1.0, (cs / self.d_sigma) * (norm_ps / chi_n - 1)))

        self.generation += 1
        self.steps = None
        self._outside = None
        self._B = self._D = None
        return self

    # snapshots -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "popsize": self.popsize,
            "mean": self.mean.tolist(),
            "sigma": self.sigma,
            "C": self.C.tolist(),
            "p_c": self.p_c.tolist(),
            "p_sigma": self.p_sigma.tolist(),
            "generation": self.generation,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CmaState":
        state = cls.init(
            data["dim"], (np.array(data["lower"]), np.array(data["upper"])), data["popsize"]
        )
        state.mean = np.array(data["mean"], dtype=float)
        state.sigma = float(data["sigma"])
        state.C = np.array(data["C"], dtype=float)
        state.p_c = np.array(data["p_c"], dtype=float)
        state.p_sigma = np.array(data["p_sigma"], dtype=float)
        state.generation = int(data["generation"])
        return state

    def clamped_mean(self) -> np.ndarray:
        return np.clip(self.mean, self.lower, self.upper)


def _box_arrays(box, dim):
    lo, hi = box
    lower = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    upper = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    return lower, upper
