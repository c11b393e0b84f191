"""Analytic 8-joint planar arm: kinematics, collision safety, damages and descriptors.

The arm hangs from the origin and points straight down when every joint
command is 0.5.  Joint ``i`` turns the chain by ``pi * (g_i - 0.5)`` radians
counter-clockwise relative to the previous segment.

Everything is vectorised over a leading batch axis; the single-genotype
functions are thin wrappers used mostly by tests and small scripts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

N_JOINTS = 8
SEGMENT_LENGTH = 0.0775
ARM_LENGTH = N_JOINTS * SEGMENT_LENGTH  # 0.62 m
N_BASE_FEATURES = 14
GENE_STEP = 0.025
GRID_POINTS = 41

# numerical slack for the wall test and for touching segments
WALL_EPS = 1e-9
CROSS_EPS = 1e-12

HALF_PI = np.pi / 2
TWO_PI = 2 * np.pi

# non-adjacent segment pairs (i, j), i < j - 1
_PAIRS = np.array([(i, j) for i in range(N_JOINTS) for j in range(i + 2, N_JOINTS)])
_PAIR_I = _PAIRS[:, 0]
_PAIR_J = _PAIRS[:, 1]


@dataclass(frozen=True)
class StuckJoint:
    """Joint ``joint`` (1-based) is frozen at ``angle`` radians."""

    joint: int
    angle: float

    def __post_init__(self):
        if not 1 <= self.joint <= N_JOINTS:
            raise ValueError(f"joint must be in 1..{N_JOINTS}, got {self.joint}")
        if not -HALF_PI <= self.angle <= HALF_PI:
            raise ValueError(f"stuck angle {self.angle} outside [-pi/2, pi/2]")


@dataclass(frozen=True)
class Offset:
    """Joint ``joint`` (1-based) receives an additive error ``epsilon``, then is clamped."""

    epsilon: float
    joint: int

    def __post_init__(self):
        if not 1 <= self.joint <= N_JOINTS:
            raise ValueError(f"joint must be in 1..{N_JOINTS}, got {self.joint}")
        if not -np.pi <= self.epsilon <= np.pi:
            raise ValueError(f"offset {self.epsilon} outside [-pi, pi]")


Damage = Optional[Union[StuckJoint, Offset]]


@dataclass(frozen=True)
class ArmPose:
    joint_positions: np.ndarray  # (9, 2), base first
    joint_angles: np.ndarray  # (8,) relative angles

    @property
    def end_effector(self) -> np.ndarray:
        return self.joint_positions[-1]


@dataclass(frozen=True)
class Evaluation:
    base_features: np.ndarray
    fitness: float
    end_effector: np.ndarray
    safe: bool


@dataclass(frozen=True)
class EvaluationBatch:
    """Column-wise results for ``n`` genotypes."""

    base_features: np.ndarray  # (n, 14)
    fitness: np.ndarray  # (n,)
    end_effector: np.ndarray  # (n, 2)
    safe: np.ndarray  # (n,) bool

    def __len__(self):
        return len(self.fitness)


def check_genotype(genotype) -> np.ndarray:
    """Return ``genotype`` as a float array after validating length and grid membership."""
    g = np.asarray(genotype, dtype=float)
    if g.shape[-1] != N_JOINTS:
        raise ValueError(f"genotype must have {N_JOINTS} genes, got shape {g.shape}")
    steps = g / GENE_STEP
    if np.any(g < 0) or np.any(g > 1) or np.any(np.abs(steps - np.round(steps)) > 1e-9):
        raise ValueError("genes must lie on the 0.025 grid in [0, 1]")
    return g


def random_genotypes(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws over the 41-point grid of every gene."""
    return rng.integers(0, GRID_POINTS, size=(n, N_JOINTS)) / (GRID_POINTS - 1)


def joint_angles(genotypes: np.ndarray, damage: Damage = None) -> np.ndarray:
    """Relative joint angles for a batch of genotypes, with ``damage`` applied."""
    theta = np.pi * (np.asarray(genotypes, dtype=float) - 0.5)
    if damage is None:
        return theta
    theta = theta.copy()
    j = damage.joint - 1
    if isinstance(damage, StuckJoint):
        theta[..., j] = damage.angle
    elif isinstance(damage, Offset):
        theta[..., j] = np.clip(theta[..., j] + damage.epsilon, -HALF_PI, HALF_PI)
    else:
        raise TypeError(f"unknown damage {damage!r}")
    return theta


def positions_from_angles(theta: np.ndarray) -> np.ndarray:
    """Joint positions ``(..., 9, 2)`` from relative angles ``(..., 8)``."""
    heading = np.cumsum(theta, axis=-1)
    seg = np.stack([np.sin(heading), -np.cos(heading)], axis=-1) * SEGMENT_LENGTH
    pos = np.zeros(theta.shape[:-1] + (N_JOINTS + 1, 2))
    np.cumsum(seg, axis=-2, out=pos[..., 1:, :])
    return pos


def forward_kinematics(genotype, damage: Damage = None) -> ArmPose:
    g = check_genotype(genotype)
    theta = joint_angles(g, damage)
    return ArmPose(joint_positions=positions_from_angles(theta), joint_angles=theta)


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (
        b[..., 0] - o[..., 0]
    )


def _on_segment(p, q, r):
    """r lies within the bounding box of segment pq (collinearity checked by caller)."""
    lo = np.minimum(p, q) - CROSS_EPS
    hi = np.maximum(p, q) + CROSS_EPS
    return np.all((r >= lo) & (r <= hi), axis=-1)


def segments_intersect(a, b, c, d) -> np.ndarray:
    """Closed-segment intersection test for segments ab and cd (broadcasting)."""
    d1 = _cross(c, d, a)
    d2 = _cross(c, d, b)
    d3 = _cross(a, b, c)
    d4 = _cross(a, b, d)
    s1, s2, s3, s4 = (np.where(np.abs(x) < CROSS_EPS, 0, np.sign(x)) for x in (d1, d2, d3, d4))
    proper = (s1 * s2 < 0) & (s3 * s4 < 0)
    touch = (
        ((s1 == 0) & _on_segment(c, d, a))
        | ((s2 == 0) & _on_segment(c, d, b))
        | ((s3 == 0) & _on_segment(a, b, c))
        | ((s4 == 0) & _on_segment(a, b, d))
    )
    return proper | touch


def safe_mask(positions: np.ndarray) -> np.ndarray:
    """Safety of a batch of poses given joint positions ``(n, 9, 2)``."""
    wall = np.any(positions[..., 1] > WALL_EPS, axis=-1)
    start = positions[..., :-1, :]
    end = positions[..., 1:, :]
    hits = segments_intersect(
        start[..., _PAIR_I, :], end[..., _PAIR_I, :], start[..., _PAIR_J, :], end[..., _PAIR_J, :]
    )
    return ~(wall | np.any(hits, axis=-1))


def check_safe(pose: ArmPose) -> bool:
    return bool(safe_mask(pose.joint_positions[None])[0])


def fitness_batch(genotypes: np.ndarray) -> np.ndarray:
    """Negative variance of the gene values (population variance, divisor 8).

    Evaluated in integer grid units so the result is the correctly rounded
    value of the exact rational variance.
    """
    k = np.rint(np.asarray(genotypes, dtype=float) * (GRID_POINTS - 1)).astype(np.int64)
    num = N_JOINTS * np.sum(k * k, axis=-1) - np.sum(k, axis=-1) ** 2
    return -num / float(N_JOINTS * N_JOINTS * (GRID_POINTS - 1) ** 2) + 0.0


def fitness(genotype) -> float:
    return float(fitness_batch(check_genotype(genotype)))


def _polar_angle(x, y):
    # angle in (0, 2pi]; lower half-plane lands in [pi, 2pi]
    theta = np.arctan2(y, x)
    return np.where(theta <= 0, theta + TWO_PI, theta)


def base_features_batch(positions: np.ndarray, genotypes: np.ndarray) -> np.ndarray:
    """The 14 base-features: Position(2), Polar(2), JointPairAngle(4), AngleSum(6)."""
    g = np.asarray(genotypes, dtype=float)
    ee = positions[..., -1, :]
    x, y = ee[..., 0], ee[..., 1]
    out = np.empty(g.shape[:-1] + (N_BASE_FEATURES,))
    out[..., 0] = (x + ARM_LENGTH) / (2 * ARM_LENGTH)
    out[..., 1] = -y / ARM_LENGTH
    out[..., 2] = np.hypot(x, y) / ARM_LENGTH
    out[..., 3] = (_polar_angle(x, y) - np.pi) / np.pi
    chord = positions[..., 2::2, :] - positions[..., 0:-1:2, :]
    ang = np.mod(np.arctan2(chord[..., 1], chord[..., 0]), TWO_PI)
    ang = np.where(ang >= TWO_PI, 0.0, ang)
    out[..., 4:8] = ang / TWO_PI
    for k in range(6):
        out[..., 8 + k] = g[..., k : k + 3].mean(axis=-1)
    return np.clip(out, 0.0, 1.0)


def base_features(pose: ArmPose, genotype) -> np.ndarray:
    return base_features_batch(pose.joint_positions, check_genotype(genotype))


def evaluate_batch(genotypes: np.ndarray, damage: Damage = None) -> EvaluationBatch:
    """Evaluate ``(n, 8)`` genotypes.

    Descriptors always come from the commanded (undamaged) pose; the
    end-effector and the safety flag reflect the damaged arm.
    """
    g = np.atleast_2d(np.asarray(genotypes, dtype=float))
    intact = positions_from_angles(joint_angles(g))
    if damage is None:
        actual = intact
    else:
        actual = positions_from_angles(joint_angles(g, damage))
    return EvaluationBatch(
        base_features=base_features_batch(intact, g),
        fitness=fitness_batch(g),
        end_effector=actual[:, -1, :].copy(),
        safe=safe_mask(actual),
    )


def end_effectors(genotypes: np.ndarray, damage: Damage = None):
    """Damaged end-effector positions and safety flags only (cheaper than a full evaluation)."""
    g = np.atleast_2d(np.asarray(genotypes, dtype=float))
    pos = positions_from_angles(joint_angles(g, damage))
    return pos[:, -1, :], safe_mask(pos)


def evaluate(genotype, damage: Damage = None) -> Evaluation:
    g = check_genotype(genotype)
    res = evaluate_batch(g[None], damage)
    return Evaluation(
        base_features=res.base_features[0],
        fitness=float(res.fitness[0]),
        end_effector=res.end_effector[0],
        safe=bool(res.safe[0]),
    )
