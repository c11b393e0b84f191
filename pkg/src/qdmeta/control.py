"""Dynamic control of the MAP-Elites mutation rate and generations per meta-generation.

Four strategies: static settings, linear annealing over the evaluation
budget, an endogenous gene appended to the meta-genotype, and a SARSA agent
acting on a tree-partitioned observation space.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Tuple

import numpy as np
from scipy.stats import ks_2samp

from .featuremaps import ConfigurationError

GENERATIONS = "generations"
MUTATION_RATE = "mutation_rate"

RANGES = {GENERATIONS: (1.0, 50.0), MUTATION_RATE: (0.001, 1.0)}
DEFAULTS = {GENERATIONS: 5.0, MUTATION_RATE: 0.125}
STATIC_SETTINGS = {GENERATIONS: (5, 10, 25, 50), MUTATION_RATE: (0.125, 0.25, 0.50, 1.0)}

N_ACTIONS = 5
REWARD_SCALE = 1e4


def _check_param(which: str) -> Tuple[float, float]:
    try:
        return RANGES[which]
    except KeyError:
        raise ConfigurationError(f"unknown controlled parameter {which!r}") from None


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def consume_generations(value: float) -> int:
    return max(1, round_half_up(value))


@dataclass(frozen=True)
class ControlledParam:
    which: str
    value: float

    def __post_init__(self):
        lo, hi = _check_param(self.which)
        if not lo <= self.value <= hi:
            raise ConfigurationError(f"{self.which}={self.value} outside [{lo}, {hi}]")


def static_value(which: str, setting: float) -> ControlledParam:
    return ControlledParam(which, float(setting))


def anneal(which: str, evaluations: float, budget: float) -> float:
    """Linear decrease from the range maximum at 0 evaluations to its minimum at ``budget``."""
    lo, hi = _check_param(which)
    if budget <= 0:
        raise ConfigurationError("budget must be positive")
    e = min(max(evaluations, 0.0), budget)
    return lo + (hi - lo) * (budget - e) / budget


def endogenous_decode(w, which: str, box: Tuple[float, float]) -> Tuple[float, np.ndarray]:
    """Split the trailing gene off ``w`` and map it affinely onto the parameter range."""
    lo, hi = _check_param(which)
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or len(w) < 2:
        raise ConfigurationError("meta-genotype lacks the endogenous control gene")
    b_lo, b_hi = box
    u = min(max((w[-1] - b_lo) / (b_hi - b_lo), 0.0), 1.0)
    return lo + (hi - lo) * u, w[:-1].copy()


def endogenous_encode(value: float, which: str, box: Tuple[float, float]) -> float:
    lo, hi = _check_param(which)
    u = (value - lo) / (hi - lo)
    return box[0] + u * (box[1] - box[0])


def bin_centre(which: str, action: int) -> float:
    lo, hi = _check_param(which)
    return lo + (hi - lo) * (action + 0.5) / N_ACTIONS


# --------------------------------------------------------------------------
# SARSA over a U-tree style partition of the observation space


OBS_FIELDS = ("max_mf", "mean_mf", "std_mf", "diversity", "stagnation", "last_reward")


@dataclass(frozen=True)
class Observation:
    max_mf: float = 0.0
    mean_mf: float = 0.0
    std_mf: float = 0.0
    diversity: float = 0.0
    stagnation: int = 0
    last_reward: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in OBS_FIELDS], dtype=float)


@dataclass
class TreeNode:
    leaf_id: int
    q: np.ndarray = field(default_factory=lambda: np.zeros(N_ACTIONS))
    buffer: Deque[Tuple[np.ndarray, float]] = field(default_factory=deque)
    dim: Optional[int] = None
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class RlControllerState:
    which: str
    alpha: float = 0.1
    gamma: float = 0.8
    epsilon: float = 0.1
    split_threshold: int = 20
    ks_threshold: float = 0.4
    min_child: int = 5
    max_buffer: int = 100
    root: TreeNode = field(default_factory=lambda: TreeNode(leaf_id=0))
    n_nodes: int = 1
    last_obs: Optional[np.ndarray] = None
    last_action: Optional[int] = None

    def __post_init__(self):
        _check_param(self.which)

    def leaf(self, obs_vec: np.ndarray) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if obs_vec[node.dim] <= node.threshold else node.right
        return node

    def leaves(self) -> List[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend([node.right, node.left])
        return out


def _greedy(q: np.ndarray) -> int:
    return int(np.argmax(q))  # first maximum on ties


def rl_step(
    state: RlControllerState,
    obs: Observation,
    reward: Optional[float],
    rng: np.random.Generator,
) -> Tuple[int, float]:
    """One SARSA transition: pick the next action for ``obs`` and learn from ``reward``.

    ``reward`` belongs to the previous action; it is ignored on the first call.
    """
    x = obs.vector()
    node = state.leaf(x)
    if rng.random() < state.epsilon:
        action = int(rng.integers(N_ACTIONS))
    else:
        action = _greedy(node.q)

    if state.last_action is not None and reward is not None:
        prev = state.leaf(state.last_obs)
        target = reward + state.gamma * node.q[action]
        prev.q[state.last_action] += state.alpha * (target - prev.q[state.last_action])
        prev.buffer.append((state.last_obs, float(target)))
        while len(prev.buffer) > state.max_buffer:
            prev.buffer.popleft()
        if len(prev.buffer) >= state.split_threshold:
            rl_tree_refine(state, prev)
            node = state.leaf(x)

    state.last_obs = x
    state.last_action = action
    return action, bin_centre(state.which, action)


def rl_tree_refine(state: RlControllerState, leaf: Optional[TreeNode] = None) -> bool:
    """Try to split ``leaf`` at the median of one observation dimension.

    The split maximising the two-sample Kolmogorov-Smirnov statistic between
    the buffered one-step returns of both sides is kept if that statistic
    reaches ``ks_threshold``.  Children inherit the parent's Q-values.
    """
    if leaf is None:
        leaf = max(state.leaves(), key=lambda n: len(n.buffer))
    if not leaf.is_leaf or len(leaf.buffer) < state.split_threshold:
        return False
    X = np.stack([o for o, _ in leaf.buffer])
    R = np.array([r for _, r in leaf.buffer])
    best = None
    for d in range(X.shape[1]):
        thr = float(np.median(X[:, d]))
        mask = X[:, d] <= thr
        n_left = int(mask.sum())
        if min(n_left, len(mask) - n_left) < state.min_child:
            continue
        stat = float(ks_2samp(R[mask], R[~mask]).statistic)
        if best is None or stat > best[0]:
            best = (stat, d, thr)
    if best is None or best[0] < state.ks_threshold:
        return False
    _, d, thr = best
    left = TreeNode(leaf_id=state.n_nodes, q=leaf.q.copy())
    right = TreeNode(leaf_id=state.n_nodes + 1, q=leaf.q.copy())
    state.n_nodes += 2
    for o, r in leaf.buffer:
        (left if o[d] <= thr else right).buffer.append((o, r))
    leaf.dim, leaf.threshold = d, thr
    leaf.left, leaf.right = left, right
    leaf.buffer = deque()
    return True


# --------------------------------------------------------------------------
# strategy objects used by the meta-loop


class Controller:
    """Common interface: per-meta-generation parameter values for every meta-individual."""

    which: Optional[str] = None
    extra_genes = 0

    def start(self, rng: np.random.Generator) -> None:
        pass

    def values(self, metagenotypes: np.ndarray, evaluations: int, box) -> Tuple[List[float], np.ndarray]:
        """Controlled value per row and the meta-genotypes with any control gene stripped."""
        v = self.current(evaluations)
        return [v] * len(metagenotypes), metagenotypes

    def current(self, evaluations: int) -> float:
        raise NotImplementedError

    def update(self, obs: Observation, reward: float, rng: np.random.Generator) -> dict:
        return {}


class StaticControl(Controller):
    def __init__(self, which: str = MUTATION_RATE, value: Optional[float] = None):
        self.which = which
        self.value = static_value(which, DEFAULTS[which] if value is None else value).value

    def current(self, evaluations):
        return self.value


class AnnealControl(Controller):
    def __init__(self, which: str, budget: int):
        _check_param(which)
        self.which = which
        self.budget = budget

    def current(self, evaluations):
        return anneal(self.which, evaluations, self.budget)


class EndogenousControl(Controller):
    extra_genes = 1

    def __init__(self, which: str):
        _check_param(which)
        self.which = which

    def values(self, metagenotypes, evaluations, box):
        vals, stripped = [], []
        for w in metagenotypes:
            v, rest = endogenous_decode(w, self.which, box)
            vals.append(v)
            stripped.append(rest)
        return vals, np.stack(stripped)

    def current(self, evaluations):
        raise ConfigurationError("endogenous values are per meta-individual")


class RlControl(Controller):
    def __init__(self, which: str, **kwargs):
        self.state = RlControllerState(which=which, **kwargs)
        self.which = which
        self.value = DEFAULTS[which]
        self.action: Optional[int] = None

    def start(self, rng):
        self.action, self.value = rl_step(self.state, Observation(), None, rng)

    def current(self, evaluations):
        return self.value

    def update(self, obs, reward, rng):
        self.action, self.value = rl_step(self.state, obs, reward, rng)
        return {
            "action": self.action,
            "value": self.value,
            "leaf_id": self.state.leaf(obs.vector()).leaf_id,
        }


def make_controller(strategy: str, budget: int) -> Controller:
    """Parse ``static``, ``static-mr:0.25``, ``static-gen:10``, ``anneal-mr``, ``endo-gen``, ``rl-mr`` ..."""
    strategy = strategy.strip().lower()
    name, _, arg = strategy.partition(":")
    if name == "static" and not arg:
        return StaticControl(MUTATION_RATE)
    kind, _, param = name.partition("-")
    which = {"mr": MUTATION_RATE, "gen": GENERATIONS}.get(param)
    if which is None:
        raise ConfigurationError(f"unknown control strategy {strategy!r}")
    if kind == "static":
        if not arg:
            raise ConfigurationError(f"{strategy!r}: static control needs a value, e.g. static-mr:0.25")
        try:
            value = float(arg)
        except ValueError:
            raise ConfigurationError(f"{strategy!r}: bad value {arg!r}") from None
        return StaticControl(which, value)
    if arg:
        raise ConfigurationError(f"{strategy!r}: only static control takes a value")
    if kind == "anneal":
        return AnnealControl(which, budget)
    if kind == "endo":
        return EndogenousControl(which)
    if kind == "rl":
        return RlControl(which)
    raise ConfigurationError(f"unknown control strategy {strategy!r}")
