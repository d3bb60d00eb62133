"""Desk-scale environment families with a perturbable dynamics parameter.

Two families:

* ``WindyGrid``: 5x5 grid, four moves, then with probability ``0.2 * wind``
  a one-cell push in +x.  The goal (4, 4) is absorbing and pays 1 per step.
  States are one-hot vectors over the 25 cells; actions are index arrays.
* ``PointMass1D``: a vertically forced point mass under gravity.  State is
  (x, v), action a scalar thrust, clipped to [-1, 1] inside the dynamics;
  transitions record the unclipped action.

Every environment owns a private ``numpy`` generator; two instances built from
the same (spec, seed) and fed the same actions produce identical transitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from .tabular import TabularMDP

FAMILY_PARAMS = {
    "WindyGrid": ("wind",),
    "PointMass1D": ("gravity", "mass"),
}

# WindyGrid
GRID = 5
GOAL = (4, 4)
WIND_PROB = 0.2
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))  # up, right, down, left

# PointMass1D
DT = 0.05
U_MAX = 15.0
MASS = 1.0
GRAVITY = 9.8
X_BOUND = 2.0
V_BOUND = 3.0
X_TARGET = 1.0


@dataclass(frozen=True)
class DynamicsParam:
    """Scale factors relative to nominal; missing names read as 1.0."""

    entries: tuple[tuple[str, float], ...] = ()

    @classmethod
    def of(cls, **scales: float) -> "DynamicsParam":
        return cls(tuple(sorted((k, float(v)) for k, v in scales.items())))

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsParam":
        return cls.of(**d)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def get(self, name: str) -> float:
        return dict(self.entries).get(name, 1.0)

    def validate(self, family: str) -> None:
        allowed = FAMILY_PARAMS[family]
        for name, value in self.entries:
            if name not in allowed:
                raise ValueError(f"{family} has no dynamics parameter {name!r} (allowed: {allowed})")
            # wind scales a disturbance probability, so zero is meaningful
            if value < 0 or (value == 0 and name != "wind"):
                raise ValueError(f"scale factor {name}={value} must be positive")

    def label(self) -> str:
        return ",".join(f"{k}={v:g}" for k, v in self.entries) or "nominal"


@dataclass(frozen=True)
class EnvSpec:
    family: str
    dynamics: DynamicsParam = field(default_factory=DynamicsParam)
    horizon: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.family not in FAMILY_PARAMS:
            raise ValueError(f"unknown environment family {self.family!r}")
        if self.horizon is None:
            object.__setattr__(self, "horizon", 100 if self.family == "WindyGrid" else 200)
        if self.gamma is None:
            object.__setattr__(self, "gamma", 0.9 if self.family == "WindyGrid" else 0.99)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.dynamics.validate(self.family)

    def with_dynamics(self, dynamics: DynamicsParam) -> "EnvSpec":
        return EnvSpec(self.family, dynamics, self.horizon, self.gamma)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray | None
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Trajectory:
    env_id: str
    dynamics: DynamicsParam
    steps: list[Transition]
    # true return kept for monitoring only; learners never read it
    monitor_return: float = float("nan")

    def __len__(self) -> int:
        return len(self.steps)

    def states(self) -> np.ndarray:
        return np.array([t.state for t in self.steps])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.steps])

    def next_states(self) -> np.ndarray:
        return np.array([t.next_state for t in self.steps])

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.steps])


class PolicyLike(Protocol):
    def act(self, state: np.ndarray, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        ...


class Environment:
    obs_dim: int
    act_dim: int
    n_actions: int | None = None

    def __init__(self, spec: EnvSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.t = 0
        self.finished = True

    @property
    def env_id(self) -> str:
        return f"{self.spec.family}[{self.spec.dynamics.label()}]"

    def reset(self) -> np.ndarray:
        self.state = self._initial_state()
        self.t = 0
        self.finished = False
        return self.state.copy()

    def step(self, action) -> Transition:
        if self.finished:
            raise RuntimeError("step called on a finished episode; call reset()")
        action = np.asarray(action, dtype=float).reshape(-1)
        if action.shape != (self.act_dim,):
            raise ValueError(f"action dim {action.shape} != ({self.act_dim},)")
        s = self.state
        s_next, r, a_used = self._dynamics(s, action)
        self.t += 1
        done = self.t >= self.spec.horizon
        self.finished = done
        self.state = s_next
        return Transition(s.copy(), a_used, r, s_next.copy(), done)

    def _initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, s, a):
        raise NotImplementedError


class WindyGrid(Environment):
    obs_dim = GRID * GRID
    act_dim = 1
    n_actions = 4
    n_states = GRID * GRID

    @staticmethod
    def index(x: int, y: int) -> int:
        return x + GRID * y

    @staticmethod
    def coords(idx: int) -> tuple[int, int]:
        return idx % GRID, idx // GRID

    @staticmethod
    def onehot(idx: int) -> np.ndarray:
        v = np.zeros(GRID * GRID)
        v[idx] = 1.0
        return v

    @staticmethod
    def state_index(state: np.ndarray) -> int:
        return int(np.argmax(state))

    @property
    def wind_prob(self) -> float:
        return min(1.0, WIND_PROB * self.spec.dynamics.get("wind"))

    def _initial_state(self):
        return self.onehot(self.index(0, 0))

    def _dynamics(self, s, a):
        k = int(a[0])
        if not 0 <= k < 4:
            k = int(np.clip(k, 0, 3))
        x, y = self.coords(self.state_index(s))
        wind = self.rng.random() < self.wind_prob
        if (x, y) == GOAL:
            return s.copy(), 1.0, np.array([float(k)])
        dx, dy = MOVES[k]
        x = min(max(x + dx, 0), GRID - 1)
        y = min(max(y + dy, 0), GRID - 1)
        if wind:
            x = min(x + 1, GRID - 1)
        return self.onehot(self.index(x, y)), 0.0, np.array([float(k)])

    def tabular(self) -> TabularMDP:
        return windy_grid_mdp(self.spec)


def windy_grid_mdp(spec: EnvSpec) -> TabularMDP:
    """Exact transition tensor and reward table of a WindyGrid spec."""
    p = min(1.0, WIND_PROB * spec.dynamics.get("wind"))
    S, A = GRID * GRID, 4
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    goal = WindyGrid.index(*GOAL)
    for s in range(S):
        x0, y0 = WindyGrid.coords(s)
        for a, (dx, dy) in enumerate(MOVES):
            if s == goal:
                P[s, a, s] = 1.0
                R[s, a] = 1.0
                continue
            x = min(max(x0 + dx, 0), GRID - 1)
            y = min(max(y0 + dy, 0), GRID - 1)
            P[s, a, WindyGrid.index(x, y)] += 1.0 - p
            P[s, a, WindyGrid.index(min(x + 1, GRID - 1), y)] += p
    mu0 = np.zeros(S)
    mu0[WindyGrid.index(0, 0)] = 1.0
    return TabularMDP(P, mu0, spec.gamma, R)


class PointMass1D(Environment):
    obs_dim = 2
    act_dim = 1

    def _initial_state(self):
        return np.array([self.rng.uniform(-0.5, 0.5), 0.0])

    def _dynamics(self, s, a):
        x, v = s
        u = float(np.clip(a[0], -1.0, 1.0))
        zg = self.spec.dynamics.get("gravity")
        zm = self.spec.dynamics.get("mass")
        reward = -((x - X_TARGET) ** 2) - 0.01 * u * u
        v_next = float(np.clip(v + DT * (U_MAX * u / (MASS * zm) - GRAVITY * zg), -V_BOUND, V_BOUND))
        x_next = float(np.clip(x + DT * v_next, -X_BOUND, X_BOUND))
        # record the action as issued so policy log-probs stay exact
        return np.array([x_next, v_next]), reward, a.copy()


FAMILIES = {"WindyGrid": WindyGrid, "PointMass1D": PointMass1D}


def make_env(spec: EnvSpec, seed: int) -> Environment:
    if spec.family not in FAMILIES:
        raise ValueError(f"unknown environment family {spec.family!r}")
    spec.dynamics.validate(spec.family)
    return FAMILIES[spec.family](spec, seed)


def rollout(
    env: Environment,
    policy: PolicyLike,
    n_steps: int,
    seed,
    record_rewards: bool = False,
    deterministic: bool = False,
) -> list[Trajectory]:
    """Run whole episodes until at least ``n_steps`` transitions are collected.

    ``seed`` drives the policy's sampling noise; the environment keeps its own
    stream.  Rewards are replaced by NaN unless ``record_rewards``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    trajs: list[Trajectory] = []
    total = 0
    while total < n_steps:
        s = env.reset()
        steps = []
        ret = 0.0
        done = False
        while not done:
            a = np.asarray(policy.act(s, rng, deterministic), dtype=float).reshape(-1)
            if a.shape != (env.act_dim,):
                raise ValueError(f"policy produced action of shape {a.shape}, env expects ({env.act_dim},)")
            tr = env.step(a)
            ret += tr.reward
            if not record_rewards:
                tr.reward = float("nan")
            steps.append(tr)
            s = tr.next_state
            done = tr.done
        trajs.append(Trajectory(env.env_id, env.spec.dynamics, steps, ret))
        total += len(steps)
    return trajs


def discounted_occupancy(trajs: Iterable[Trajectory], gamma: float, n_states: int, n_actions: int) -> np.ndarray:
    """Normalized Monte-Carlo estimate of the discounted state-action occupancy."""
    counts = np.zeros((n_states, n_actions))
    for tr in trajs:
        w = 1.0
        for step in tr.steps:
            counts[WindyGrid.state_index(step.state), int(step.action[0])] += w
            w *= gamma
    return counts / counts.sum()


class TabularPolicyAdapter:
    """Wraps a tabular policy matrix so it can drive a WindyGrid."""

    def __init__(self, pi: np.ndarray):
        self.pi = np.asarray(pi, dtype=float)
        self.cdf = np.cumsum(self.pi, axis=1)

    def act(self, state, rng=None, deterministic: bool = False) -> np.ndarray:
        s = WindyGrid.state_index(state)
        if deterministic:
            return np.array([float(np.argmax(self.pi[s]))])
        k = int(np.searchsorted(self.cdf[s], rng.random(), side="right"))
        return np.array([float(min(k, self.pi.shape[1] - 1))])
