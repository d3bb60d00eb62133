"""Per-environment experts and demonstration recording.

Demo files are line-oriented text.  Line 1 is a JSON header; every further
line is one transition::

    <traj> <step> <state floats...> <action floats...>       # state-action demos
    <traj> <step> <state floats...> <next-state floats...>   # state-only demos

Floats are written with 17 significant digits so a write/read cycle is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .envlab import (
    GRAVITY,
    MASS,
    U_MAX,
    X_TARGET,
    DynamicsParam,
    EnvSpec,
    Environment,
    Trajectory,
    Transition,
    WindyGrid,
    make_env,
    rollout,
)
from .neural import CategoricalPolicy, GaussianPolicy
from .ppo import PpoAgent, PpoConfig, ValueNet, build_batch, compute_gae, ppo_update
from .tabular import TabularMDP

DEMO_FORMAT = "rimelab-demo"
DEMO_VERSION = 1


@dataclass
class DemoSet:
    family: str
    dynamics: DynamicsParam
    trajectories: list[Trajectory]
    state_only: bool = False
    sigma: float = 0.0
    seed: int = 0
    obs_dim: int = 0
    act_dim: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def states(self, trajs=None) -> np.ndarray:
        return np.concatenate([t.states() for t in (trajs or self.trajectories)])

    def actions(self, trajs=None) -> np.ndarray:
        if self.state_only:
            raise ValueError("state-only demonstrations carry no actions")
        return np.concatenate([t.actions() for t in (trajs or self.trajectories)])

    def next_states(self, trajs=None) -> np.ndarray:
        if not self.state_only:
            raise ValueError("state-action demonstrations carry no next states")
        return np.concatenate([t.next_states() for t in (trajs or self.trajectories)])


# ------------------------------------------------------------------ experts


@dataclass
class TabularExpert:
    pi: np.ndarray
    values: np.ndarray
    q: np.ndarray
    family: str = "WindyGrid"
    kind: str = "Tabular"

    def act(self, state, rng=None, deterministic: bool = True) -> np.ndarray:
        s = WindyGrid.state_index(state)
        if deterministic or rng is None:
            return np.array([float(np.argmax(self.pi[s]))])
        return np.array([float(rng.choice(self.pi.shape[1], p=self.pi[s]))])


@dataclass
class PdExpert:
    dynamics: DynamicsParam
    kp: float = 8.0
    kd: float = 4.0
    family: str = "PointMass1D"
    kind: str = "PdController"

    def act(self, state, rng=None, deterministic: bool = True) -> np.ndarray:
        x, v = np.asarray(state, dtype=float).reshape(-1)[:2]
        zg = self.dynamics.get("gravity")
        zm = self.dynamics.get("mass")
        force = GRAVITY * zg + self.kp * (X_TARGET - x) - self.kd * v
        return np.array([float(np.clip(MASS * zm / U_MAX * force, -1.0, 1.0))])


@dataclass
class NeuralExpert:
    policy: object
    family: str
    kind: str = "NeuralPpo"
    history: list = field(default_factory=list)

    def act(self, state, rng=None, deterministic: bool = True) -> np.ndarray:
        return self.policy.act(state, rng, deterministic=deterministic or rng is None)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000) -> TabularExpert:
    """Optimal values and the greedy policy; ties go to the lowest action index."""
    if mdp.R is None:
        raise ValueError("value iteration needs a reward table")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.R + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    else:
        raise RuntimeError("value iteration did not converge")
    Q = mdp.R + mdp.gamma * mdp.P @ V
    best = Q >= Q.max(axis=1, keepdims=True) - 1e-9 * (1.0 + np.abs(Q).max())
    actions = np.argmax(best, axis=1)
    pi = np.zeros_like(Q)
    pi[np.arange(mdp.n_states), actions] = 1.0
    return TabularExpert(pi, V, Q)


def bellman_residual(mdp: TabularMDP, V: np.ndarray) -> float:
    return float(np.max(np.abs((mdp.R + mdp.gamma * mdp.P @ V).max(axis=1) - V)))


def pd_expert(dynamics: DynamicsParam, kp: float = 8.0, kd: float = 4.0) -> PdExpert:
    dynamics.validate("PointMass1D")
    return PdExpert(dynamics, kp, kd)


def train_expert_ppo(spec: EnvSpec, steps: int, seed: int, cfg: PpoConfig | None = None, hidden=(64, 64)) -> NeuralExpert:
    """PPO on the true reward; returns the policy in mean-action mode."""
    cfg = cfg or PpoConfig(gamma=spec.gamma)
    ss = np.random.SeedSequence(seed)
    init_rng, env_seed, loop_seed = (np.random.default_rng(s) for s in ss.spawn(3))
    env = make_env(spec, int(env_seed.integers(2**31)))
    if spec.family == "WindyGrid":
        policy = CategoricalPolicy.create(env.obs_dim, env.n_actions, hidden, init_rng)
    else:
        policy = GaussianPolicy.create(env.obs_dim, env.act_dim, hidden, init_rng)
    agent = PpoAgent(policy, ValueNet.create(env.obs_dim, hidden, init_rng), cfg)
    expert = NeuralExpert(policy, spec.family)
    used = 0
    while used < steps:
        trajs = rollout(env, policy, cfg.batch_size, int(loop_seed.integers(2**31)), record_rewards=True)
        rewards = np.concatenate([t.rewards() for t in trajs])
        batch = build_batch(agent, trajs, rewards)
        adv, ret = compute_gae(batch, cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(agent, batch, adv, ret, loop_seed)
        used += len(batch)
        stats["mean_return"] = float(np.mean([t.monitor_return for t in trajs]))
        expert.history.append(stats)
    return expert


# -------------------------------------------------------------------- demos


def record_demos(expert, env: Environment, n_traj: int = 50, sigma: float = 0.02, seed: int = 0, state_only: bool = False) -> DemoSet:
    """Run ``n_traj`` noisy expert episodes and keep (s, a) or (s, s') pairs.

    Continuous actions get additive Gaussian noise of scale ``sigma`` before
    clipping; on discrete families ``sigma`` is the probability of a uniformly
    random action.  Rewards are dropped.
    """
    if getattr(expert, "family", env.spec.family) != env.spec.family:
        raise ValueError(f"expert for {expert.family} cannot act in {env.spec.family}")
    rng = np.random.default_rng(seed)
    trajs = []
    discrete = env.n_actions is not None
    for _ in range(n_traj):
        s = env.reset()
        steps = []
        done = False
        while not done:
            a = np.asarray(expert.act(s, None, True), dtype=float).reshape(-1)
            if discrete:
                if sigma > 0 and rng.random() < sigma:
                    a = np.array([float(rng.integers(env.n_actions))])
            elif sigma > 0:
                a = np.clip(a + sigma * rng.standard_normal(a.shape), -1.0, 1.0)
            tr = env.step(a)
            if state_only:
                steps.append(Transition(tr.state, None, float("nan"), tr.next_state, tr.done))
            else:
                steps.append(Transition(tr.state, tr.action, float("nan"), None, tr.done))
            s = tr.next_state
            done = tr.done
        trajs.append(Trajectory(env.env_id, env.spec.dynamics, steps))
    return DemoSet(env.spec.family, env.spec.dynamics, trajs, state_only, sigma, seed, env.obs_dim, env.act_dim)


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def write_demos(demo: DemoSet, path) -> None:
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "family": demo.family,
        "dynamics": demo.dynamics.as_dict(),
        "obs_dim": demo.obs_dim,
        "act_dim": demo.act_dim,
        "state_only": demo.state_only,
        "sigma": demo.sigma,
        "seed": demo.seed,
        "n_traj": len(demo.trajectories),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for k, traj in enumerate(demo.trajectories):
        for t, step in enumerate(traj.steps):
            tail = step.next_state if demo.state_only else step.action
            lines.append(f"{k} {t} {_fmt(step.state)} {_fmt(tail)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_demos(path) -> DemoSet:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty demo file")
    header = json.loads(text[0])
    if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
        raise ValueError(f"{path}: not a {DEMO_FORMAT} v{DEMO_VERSION} file")
    dyn = DynamicsParam.from_dict(header["dynamics"])
    obs_dim, act_dim, state_only = header["obs_dim"], header["act_dim"], header["state_only"]
    tail_dim = obs_dim if state_only else act_dim
    rows: dict[int, list] = {}
    for lineno, line in enumerate(text[1:], 2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 + obs_dim + tail_dim:
            raise ValueError(f"{path}:{lineno}: expected {2 + obs_dim + tail_dim} fields, got {len(parts)}")
        k, t = int(parts[0]), int(parts[1])
        vals = np.array([float(v) for v in parts[2:]])
        rows.setdefault(k, []).append((t, vals[:obs_dim], vals[obs_dim:]))
    env_id = f"{header['family']}[{dyn.label()}]"
    trajs = []
    for k in sorted(rows):
        steps = []
        items = sorted(rows[k], key=lambda r: r[0])
        for n, (_, s, tail) in enumerate(items):
            done = n == len(items) - 1
            if state_only:
                steps.append(Transition(s, None, float("nan"), tail, done))
            else:
                steps.append(Transition(s, tail, float("nan"), None, done))
        trajs.append(Trajectory(env_id, dyn, steps))
    if len(trajs) != header["n_traj"]:
        raise ValueError(f"{path}: header declares {header['n_traj']} trajectories, found {len(trajs)}")
    return DemoSet(header["family"], dyn, trajs, state_only, header["sigma"], header["seed"], obs_dim, act_dim)


# ------------------------------------------------------------- checkpoints


def save_expert(expert, path) -> None:
    if isinstance(expert, PdExpert):
        arrays = {"gains": np.array([expert.kp, expert.kd])}
        meta = {"kind": expert.kind, "dynamics": expert.dynamics.as_dict()}
    elif isinstance(expert, TabularExpert):
        arrays = {"pi": expert.pi, "values": expert.values, "q": expert.q}
        meta = {"kind": expert.kind}
    elif isinstance(expert, NeuralExpert):
        arrays, pmeta = neural.policy_to_arrays(expert.policy)
        meta = {"kind": expert.kind, "family": expert.family, "policy": pmeta}
    else:
        raise TypeError(f"cannot serialize {type(expert).__name__}")
    neural.save_container(path, arrays, meta)


def load_expert(path):
    arrays, meta = neural.load_container(path)
    kind = meta.get("kind")
    if kind == "PdController":
        kp, kd = arrays["gains"]
        return PdExpert(DynamicsParam.from_dict(meta["dynamics"]), float(kp), float(kd))
    if kind == "Tabular":
        return TabularExpert(arrays["pi"], arrays["values"], arrays["q"])
    if kind == "NeuralPpo":
        return NeuralExpert(neural.policy_from_arrays(arrays, meta["policy"]), meta["family"])
    raise ValueError(f"{path}: unknown expert kind {kind!r}")
