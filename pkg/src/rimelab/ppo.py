"""Clipped-surrogate PPO with GAE on numpy networks.

Rewards come from outside: true rewards when training experts, discriminator
surrogates during imitation.  Episodes that end on the time limit bootstrap
from the value of the final next-state.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .envlab import Trajectory
from .neural import Adam, Mlp, NumericalError, clip_grad_norm, forward, param_grad


@dataclass
class PpoConfig:
    batch_size: int = 2048
    policy_epochs: int = 4
    minibatch: int = 64
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    lr: float = 3e-4
    value_lr: float = 3e-4
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if self.policy_epochs < 1 or self.minibatch < 1 or self.batch_size < 1:
            raise ValueError("epochs, minibatch and batch size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray
    env_index: np.ndarray
    terminals: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.states)
        if self.terminals is None:
            self.terminals = np.zeros(n, dtype=bool)
        for name in ("actions", "logp_old", "rewards", "values", "next_values", "dones", "env_index", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"batch field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.states)


class ValueNet:
    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def create(cls, obs_dim: int, hidden=(64, 64), rng=None) -> "ValueNet":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(Mlp.init((obs_dim, *hidden, 1), rng))

    @property
    def params(self):
        return self.net.params

    def __call__(self, states) -> np.ndarray:
        return forward(self.net, states)[0][:, 0]


@dataclass
class PpoAgent:
    policy: object
    value: ValueNet
    cfg: PpoConfig = field(default_factory=PpoConfig)
    # optimizers may be passed in so several agents share one policy's moments
    pi_opt: Adam | None = None
    v_opt: Adam | None = None

    def __post_init__(self):
        if self.pi_opt is None:
            self.pi_opt = Adam(self.policy.params, self.cfg.lr)
        if self.v_opt is None:
            self.v_opt = Adam(self.value.params, self.cfg.value_lr)

    def snapshot(self):
        return copy.deepcopy((self.policy.params, self.value.params, vars(self.pi_opt), vars(self.v_opt)))

    def restore(self, snap) -> None:
        pp, vp, po, vo = snap
        for dst, src in zip(self.policy.params, pp):
            dst[...] = src
        for dst, src in zip(self.value.params, vp):
            dst[...] = src
        for opt, st in ((self.pi_opt, po), (self.v_opt, vo)):
            opt.t = st["t"]
            for a, b in zip(opt.m, st["m"]):
                a[...] = b
            for a, b in zip(opt.v, st["v"]):
                a[...] = b


def build_batch(agent: PpoAgent, trajs: list[Trajectory], rewards: np.ndarray, env_index: int = 0) -> SampleBatch:
    states = np.concatenate([t.states() for t in trajs])
    actions = np.concatenate([t.actions() for t in trajs])
    next_states = np.concatenate([t.next_states() for t in trajs])
    dones = np.concatenate([[s.done for s in t.steps] for t in trajs]).astype(bool)
    rewards = np.asarray(rewards, dtype=float)
    return SampleBatch(
        states=states,
        actions=actions,
        logp_old=agent.policy.log_prob(states, actions),
        rewards=rewards,
        values=agent.value(states),
        next_values=agent.value(next_states),
        dones=dones,
        env_index=np.full(len(states), env_index),
    )


def compute_gae(batch: SampleBatch, gamma: float, lam: float, normalize: bool = True):
    """GAE advantages and value targets, recursing backward within each episode."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    boot = np.where(batch.terminals, 0.0, batch.next_values)
    delta = batch.rewards + gamma * boot - batch.values
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if batch.dones[t]:
            running = 0.0
        running = delta[t] + gamma * lam * running
        adv[t] = running
    returns = adv + batch.values
    if normalize:
        std = adv.std()
        adv = (adv - adv.mean()) / (std + 1e-8)
    return adv, returns


def _entropy_and_grad(policy, states):
    if hasattr(policy, "log_std"):
        grads = [np.zeros_like(p) for p in policy.mean_net.params] + [np.ones_like(policy.log_std)]
        return policy.entropy(), grads
    z, tape = forward(policy.logits_net, states)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    H = -np.sum(p * logp, axis=1)
    dz = -p * (logp + H[:, None]) / len(states)
    return float(H.mean()), param_grad(tape, dz)


def ppo_update(agent: PpoAgent, batch: SampleBatch, advantages: np.ndarray, returns: np.ndarray, rng: np.random.Generator) -> dict:
    """Run ``policy_epochs`` passes of shuffled minibatch updates.

    Returns mean policy loss, value loss, clip fraction and approximate KL.
    A non-finite loss restores the pre-update parameters and raises.
    """
    cfg = agent.cfg
    snap = agent.snapshot()
    n = len(batch)
    stats = {"policy_loss": [], "value_loss": [], "clip_frac": [], "approx_kl": []}
    try:
        for _ in range(cfg.policy_epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                s, a = batch.states[idx], batch.actions[idx]
                adv = advantages[idx]
                m = len(idx)

                logp = agent.policy.log_prob(s, a)
                ratio = np.exp(logp - batch.logp_old[idx])
                clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
                surr = np.minimum(ratio * adv, clipped * adv)
                p_loss = -float(np.mean(surr))
                active = ratio * adv <= clipped * adv
                upstream = -(ratio * adv * active) / m
                _, g_pi = agent.policy.log_prob_and_grad(s, a, upstream)
                if cfg.entropy_coef:
                    H, g_h = _entropy_and_grad(agent.policy, s)
                    p_loss -= cfg.entropy_coef * H
                    for g, gh in zip(g_pi, g_h):
                        g -= cfg.entropy_coef * gh

                v, tape = forward(agent.value.net, s)
                err = v[:, 0] - returns[idx]
                v_loss = 0.5 * float(np.mean(err * err))
                g_v = param_grad(tape, (cfg.value_coef * err / m)[:, None])

                if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                    raise NumericalError("non-finite PPO loss")
                clip_grad_norm(g_pi, cfg.max_grad_norm)
                clip_grad_norm(g_v, cfg.max_grad_norm)
                agent.pi_opt.step(g_pi)
                agent.policy.clamp()
                agent.v_opt.step(g_v)

                stats["policy_loss"].append(p_loss)
                stats["value_loss"].append(v_loss)
                stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
                stats["approx_kl"].append(float(np.mean(batch.logp_old[idx] - logp)))
    except NumericalError:
        agent.restore(snap)
        raise
    return {k: float(np.mean(v)) for k, v in stats.items()}
