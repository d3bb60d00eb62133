"""Adversarial imitation from multiple perturbed environments, plus BC.

One iteration of :func:`train`:

1. roll the current policy out in every interaction environment,
2. update every discriminator on those samples (5 epochs each),
3. PPO-update the policy once per environment, in order, on the
   surrogate reward for that environment.

All randomness comes from the master seed.  Each consumer gets its own
``SeedSequence(seed, spawn_key=(purpose, iteration, ...))`` stream, so a run
is reproducible without storing generator state and a checkpoint taken
between iterations resumes exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import adversary, neural
from .adversary import DiscriminatorBank, RatioEstimator
from .envlab import EnvSpec, make_env, rollout
from .experts import DemoSet
from .neural import Adam, CategoricalPolicy, GaussianPolicy, NumericalError
from .ppo import PpoAgent, PpoConfig, ValueNet, build_batch, compute_gae, ppo_update

IL_ALGORITHMS = ("RIME", "OMME", "GAIL-single", "GAIL-mixture", "BC", "SNEMPE-max")

# spawn-key purposes
SEED_POLICY_INIT = 10
SEED_VALUE_INIT = 11
SEED_ENV = 12
SEED_ROLLOUT = 13
SEED_DISC = 14
SEED_PPO = 15
SEED_LFIW = 16
SEED_LFIW_INIT = 17
SEED_BC = 18


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def stream_int(seed: int, *key: int) -> int:
    return int(stream(seed, *key).integers(2**63 - 1))


class TrainingAborted(NumericalError):
    def __init__(self, msg: str, checkpoint: str | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class IlConfig:
    algorithm: str = "RIME"
    state_only: bool = False
    disc_mode: str = "Independent"
    use_lfiw: bool = False
    n_envs: int = 2
    total_steps: int = 300_000
    batch_per_env: int = 2048
    n_demo_traj: int = 50
    disc_epochs: int = 5
    disc_minibatch: int = 256
    disc_lr: float = 3e-4
    kappa: float = 10.0
    gp_on: str = "logit"
    disc_hidden: tuple = (100, 100)
    policy_hidden: tuple = (64, 64)
    init_log_std: float = 0.0
    lfiw_temperature: float = 2.0
    lfiw_steps: int = 200
    bc_split: float = 0.7
    bc_patience: int = 10
    bc_max_epochs: int = 1000
    bc_lr: float = 1e-3
    bc_minibatch: int = 64
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if isinstance(self.ppo, dict):
            self.ppo = PpoConfig(**self.ppo)
        self.disc_hidden = tuple(self.disc_hidden)
        self.policy_hidden = tuple(self.policy_hidden)
        if self.algorithm not in IL_ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {IL_ALGORITHMS}")
        if self.disc_mode not in adversary.MODES:
            raise ValueError(f"unknown disc_mode {self.disc_mode!r}")
        if self.disc_mode == "WeightShared" and self.algorithm not in ("RIME", "OMME", "SNEMPE-max"):
            raise ValueError("weight-shared discriminators need an algorithm with one trunk per environment over all experts")
        if self.n_envs < 1 or self.total_steps < 0 or self.batch_per_env < 1:
            raise ValueError("n_envs >= 1, total_steps >= 0 and batch_per_env >= 1 required")
        if not 0.0 < self.bc_split < 1.0:
            raise ValueError("bc_split must lie in (0, 1)")

    @property
    def n_interaction(self) -> int:
        return 1 if self.algorithm == "SNEMPE-max" else self.n_envs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_hidden"] = list(self.disc_hidden)
        d["policy_hidden"] = list(self.policy_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IlConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown IlConfig keys: {sorted(unknown)}")
        return cls(**d)


def make_features(states, actions=None, next_states=None, state_only: bool = False, n_actions: int | None = None) -> np.ndarray:
    """Discriminator inputs: concat(s, a), or concat(s, s') in state-only mode.

    Discrete actions become one-hot vectors of length ``n_actions``.
    """
    s = np.atleast_2d(np.asarray(states, dtype=float))
    if state_only:
        if next_states is None:
            raise ValueError("state-only features need next states")
        return np.concatenate([s, np.atleast_2d(np.asarray(next_states, dtype=float))], axis=1)
    if actions is None:
        raise ValueError("state-action features need actions")
    a = np.asarray(actions, dtype=float).reshape(len(s), -1)
    if n_actions is not None:
        a = np.eye(n_actions)[a[:, 0].astype(int)]
    return np.concatenate([s, a], axis=1)


def demo_features(demo: DemoSet, state_only: bool, n_actions=None) -> np.ndarray:
    if state_only:
        if not demo.state_only:
            raise ValueError("state-only training needs state-only demonstrations")
        return make_features(demo.states(), next_states=demo.next_states(), state_only=True)
    if demo.state_only:
        raise ValueError("state-action training cannot use state-only demonstrations")
    return make_features(demo.states(), demo.actions(), n_actions=n_actions)


def traj_features(trajs, state_only: bool, n_actions=None) -> np.ndarray:
    states = np.concatenate([t.states() for t in trajs])
    if state_only:
        return make_features(states, next_states=np.concatenate([t.next_states() for t in trajs]), state_only=True)
    # raw actions: a mean drifting past the actuator limit stays visible to D
    actions = np.concatenate([t.actions() for t in trajs])
    return make_features(states, actions, n_actions=n_actions)


# --------------------------------------------------------------- train state


@dataclass
class TrainState:
    cfg: IlConfig
    seed: int
    specs: list
    policy: object
    values: list = field(default_factory=list)
    bank: DiscriminatorBank | None = None
    pi_opt: Adam | None = None
    v_opts: list = field(default_factory=list)
    ratios: dict = field(default_factory=dict)
    iteration: int = 0
    steps: int = 0

    def save(self, path) -> None:
        arrays, pmeta = neural.policy_to_arrays(self.policy)
        arrays = {f"policy.{k}": v for k, v in arrays.items()}
        if self.pi_opt is not None:
            arrays.update(self.pi_opt.state_arrays("pi_opt"))
        for i, (vn, vo) in enumerate(zip(self.values, self.v_opts)):
            for m, p in enumerate(vn.params):
                arrays[f"value{i}.p{m}"] = p
            arrays.update(vo.state_arrays(f"value{i}.opt"))
        bmeta = None
        if self.bank is not None:
            barr, bmeta = self.bank.to_arrays()
            arrays.update({f"bank.{k}": v for k, v in barr.items()})
        rkeys = []
        for n, (key, est) in enumerate(sorted(self.ratios.items())):
            rkeys.append([list(key), list(est.net.sizes), est.temperature, est.normalizer])
            for m, p in enumerate(est.net.params):
                arrays[f"ratio{n}.p{m}"] = p
        meta = {
            "kind": "TrainState",
            "cfg": self.cfg.to_dict(),
            "seed": self.seed,
            "specs": [{"family": s.family, "dynamics": s.dynamics.as_dict(), "horizon": s.horizon, "gamma": s.gamma} for s in self.specs],
            "policy": pmeta,
            "value_sizes": [list(v.net.sizes) for v in self.values],
            "bank": bmeta,
            "ratios": rkeys,
            "iteration": self.iteration,
            "steps": self.steps,
        }
        neural.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        from .envlab import DynamicsParam

        arrays, meta = neural.load_container(path)
        if meta.get("kind") != "TrainState":
            raise ValueError(f"{path}: not a training checkpoint")
        cfg = IlConfig.from_dict(meta["cfg"])
        specs = [EnvSpec(s["family"], DynamicsParam.from_dict(s["dynamics"]), s["horizon"], s["gamma"]) for s in meta["specs"]]
        parr = {k[len("policy.") :]: v for k, v in arrays.items() if k.startswith("policy.")}
        policy = neural.policy_from_arrays(parr, meta["policy"])
        state = cls(cfg, meta["seed"], specs, policy, iteration=meta["iteration"], steps=meta["steps"])
        if "pi_opt.t" in arrays:
            state.pi_opt = Adam(policy.params, cfg.ppo.lr)
            state.pi_opt.load_state_arrays("pi_opt", arrays)
        for i, sizes in enumerate(meta["value_sizes"]):
            params = [np.array(arrays[f"value{i}.p{m}"]) for m in range(2 * (len(sizes) - 1))]
            vn = ValueNet(neural.Mlp(tuple(sizes), params))
            vo = Adam(vn.params, cfg.ppo.value_lr)
            vo.load_state_arrays(f"value{i}.opt", arrays)
            state.values.append(vn)
            state.v_opts.append(vo)
        if meta["bank"] is not None:
            barr = {k[len("bank.") :]: v for k, v in arrays.items() if k.startswith("bank.")}
            state.bank = DiscriminatorBank.from_arrays(barr, meta["bank"])
        for n, (key, sizes, temp, norm) in enumerate(meta["ratios"]):
            params = [np.array(arrays[f"ratio{n}.p{m}"]) for m in range(2 * (len(sizes) - 1))]
            state.ratios[tuple(key)] = RatioEstimator(neural.Mlp(tuple(sizes), params), temp, norm)
        return state


def _new_policy(spec: EnvSpec, hidden, seed: int, init_log_std: float = 0.0):
    env = make_env(spec, 0)
    rng = stream(seed, SEED_POLICY_INIT)
    if env.n_actions is not None:
        return CategoricalPolicy.create(env.obs_dim, env.n_actions, hidden, rng)
    return GaussianPolicy.create(env.obs_dim, env.act_dim, hidden, rng, init_log_std)


def _bank_layout(cfg: IlConfig):
    """(n_envs, n_experts, pairs) of the discriminator bank for an algorithm."""
    N = cfg.n_envs
    if cfg.algorithm == "GAIL-single":
        return N, N, [(i, i) for i in range(N)]
    if cfg.algorithm == "GAIL-mixture":
        return 1, 1, [(0, 0)]
    if cfg.algorithm == "SNEMPE-max":
        return 1, N, None
    return N, N, None


def _validate(cfg: IlConfig, specs, demos) -> None:
    if cfg.algorithm == "SNEMPE-max":
        if len(specs) != 1:
            raise ValueError(f"SNEMPE-max uses exactly 1 interaction environment, got {len(specs)}")
    elif cfg.algorithm != "BC" and len(specs) != cfg.n_envs:
        raise ValueError(f"expected {cfg.n_envs} interaction environments, got {len(specs)}")
    if len(demos) != cfg.n_envs:
        raise ValueError(f"expected {cfg.n_envs} demo sets, got {len(demos)}")
    families = {s.family for s in specs} | {d.family for d in demos}
    if len(families) != 1:
        raise ValueError(f"environments and demos mix families {sorted(families)}")
    dims = {(d.obs_dim, d.act_dim) for d in demos}
    if len(dims) != 1:
        raise ValueError(f"demo sets disagree on (obs_dim, act_dim): {sorted(dims)}")
    env = make_env(specs[0], 0) if specs else None
    if env is not None and dims != {(env.obs_dim, env.act_dim)}:
        raise ValueError(f"demo dims {sorted(dims)} do not match environment dims ({env.obs_dim}, {env.act_dim})")


def init_state(cfg: IlConfig, specs, demos, seed: int) -> TrainState:
    specs = [e.spec if hasattr(e, "spec") else e for e in specs]
    _validate(cfg, specs, demos)
    policy = _new_policy(specs[0] if specs else EnvSpec(demos[0].family), cfg.policy_hidden, seed, cfg.init_log_std)
    state = TrainState(cfg, seed, specs, policy)
    if cfg.algorithm == "BC":
        return state
    state.pi_opt = Adam(policy.params, cfg.ppo.lr)
    for i, spec in enumerate(specs):
        env = make_env(spec, 0)
        vn = ValueNet.create(env.obs_dim, cfg.policy_hidden, stream(seed, SEED_VALUE_INIT, i))
        state.values.append(vn)
        state.v_opts.append(Adam(vn.params, cfg.ppo.value_lr))
    env = make_env(specs[0], 0)
    in_dim = env.obs_dim + (env.obs_dim if cfg.state_only else (env.n_actions or env.act_dim))
    n_i, n_j, pairs = _bank_layout(cfg)
    state.bank = DiscriminatorBank.create(cfg.disc_mode, n_i, n_j, in_dim, seed, pairs, cfg.disc_hidden, cfg.kappa, cfg.disc_lr, cfg.gp_on)
    return state


# ----------------------------------------------------------------- training


def _digest(lines: list[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


@dataclass
class TrainResult:
    state: TrainState
    trace: list[dict]
    events: list[tuple]

    def trace_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.trace]

    def trace_hash(self) -> str:
        return _digest(self.trace_lines())


def _dump_abort(state: TrainState, out_dir, err) -> TrainingAborted:
    path = None
    if out_dir is not None:
        path = str(Path(out_dir) / "abort.ckpt")
        state.save(path)
    return TrainingAborted(f"numerical abort at iteration {state.iteration}: {err}", path)


def train(
    cfg: IlConfig,
    envs,
    demos: list[DemoSet],
    seed: int,
    state: TrainState | None = None,
    max_iterations: int | None = None,
    out_dir=None,
    trace_path=None,
    strict_ordering: bool = True,
) -> TrainResult:
    """Run imitation training; ``state`` resumes a checkpoint.

    ``max_iterations`` caps the iterations run by this call (for resumption
    tests).  With ``trace_path`` each iteration's record is appended as one
    JSON line.
    """
    specs = [e.spec if hasattr(e, "spec") else e for e in envs]
    if state is None:
        state = init_state(cfg, specs, demos, seed)
    else:
        _validate(state.cfg, state.specs, demos)
        cfg, seed, specs = state.cfg, state.seed, state.specs
    if cfg.algorithm == "BC":
        policy, history = bc_train(demos, cfg.bc_split, seed, cfg, policy=state.policy)
        state.policy = policy
        return TrainResult(state, history, [("bc", 0, -1)])

    env0 = make_env(specs[0], 0)
    n_actions = env0.n_actions if not cfg.state_only else None
    if cfg.algorithm == "GAIL-mixture":
        expert_x = [np.concatenate([demo_features(d, cfg.state_only, n_actions) for d in demos])]
        expert_s = [np.concatenate([d.states() for d in demos])]
    else:
        expert_x = [demo_features(d, cfg.state_only, n_actions) for d in demos]
        expert_s = [d.states() for d in demos]

    trace: list[dict] = []
    events: list[tuple] = []
    ppo_cfg = cfg.ppo
    done_iters = 0
    while state.steps < cfg.total_steps and (max_iterations is None or done_iters < max_iterations):
        it = state.iteration
        try:
            record = _iteration(cfg, state, specs, expert_x, expert_s, n_actions, ppo_cfg, seed, it, events, strict_ordering)
        except NumericalError as err:
            raise _dump_abort(state, out_dir, err) from err
        trace.append(record)
        if trace_path is not None:
            with open(trace_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        state.iteration += 1
        done_iters += 1
    return TrainResult(state, trace, events)


def _iteration(cfg, state, specs, expert_x, expert_s, n_actions, ppo_cfg, seed, it, events, strict_ordering) -> dict:
    bank = state.bank
    policy = state.policy

    # 1. rollouts in every interaction environment
    batches = []
    for i, spec in enumerate(specs):
        env = make_env(spec, stream_int(seed, SEED_ENV, it, i))
        trajs = rollout(env, policy, cfg.batch_per_env, stream_int(seed, SEED_ROLLOUT, it, i))
        batches.append((trajs, traj_features(trajs, cfg.state_only, n_actions)))
        events.append(("rollout", it, i))
    state.steps += sum(len(x) for _, x in batches)

    # 2. discriminators
    pol_x = [x for _, x in batches]
    pol_s = [np.concatenate([t.states() for t in trajs]) for trajs, _ in batches]
    if cfg.algorithm == "GAIL-mixture":
        pol_x = [np.concatenate(pol_x)]
        pol_s = [np.concatenate(pol_s)]
    weights = {}
    if cfg.use_lfiw:
        for i, j in bank.pairs:
            est = state.ratios.get((i, j))
            if est is None:
                est = RatioEstimator.create(expert_s[j].shape[1], stream(seed, SEED_LFIW_INIT, i, j), temperature=cfg.lfiw_temperature)
                state.ratios[(i, j)] = est
            adversary.lfiw_fit(est, pol_s[i], expert_s[j], cfg.lfiw_steps, stream(seed, SEED_LFIW, it, i, j))
            weights[(i, j)] = est.weights(expert_s[j])
    disc = {}
    if bank.mode == "WeightShared":
        for i in range(bank.n_envs):
            rng = stream(seed, SEED_DISC, it, i, 0)
            ew = [weights[(i, j)] for j in range(bank.n_experts)] if weights else None
            losses = adversary.update_trunk(bank, i, pol_x[i], expert_x, rng, cfg.disc_epochs, cfg.disc_minibatch, ew)
            disc[f"{i}"] = float(np.mean(losses))
            events.append(("disc", it, i, -1))
    else:
        for i, j in bank.pairs:
            rng = stream(seed, SEED_DISC, it, i, j)
            losses = adversary.update_pair(bank, i, j, pol_x[i], expert_x[j], rng, cfg.disc_epochs, cfg.disc_minibatch, weights.get((i, j)))
            disc[f"{i},{j}"] = float(np.mean(losses))
            events.append(("disc", it, i, j))

    # 3. policy, once per environment in order
    record = {"iteration": it, "steps": state.steps, "disc_loss": disc, "env": []}
    for i, (trajs, x) in enumerate(batches):
        bi = 0 if cfg.algorithm == "GAIL-mixture" else i
        entry = {}
        j_star = None
        if cfg.algorithm in ("RIME", "OMME", "SNEMPE-max"):
            row = 0 if cfg.algorithm == "SNEMPE-max" else i
            vals = adversary._log1m_d(bank.probs(row, x))
            gap = adversary.max_ordering_gap(vals)
            entry["max_order_gap"] = gap
            if gap < 0 and strict_ordering:
                raise AssertionError(f"max-ordering violated at iteration {it}, env {i}: gap {gap}")
            entry["rime_objective"] = float(vals.max(axis=1).mean())
            entry["omme_objective"] = float(vals.mean(axis=0).max())
            if cfg.algorithm == "OMME":
                j_star = adversary.omme_choice(bank, i, x)
                entry["omme_choice"] = j_star
        rewards = adversary.surrogate_reward(bank, cfg.algorithm, bi, x, j_star)
        agent = PpoAgent(policy, state.values[i], _ppo_for(ppo_cfg, specs[i]), state.pi_opt, state.v_opts[i])
        batch = build_batch(agent, trajs, rewards, i)
        adv, ret = compute_gae(batch, agent.cfg.gamma, agent.cfg.gae_lambda)
        stats = ppo_update(agent, batch, adv, ret, stream(seed, SEED_PPO, it, i))
        events.append(("policy", it, i))
        entry.update(stats)
        entry["surrogate_reward"] = float(rewards.mean())
        entry["true_return"] = float(np.mean([t.monitor_return for t in trajs]))
        record["env"].append(entry)
    return record


def _ppo_for(ppo_cfg: PpoConfig, spec: EnvSpec) -> PpoConfig:
    d = ppo_cfg.to_dict()
    d["gamma"] = spec.gamma
    return PpoConfig(**d)


# ---------------------------------------------------------------------- BC


def split_counts(n_traj: int, frac: float = 0.7) -> tuple[int, int]:
    """(train, validation) trajectory counts, each at least 1."""
    if n_traj < 2:
        raise ValueError("need at least 2 trajectories to split")
    n_train = min(max(int(round(frac * n_traj)), 1), n_traj - 1)
    return n_train, n_traj - n_train


def bc_train(demos: list[DemoSet], split: float = 0.7, seed: int = 0, cfg: IlConfig | None = None, policy=None):
    """Regress the policy on pooled demo pairs; early-stop on per-set validation.

    Training stops once every demo set's validation loss has gone
    ``patience`` epochs without improving, and the parameters with the best
    mean validation loss are restored.  Never touches an environment.
    """
    cfg = cfg or IlConfig(algorithm="BC", n_envs=len(demos))
    if not demos:
        raise ValueError("no demonstrations")
    for d in demos:
        if len(d) == 0:
            raise ValueError("empty demo set")
        if d.state_only:
            raise ValueError("behavior cloning needs demo actions")
    rng = stream(seed, SEED_BC)
    train_s, train_a, val = [], [], []
    for d in demos:
        n_train, _ = split_counts(len(d), split)
        order = rng.permutation(len(d))
        tr = [d.trajectories[k] for k in order[:n_train]]
        va = [d.trajectories[k] for k in order[n_train:]]
        train_s.append(d.states(tr))
        train_a.append(d.actions(tr))
        val.append((d.states(va), d.actions(va)))
    S = np.concatenate(train_s)
    A = np.concatenate(train_a)
    if policy is None:
        if demos[0].act_dim == 1 and demos[0].family == "WindyGrid":
            policy = CategoricalPolicy.create(demos[0].obs_dim, 4, cfg.policy_hidden, stream(seed, SEED_POLICY_INIT))
        else:
            policy = GaussianPolicy.create(demos[0].obs_dim, demos[0].act_dim, cfg.policy_hidden, stream(seed, SEED_POLICY_INIT))
    opt = Adam(policy.params, cfg.bc_lr)
    best = [np.inf] * len(val)
    stale = [0] * len(val)
    best_mean = np.inf
    best_params = [p.copy() for p in policy.params]
    history = []
    for epoch in range(cfg.bc_max_epochs):
        order = rng.permutation(len(S))
        for start in range(0, len(S), cfg.bc_minibatch):
            idx = order[start : start + cfg.bc_minibatch]
            _, grads = policy.regression_grad(S[idx], A[idx])
            opt.step(grads)
        losses = [policy.regression_loss(vs, va) for vs, va in val]
        for k, l in enumerate(losses):
            if l < best[k]:
                best[k] = l
                stale[k] = 0
            else:
                stale[k] += 1
        mean = float(np.mean(losses))
        if mean < best_mean:
            best_mean = mean
            best_params = [p.copy() for p in policy.params]
        history.append({"epoch": epoch, "val_loss": losses, "train_loss": policy.regression_loss(S, A)})
        if min(stale) >= cfg.bc_patience:
            break
    for p, b in zip(policy.params, best_params):
        p[...] = b
    return policy, history
