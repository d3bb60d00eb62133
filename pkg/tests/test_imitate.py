import numpy as np
import pytest

from rimelab.envlab import DynamicsParam, EnvSpec, Trajectory, Transition, make_env
from rimelab.experts import DemoSet, pd_expert, record_demos, value_iteration
from rimelab.envlab import windy_grid_mdp
from rimelab.imitate import (
    IlConfig,
    TrainingAborted,
    TrainState,
    bc_train,
    init_state,
    make_features,
    split_counts,
    train,
)
from rimelab.ppo import PpoConfig

SMALL = dict(batch_per_env=200, disc_hidden=(8,), policy_hidden=(8,), disc_epochs=1, disc_minibatch=64, ppo=PpoConfig(batch_size=200, minibatch=100, policy_epochs=1))
PPO_KEYS = ("policy_loss", "value_loss", "approx_kl", "clip_frac", "surrogate_reward", "true_return")


def pm_specs(gs=(0.5, 1.5)):
    return [EnvSpec("PointMass1D", DynamicsParam.of(gravity=g), horizon=50) for g in gs]


def pm_demos(specs, n_traj=3, state_only=False):
    return [record_demos(pd_expert(s.dynamics), make_env(s, 100 + k), n_traj, 0.02, seed=200 + k, state_only=state_only) for k, s in enumerate(specs)]


def small_cfg(**kw):
    d = dict(SMALL)
    d.update(kw)
    d.setdefault("total_steps", 10**9)
    return IlConfig(**d)


def test_config_validation_and_round_trip():
    cfg = small_cfg(algorithm="OMME", n_envs=3)
    assert IlConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        IlConfig(algorithm="DAgger")
    with pytest.raises(ValueError):
        IlConfig(algorithm="GAIL-single", disc_mode="WeightShared")
    with pytest.raises(ValueError):
        IlConfig.from_dict({"algorithm": "RIME", "beta": 1})
    assert IlConfig(algorithm="SNEMPE-max", n_envs=3).n_interaction == 1


def test_make_features_shapes():
    s = np.zeros((4, 25))
    assert make_features(s, np.array([[0.0], [1.0], [2.0], [3.0]]), n_actions=4).shape == (4, 29)
    assert make_features(np.zeros((3, 2)), np.zeros((3, 1))).shape == (3, 3)
    assert make_features(np.zeros((3, 2)), next_states=np.ones((3, 2)), state_only=True).shape == (3, 4)
    with pytest.raises(ValueError):
        make_features(s, state_only=True)
    with pytest.raises(ValueError):
        make_features(s)


def test_single_environment_degeneracy():
    specs = pm_specs((1.0,))
    demos = pm_demos(specs)
    records = {a: train(small_cfg(algorithm=a, n_envs=1), specs, demos, seed=5, max_iterations=1).trace[0] for a in ("RIME", "OMME", "GAIL-single")}
    ref = records["RIME"]
    for rec in records.values():
        assert abs(rec["disc_loss"]["0,0"] - ref["disc_loss"]["0,0"]) <= 1e-10
        for k in PPO_KEYS:
            assert abs(rec["env"][0][k] - ref["env"][0][k]) <= 1e-10


def test_loop_order_per_iteration():
    specs = pm_specs()
    res = train(small_cfg(), specs, pm_demos(specs), seed=0, max_iterations=2)
    for it in range(2):
        ev = [e for e in res.events if e[1] == it]
        kinds = [e[0] for e in ev]
        assert kinds == ["rollout"] * 2 + ["disc"] * 4 + ["policy"] * 2
        assert [e[2:] for e in ev if e[0] == "disc"] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [e[1] for e in res.events] == sorted(e[1] for e in res.events)


def test_same_seed_same_trace_hash():
    specs = pm_specs()
    demos = pm_demos(specs)
    a = train(small_cfg(), specs, demos, seed=3, max_iterations=2)
    b = train(small_cfg(), specs, demos, seed=3, max_iterations=2)
    c = train(small_cfg(), specs, demos, seed=4, max_iterations=2)
    assert a.trace_hash() == b.trace_hash() != c.trace_hash()


def test_checkpoint_resume_is_bit_identical(tmp_path):
    specs = pm_specs()
    demos = pm_demos(specs)
    cfg = small_cfg(use_lfiw=True, lfiw_steps=5)
    full = train(cfg, specs, demos, seed=1, max_iterations=3)
    part = train(cfg, specs, demos, seed=1, max_iterations=1)
    part.state.save(tmp_path / "s.ckpt")
    loaded = TrainState.load(tmp_path / "s.ckpt")
    rest = train(cfg, specs, demos, seed=1, state=loaded, max_iterations=2)
    assert part.trace_lines() + rest.trace_lines() == full.trace_lines()
    for p, q in zip(full.state.policy.params, rest.state.policy.params):
        assert np.array_equal(p, q)


def test_total_steps_counted_over_all_environments():
    specs = pm_specs()
    res = train(small_cfg(total_steps=400), specs, pm_demos(specs), seed=0)
    assert len(res.trace) == 1 and res.state.steps == 400


def test_snempe_layout():
    specs = pm_specs()
    demos = pm_demos(specs)
    cfg = small_cfg(algorithm="SNEMPE-max")
    state = init_state(cfg, [EnvSpec("PointMass1D", horizon=50)], demos, seed=0)
    assert len(state.specs) == 1 and state.bank.pairs == [(0, 0), (0, 1)]
    with pytest.raises(ValueError):
        init_state(cfg, specs, demos, seed=0)
    rec = train(cfg, [EnvSpec("PointMass1D", horizon=50)], demos, seed=0, max_iterations=1).trace[0]
    assert len(rec["env"]) == 1 and set(rec["disc_loss"]) == {"0,0", "0,1"}


def test_gail_layouts():
    specs = pm_specs()
    demos = pm_demos(specs)
    assert init_state(small_cfg(algorithm="GAIL-single"), specs, demos, 0).bank.pairs == [(0, 0), (1, 1)]
    mix = train(small_cfg(algorithm="GAIL-mixture"), specs, demos, seed=0, max_iterations=1)
    assert mix.state.bank.pairs == [(0, 0)] and len(mix.trace[0]["env"]) == 2


def test_weight_shared_and_omme_train():
    specs = pm_specs()
    demos = pm_demos(specs)
    rec = train(small_cfg(disc_mode="WeightShared"), specs, demos, seed=0, max_iterations=1).trace[0]
    assert set(rec["disc_loss"]) == {"0", "1"}
    rec = train(small_cfg(algorithm="OMME"), specs, demos, seed=0, max_iterations=1).trace[0]
    assert all(e["omme_choice"] in (0, 1) for e in rec["env"])
    assert all(e["rime_objective"] >= e["omme_objective"] for e in rec["env"])


def test_state_only_training_without_actions():
    specs = pm_specs()
    demos = pm_demos(specs, state_only=True)
    res = train(small_cfg(state_only=True), specs, demos, seed=0, max_iterations=1)
    assert res.state.bank.in_dim == 4
    with pytest.raises(ValueError):
        train(small_cfg(), specs, demos, seed=0, max_iterations=1)


def test_windy_grid_training_uses_one_hot_actions():
    specs = [EnvSpec("WindyGrid", DynamicsParam.of(wind=w)) for w in (0.5, 1.5)]
    demos = [record_demos(value_iteration(windy_grid_mdp(s)), make_env(s, k), 3, 0.1, seed=k) for k, s in enumerate(specs)]
    res = train(small_cfg(), specs, demos, seed=0, max_iterations=1)
    assert res.state.bank.in_dim == 29


def test_mismatched_inputs_rejected():
    specs = pm_specs()
    demos = pm_demos(specs)
    with pytest.raises(ValueError):
        init_state(small_cfg(n_envs=3), specs, demos, 0)
    grid = [record_demos(value_iteration(windy_grid_mdp(EnvSpec("WindyGrid"))), make_env(EnvSpec("WindyGrid"), 0), 2, 0.0)]
    with pytest.raises(ValueError):
        init_state(small_cfg(n_envs=2), specs, [demos[0], grid[0]], 0)


def test_numerical_abort_dumps_checkpoint(tmp_path):
    specs = pm_specs()
    demos = pm_demos(specs)
    demos[1].trajectories[0].steps[0].state[0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train(small_cfg(), specs, demos, seed=0, out_dir=tmp_path)
    assert info.value.checkpoint is not None
    assert TrainState.load(info.value.checkpoint).iteration == 0


def _linear_demo(n_traj, fn, seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n_traj):
        steps = []
        for t in range(20):
            s = rng.uniform(-1, 1, size=2)
            steps.append(Transition(s, np.array([fn(s)]), float("nan"), None, t == 19))
        trajs.append(Trajectory("PointMass1D[]", DynamicsParam(), steps))
    return DemoSet("PointMass1D", DynamicsParam(), trajs, obs_dim=2, act_dim=1)


def test_bc_recovers_linear_expert():
    fn = lambda s: 0.3 * s[0] - 0.2 * s[1] + 0.1  # noqa: E731
    demo = _linear_demo(20, fn)
    policy, hist = bc_train([demo], cfg=IlConfig(algorithm="BC", n_envs=1, policy_hidden=(), bc_lr=1e-2))
    S = demo.states()
    assert np.abs(policy.mean(S)[:, 0] - np.array([fn(s) for s in S])).max() <= 1e-2
    assert min(min(h["val_loss"]) for h in hist) < 1e-4


def test_bc_constant_action():
    demo = _linear_demo(10, lambda s: 0.42)
    policy, _ = bc_train([demo], cfg=IlConfig(algorithm="BC", n_envs=1, policy_hidden=(8,), bc_lr=1e-2))
    assert np.abs(policy.mean(demo.states())[:, 0] - 0.42).max() <= 1e-2


def test_bc_split_and_errors():
    assert split_counts(50) == (35, 15)
    assert split_counts(5) == (4, 1)
    with pytest.raises(ValueError):
        split_counts(1)
    state_only = pm_demos(pm_specs((1.0,)), state_only=True)
    with pytest.raises(ValueError):
        bc_train(state_only)


def test_bc_through_train_touches_no_environment():
    specs = pm_specs()
    demos = pm_demos(specs, n_traj=4)
    res = train(IlConfig(algorithm="BC", n_envs=2, policy_hidden=(8,), bc_max_epochs=5), specs, demos, seed=0)
    assert res.events == [("bc", 0, -1)] and len(res.trace) <= 5
