import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rimelab.neural import CategoricalPolicy, GaussianPolicy
from rimelab.ppo import PpoAgent, PpoConfig, SampleBatch, ValueNet, compute_gae, ppo_update


def make_batch(rewards, values, next_values, dones, terminals):
    n = len(rewards)
    z = np.zeros(n)
    return SampleBatch(np.zeros((n, 1)), np.zeros((n, 1)), z, np.asarray(rewards, float), np.asarray(values, float), np.asarray(next_values, float), np.asarray(dones, bool), z, np.asarray(terminals, bool))


def gae_oracle(b, gamma, lam):
    """Explicit sum over future TD errors within each episode."""
    n = len(b)
    boot = np.where(b.terminals, 0.0, b.next_values)
    delta = b.rewards + gamma * boot - b.values
    adv = np.zeros(n)
    for t in range(n):
        acc, w = 0.0, 1.0
        for k in range(t, n):
            acc += w * delta[k]
            w *= gamma * lam
            if b.dones[k]:
                break
        adv[t] = acc
    return adv


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gae_lambda_zero_is_td_error(seed):
    rng = np.random.default_rng(seed)
    n = 12
    dones = rng.random(n) < 0.2
    dones[-1] = True
    b = make_batch(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), dones, dones & (rng.random(n) < 0.5))
    adv, _ = compute_gae(b, 0.97, 0.0, normalize=False)
    td = b.rewards + 0.97 * np.where(b.terminals, 0.0, b.next_values) - b.values
    assert np.max(np.abs(adv - td)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gae_lambda_one_zero_value_is_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    n = 15
    dones = rng.random(n) < 0.25
    dones[-1] = True
    r = rng.normal(size=n)
    b = make_batch(r, np.zeros(n), np.zeros(n), dones, dones)
    adv, ret = compute_gae(b, 0.9, 1.0, normalize=False)
    mc = np.zeros(n)
    for t in range(n):
        g, w = 0.0, 1.0
        for k in range(t, n):
            g += w * r[k]
            w *= 0.9
            if dones[k]:
                break
        mc[t] = g
    assert np.max(np.abs(adv - mc)) <= 1e-12
    assert np.max(np.abs(ret - mc)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_gae_matches_explicit_sum(seed, lam):
    rng = np.random.default_rng(seed)
    n = 10
    dones = rng.random(n) < 0.3
    dones[-1] = True
    b = make_batch(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), dones, dones & (rng.random(n) < 0.5))
    adv, _ = compute_gae(b, 0.95, lam, normalize=False)
    assert np.allclose(adv, gae_oracle(b, 0.95, lam), atol=1e-12)


def test_time_limit_bootstraps():
    b = make_batch([1.0], [0.0], [10.0], [True], [False])
    adv, _ = compute_gae(b, 0.5, 0.95, normalize=False)
    assert adv[0] == pytest.approx(6.0)
    b = make_batch([1.0], [0.0], [10.0], [True], [True])
    adv, _ = compute_gae(b, 0.5, 0.95, normalize=False)
    assert adv[0] == pytest.approx(1.0)


def test_normalized_advantages():
    rng = np.random.default_rng(0)
    b = make_batch(rng.normal(size=20), np.zeros(20), np.zeros(20), np.ones(20, bool), np.ones(20, bool))
    adv, _ = compute_gae(b, 0.9, 0.9)
    assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0, abs=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0)
    with pytest.raises(ValueError):
        PpoConfig(minibatch=0)


def _bandit(policy, reward_fn, updates, n=64, seed=0, **cfg):
    rng = np.random.default_rng(seed)
    agent = PpoAgent(policy, ValueNet.create(1, (16,), rng), PpoConfig(batch_size=n, **cfg))
    s = np.ones((n, 1))
    for _ in range(updates):
        a = policy.sample(s, rng)
        r = reward_fn(a)
        ones = np.ones(n, bool)
        b = SampleBatch(s, a, policy.log_prob(s, a), r, agent.value(s), np.zeros(n), ones, np.zeros(n), ones)
        adv, ret = compute_gae(b, 0.99, 0.95)
        ppo_update(agent, b, adv, ret, rng)
    return agent


def test_discrete_bandit_learns_best_arm():
    pol = CategoricalPolicy.create(1, 3, (16,), np.random.default_rng(0))
    _bandit(pol, lambda a: (a[:, 0] == 0).astype(float), 200, lr=3e-3)
    assert pol.probs(np.ones((1, 1)))[0, 0] > 0.9


def test_continuous_bandit_moves_mean():
    pol = GaussianPolicy.create(1, 1, (16,), np.random.default_rng(1))
    _bandit(pol, lambda a: -((a[:, 0] - 0.5) ** 2), 100, n=256)
    assert pol.mean(np.ones((1, 1)))[0, 0] == pytest.approx(0.5, abs=0.1)


def test_clip_fraction_zero_on_first_minibatch():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy.create(1, 1, (4,), rng)
    agent = PpoAgent(pol, ValueNet.create(1, (4,), rng), PpoConfig(batch_size=8, minibatch=8, policy_epochs=1))
    s = rng.normal(size=(8, 1))
    a = pol.sample(s, rng)
    ones = np.ones(8, bool)
    b = SampleBatch(s, a, pol.log_prob(s, a), rng.normal(size=8), agent.value(s), np.zeros(8), ones, np.zeros(8), ones)
    adv, ret = compute_gae(b, 0.99, 0.95)
    stats = ppo_update(agent, b, adv, ret, rng)
    assert stats["clip_frac"] == 0.0 and abs(stats["approx_kl"]) < 1e-12


def test_nonfinite_update_restores_parameters():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy.create(1, 1, (4,), rng)
    agent = PpoAgent(pol, ValueNet.create(1, (4,), rng), PpoConfig(batch_size=8, minibatch=4))
    before = [p.copy() for p in pol.params]
    s = rng.normal(size=(8, 1))
    a = pol.sample(s, rng)
    ones = np.ones(8, bool)
    b = SampleBatch(s, a, pol.log_prob(s, a), np.zeros(8), agent.value(s), np.zeros(8), ones, np.zeros(8), ones)
    ret = np.zeros(8)
    ret[5] = np.inf
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        ppo_update(agent, b, rng.normal(size=8), ret, rng)
    assert all(np.array_equal(x, y) for x, y in zip(before, pol.params))


def test_three_step_constant_reward_returns():
    b = make_batch([1.0, 1.0, 1.0], np.zeros(3), np.zeros(3), [False, False, True], [False, False, True])
    adv, ret = compute_gae(b, 0.9, 1.0, normalize=False)
    assert ret == pytest.approx([2.71, 1.9, 1.0], abs=1e-12)
    assert adv == pytest.approx([2.71, 1.9, 1.0], abs=1e-12)


def _one_batch(pol, agent, n, rng):
    s = rng.normal(size=(n, 1))
    a = pol.sample(s, rng)
    ones = np.ones(n, bool)
    return SampleBatch(s, a, pol.log_prob(s, a), np.zeros(n), agent.value(s), np.zeros(n), ones, np.zeros(n), ones)


def test_zero_advantages_leave_policy_unchanged():
    rng = np.random.default_rng(2)
    pol = GaussianPolicy.create(1, 1, (4,), rng)
    agent = PpoAgent(pol, ValueNet.create(1, (4,), rng), PpoConfig(batch_size=16, minibatch=8))
    b = _one_batch(pol, agent, 16, rng)
    before_pi = [p.copy() for p in pol.params]
    before_v = [p.copy() for p in agent.value.params]
    ppo_update(agent, b, np.zeros(16), rng.normal(size=16), rng)
    assert all(np.array_equal(x, y) for x, y in zip(before_pi, pol.params))
    assert not all(np.array_equal(x, y) for x, y in zip(before_v, agent.value.params))


@pytest.mark.parametrize("make", [lambda r: GaussianPolicy.create(1, 1, (4,), r), lambda r: CategoricalPolicy.create(1, 3, (4,), r)])
def test_positive_advantage_raises_logprob(make):
    rng = np.random.default_rng(3)
    pol = make(rng)
    agent = PpoAgent(pol, ValueNet.create(1, (4,), rng), PpoConfig(batch_size=1, minibatch=1, policy_epochs=1))
    b = _one_batch(pol, agent, 1, rng)
    before = pol.log_prob(b.states, b.actions)[0]
    ppo_update(agent, b, np.ones(1), np.zeros(1), rng)
    assert pol.log_prob(b.states, b.actions)[0] > before
