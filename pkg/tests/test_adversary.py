import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rimelab import neural as nn
from rimelab import tabular as tb
from rimelab.adversary import (
    DiscriminatorBank,
    RatioEstimator,
    disc_loss,
    disc_loss_weighted,
    interpolates,
    lfiw_fit,
    max_ordering_gap,
    mlp_param_count,
    omme_choice,
    surrogate_reward,
    update_pair,
    update_trunk,
    wsd_from_independent,
    wsd_loss,
)
from rimelab.envlab import DynamicsParam, EnvSpec, windy_grid_mdp
from rimelab.experts import value_iteration


def constant_bank(logits, n_envs=1, in_dim=2):
    """Independent bank with D_ij fixed at sigmoid(logits[i][j]) everywhere."""
    logits = np.atleast_2d(logits)
    bank = DiscriminatorBank.create("Independent", n_envs, logits.shape[1], in_dim, hidden=(3,))
    for (i, j), net in bank.nets.items():
        net.params[-2][:] = 0.0
        net.params[-1][:] = logits[i, j]
    return bank


def logit(p):
    return math.log(p / (1 - p))


def test_identical_batches_give_two_log_two_and_zero_gradient():
    bank = constant_bank([[0.0]])
    x = np.random.default_rng(0).normal(size=(16, 2))
    loss, grads, parts = disc_loss(bank, 0, 0, x, x, np.random.default_rng(1), kappa=0.0)
    assert parts["classification"] == pytest.approx(2 * math.log(2), abs=1e-12)
    assert max(np.abs(g).max() for g in grads) < 1e-12


def test_untrained_net_on_identical_batches_near_two_log_two():
    bank = DiscriminatorBank.create("Independent", 1, 1, 3, seed=0)
    x = np.random.default_rng(0).normal(size=(64, 3))
    _, _, parts = disc_loss(bank, 0, 0, x, x, np.random.default_rng(0))
    assert parts["classification"] == pytest.approx(2 * math.log(2), abs=0.05)


def test_bank_validation():
    with pytest.raises(ValueError):
        DiscriminatorBank.create("Shared", 1, 1, 2)
    with pytest.raises(ValueError):
        DiscriminatorBank.create("WeightShared", 1, 1, 2, pairs=[(0, 0)])
    bank = DiscriminatorBank.create("Independent", 2, 2, 2, pairs=[(0, 0), (1, 1)])
    with pytest.raises(KeyError):
        bank.locate(0, 1)
    with pytest.raises(ValueError):
        bank.prob(0, 0, np.zeros((3, 5)))


def test_interpolates_cycle_shorter_batch():
    xp = np.zeros((5, 1))
    xe = np.ones((2, 1))
    out = interpolates(xp, xe, np.random.default_rng(0))
    assert out.shape == (5, 1) and np.all((out >= 0) & (out <= 1))


def test_gradient_penalty_end_to_end_finite_differences():
    rng = np.random.default_rng(3)
    bank = DiscriminatorBank.create("Independent", 1, 1, 3, seed=0, hidden=(5, 5))
    xp, xe = rng.normal(size=(6, 3)), rng.normal(size=(4, 3)) + 1.0
    _, net, _ = bank.locate(0, 0)

    def f():
        return disc_loss(bank, 0, 0, xp, xe, np.random.default_rng(7))[0]

    _, grads, _ = disc_loss(bank, 0, 0, xp, xe, np.random.default_rng(7))
    flat = nn.flat_params(net.params)
    num = np.zeros_like(flat)
    for k in range(flat.size):
        d = np.zeros_like(flat)
        d[k] = 1e-6
        nn.set_flat_params(net.params, flat + d)
        fp = f()
        nn.set_flat_params(net.params, flat - d)
        num[k] = (fp - f()) / 2e-6
    nn.set_flat_params(net.params, flat)
    g = nn.flat_params(grads)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4


def _grid_occupancies(expert_noise=0.2):
    mp = windy_grid_mdp(EnvSpec("WindyGrid", DynamicsParam.of(wind=0.5)))
    me = windy_grid_mdp(EnvSpec("WindyGrid", DynamicsParam.of(wind=1.5)))
    pe = (1 - expert_noise) * value_iteration(me).pi + expert_noise / 4
    rp = tb.solve_occupancy(mp, tb.TabularPolicy.uniform(25, 4))
    re = tb.solve_occupancy(me, tb.TabularPolicy(pe))
    return rp, re


def _fit_tabular(rho_p, rho_e, steps=3000):
    """Full-batch Adam on one-hot cells; each cell carries its occupancy as weight."""
    X = np.eye(rho_p.size)
    bank = DiscriminatorBank.create("Independent", 1, 1, rho_p.size, seed=0, hidden=(), kappa=0.0, lr=0.05)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        _, g, _ = disc_loss_weighted(bank, 0, 0, X, X, rho_e, rng, kappa=0.0, policy_weights=rho_p)
        bank.opts[(0, 0)].step(g)
    return bank.prob(0, 0, X)


def test_tabular_discriminator_reaches_closed_form():
    rp, re = _grid_occupancies(expert_noise=0.0)
    D = _fit_tabular(rp.normalized().ravel(), re.normalized().ravel())
    star = tb.optimal_discriminator(re.normalized(), rp.normalized()).ravel()
    defined = np.isfinite(star)
    assert np.abs(D - star)[defined].max() <= 0.02


def test_weighted_tabular_discriminator_with_exact_ratio():
    rp, re = _grid_occupancies()
    w = (rp.mu / rp.mu.sum()) / (re.mu / re.mu.sum())  # state ratio mu_pi / mu_E
    pn, en = rp.normalized(), re.normalized()
    ew = (w[:, None] * en).ravel()
    D = _fit_tabular(pn.ravel(), ew)
    star = ew / (pn.ravel() + ew)
    assert np.abs(D - star).max() <= 0.02


def test_weighted_loss_with_unit_weights_matches_plain():
    rng = np.random.default_rng(0)
    bank = DiscriminatorBank.create("Independent", 1, 1, 3, seed=1, hidden=(8,))
    xp, xe = rng.normal(size=(10, 3)), rng.normal(size=(7, 3))
    a = disc_loss(bank, 0, 0, xp, xe, np.random.default_rng(5))
    b = disc_loss_weighted(bank, 0, 0, xp, xe, np.ones(7), np.random.default_rng(5))
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    assert all(np.allclose(x, y, atol=1e-12) for x, y in zip(a[1], b[1]))


def test_weight_two_equals_duplicated_sample():
    rng = np.random.default_rng(0)
    bank = DiscriminatorBank.create("Independent", 1, 1, 3, seed=1, hidden=(8,))
    xp, xe = rng.normal(size=(10, 3)), rng.normal(size=(4, 3))
    w = np.array([2.0, 1.0, 1.0, 1.0])
    a = disc_loss_weighted(bank, 0, 0, xp, xe, w, None, kappa=0.0)
    b = disc_loss(bank, 0, 0, xp, np.concatenate([xe, xe[:1]]), None, kappa=0.0)
    assert a[0] == pytest.approx(b[0], abs=1e-12)


def test_weights_validated():
    bank = DiscriminatorBank.create("Independent", 1, 1, 2)
    x = np.zeros((3, 2))
    with pytest.raises(ValueError):
        disc_loss_weighted(bank, 0, 0, x, x, np.array([1.0, -1.0, 1.0]), None, kappa=0.0)
    with pytest.raises(ValueError):
        disc_loss_weighted(bank, 0, 0, x, x, np.ones(2), None, kappa=0.0)


def test_update_pair_separates_batches():
    rng = np.random.default_rng(0)
    bank = DiscriminatorBank.create("Independent", 1, 1, 2, seed=0, hidden=(16,), lr=1e-2)
    xp, xe = rng.normal(size=(256, 2)) - 2.0, rng.normal(size=(256, 2)) + 2.0
    losses = update_pair(bank, 0, 0, xp, xe, rng, epochs=20, minibatch=64)
    assert losses[-1] < losses[0]
    assert bank.prob(0, 0, xe).mean() - bank.prob(0, 0, xp).mean() > 0.4


def test_wsd_equivalent_by_construction():
    rng = np.random.default_rng(0)
    ind = DiscriminatorBank.create("Independent", 2, 3, 4, seed=3, hidden=(6, 5))
    wsd = wsd_from_independent(ind)
    xp = rng.normal(size=(9, 4))
    xes = [rng.normal(size=(7, 4)) + j for j in range(3)]
    for i in range(2):
        assert np.allclose(wsd.probs(i, xp), ind.probs(i, xp), atol=1e-12)
        total, _, _ = wsd_loss(wsd, i, xp, xes, np.random.default_rng(11))
        r = np.random.default_rng(11)
        ref = sum(disc_loss(ind, i, j, xp, xes[j], r)[0] for j in range(3))
        assert total == pytest.approx(ref, abs=1e-10)


def test_wsd_parameter_count():
    ind = DiscriminatorBank.create("Independent", 3, 3, 4)
    wsd = DiscriminatorBank.create("WeightShared", 3, 3, 4)
    assert ind.n_params == 9 * mlp_param_count((4, 100, 100, 1)) == 96309
    assert wsd.n_params == 3 * mlp_param_count((4, 100, 100, 3)) == 32709
    assert ind.n_params / wsd.n_params >= 2.5


def test_wsd_single_expert_equals_disc_loss():
    rng = np.random.default_rng(0)
    wsd = DiscriminatorBank.create("WeightShared", 1, 1, 3, seed=2, hidden=(7,))
    xp, xe = rng.normal(size=(8, 3)), rng.normal(size=(5, 3))
    a, _, _ = wsd_loss(wsd, 0, xp, [xe], np.random.default_rng(4))
    b, _, _ = disc_loss(wsd, 0, 0, xp, xe, np.random.default_rng(4))
    assert a == pytest.approx(b, abs=1e-14)
    with pytest.raises(ValueError):
        wsd_loss(DiscriminatorBank.create("Independent", 1, 1, 3), 0, xp, [xe], None)


def test_wsd_head_separation():
    rng = np.random.default_rng(0)
    wsd = DiscriminatorBank.create("WeightShared", 1, 2, 3, seed=2, hidden=(7,))
    xp = rng.normal(size=(8, 3))
    e0, e1 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    _, g1, _ = wsd_loss(wsd, 0, xp, [e0, e1], None, kappa=0.0)
    _, g2, _ = wsd_loss(wsd, 0, xp, [e0, e1 + 3.0], None, kappa=0.0)
    # head 0 is the first output column and bias entry
    assert np.array_equal(g1[-2][:, 0], g2[-2][:, 0]) and g1[-1][0] == g2[-1][0]
    assert not np.allclose(g1[-2][:, 1], g2[-2][:, 1])


def test_rime_reward_uses_least_expert_like_discriminator():
    bank = constant_bank([[logit(0.9), logit(0.1)]])
    x = np.zeros((1, 2))
    assert surrogate_reward(bank, "RIME", 0, x)[0] == pytest.approx(-math.log(0.9), abs=1e-12)
    assert surrogate_reward(bank, "GAIL-single", 0, x)[0] == pytest.approx(-math.log(0.1), abs=1e-12)
    with pytest.raises(ValueError):
        surrogate_reward(bank, "PPO", 0, x)


def test_single_expert_rewards_coincide():
    bank = DiscriminatorBank.create("Independent", 1, 1, 2, seed=0)
    x = np.random.default_rng(0).normal(size=(20, 2))
    r = surrogate_reward(bank, "RIME", 0, x)
    assert np.array_equal(r, surrogate_reward(bank, "OMME", 0, x))
    assert np.array_equal(r, surrogate_reward(bank, "GAIL-single", 0, x))


def test_rime_batch_reward_below_omme():
    # sample 0 looks like expert 0, sample 1 like expert 1
    bank = DiscriminatorBank.create("Independent", 1, 2, 1, hidden=())
    bank.nets[(0, 0)].params[0][:] = 4.0
    bank.nets[(0, 1)].params[0][:] = -4.0
    x = np.array([[1.0], [-1.0]])
    rime = surrogate_reward(bank, "RIME", 0, x).mean()
    omme = surrogate_reward(bank, "OMME", 0, x).mean()
    assert rime < omme


def test_omme_choice_is_batch_argmax():
    bank = constant_bank([[logit(0.7), logit(0.2), logit(0.4)]])
    assert omme_choice(bank, 0, np.zeros((4, 2))) == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(1, 4))
def test_max_ordering_never_violated(seed, n, J):
    rng = np.random.default_rng(seed)
    v = np.log1p(-rng.uniform(1e-6, 1 - 1e-6, size=(n, J)))
    assert max_ordering_gap(v) >= 0.0


def test_lfiw_gaussian_shift_recovers_log_ratio():
    rng = np.random.default_rng(0)
    xp = rng.normal(1.0, 1.0, size=(4000, 1))
    xq = rng.normal(0.0, 1.0, size=(4000, 1))
    est = lfiw_fit(RatioEstimator.create(1, rng, hidden=(32, 32), temperature=1.0), xp, xq, 2000, rng)
    grid = np.linspace(-2, 3, 101)[:, None]
    r = np.corrcoef(np.log(est.weights(grid)), grid[:, 0] - 0.5)[0, 1]
    assert r >= 0.9
    assert abs(est.weights(xq).mean() - 1.0) <= 1e-6


def test_lfiw_same_distribution_gives_unit_weights():
    rng = np.random.default_rng(1)
    xp = rng.normal(size=(4000, 2))
    xq = rng.normal(size=(4000, 2))
    est = lfiw_fit(RatioEstimator.create(2, rng, hidden=(32,), temperature=2.0), xp, xq, 1000, rng)
    held = rng.normal(size=(1000, 2))
    assert np.abs(est.weights(held) - 1.0).max() <= 0.1


def test_lfiw_divergence_aborts():
    rng = np.random.default_rng(0)
    est = RatioEstimator.create(1, rng, hidden=(4,))
    est.net.params[-1][:] = 1e7  # softplus(1e7) makes the Q term explode
    with pytest.raises(nn.NumericalError):
        lfiw_fit(est, rng.normal(size=(10, 1)), rng.normal(size=(10, 1)), 5, rng)


def test_bank_round_trip():
    bank = DiscriminatorBank.create("WeightShared", 2, 2, 3, seed=4, hidden=(5,), gp_on="output")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    assert len(update_trunk(bank, 0, x, [x + 1, x - 1], rng, epochs=1)) == 1
    arrays, meta = bank.to_arrays()
    back = DiscriminatorBank.from_arrays(arrays, meta)
    assert back.gp_on == "output" and back.opts[0].t == bank.opts[0].t
    assert np.array_equal(back.probs(1, x), bank.probs(1, x))
