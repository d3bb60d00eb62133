"""Discriminator bank, surrogate rewards and importance-ratio estimation.

``D_ij`` separates policy samples collected in interaction environment ``i``
from demonstrations of expert ``j``.  D is the logistic squash of an MLP
output; the classification loss is

    -( E_pi[log(1 - D)] + E_E[log D] )

plus a gradient penalty on interpolates.  Two layouts exist: ``Independent``
keeps one scalar-output network per (i, j) pair, ``WeightShared`` keeps one
trunk per ``i`` with a head per ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import (
    Adam,
    Mlp,
    NumericalError,
    check_finite,
    forward,
    gp_param_grad,
    param_grad,
    sigmoid,
    softplus,
)

KAPPA = 10.0
D_CLAMP = 1e-6
DISC_HIDDEN = (100, 100)
ALGORITHMS = ("RIME", "OMME", "GAIL-single", "GAIL-mixture", "SNEMPE-max")
MODES = ("Independent", "WeightShared")
GP_TARGETS = {"output": "sigmoid", "logit": None}

# spawn-key purpose tags for seeded randomness
SEED_DISC_INIT = 1
SEED_TRUNK_INIT = 2


def _init_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class DiscriminatorBank:
    mode: str
    n_envs: int
    n_experts: int
    in_dim: int
    nets: dict = field(default_factory=dict)
    kappa: float = KAPPA
    lr: float = 3e-4
    opts: dict = field(default_factory=dict)
    # "output" penalizes grad of the squashed D, "logit" the pre-squash score
    gp_on: str = "logit"

    @classmethod
    def create(
        cls,
        mode: str,
        n_envs: int,
        n_experts: int,
        in_dim: int,
        seed: int = 0,
        pairs=None,
        hidden=DISC_HIDDEN,
        kappa: float = KAPPA,
        lr: float = 3e-4,
        gp_on: str = "logit",
    ) -> "DiscriminatorBank":
        """``pairs`` restricts an Independent bank to the listed (i, j) keys."""
        if mode not in MODES:
            raise ValueError(f"unknown discriminator mode {mode!r}")
        if n_envs < 1 or n_experts < 1:
            raise ValueError("need at least one environment and one expert")
        nets = {}
        if mode == "Independent":
            keys = pairs if pairs is not None else [(i, j) for i in range(n_envs) for j in range(n_experts)]
            for i, j in keys:
                nets[(i, j)] = Mlp.init((in_dim, *hidden, 1), _init_rng(seed, SEED_DISC_INIT, i, j))
        else:
            if pairs is not None:
                raise ValueError("a weight-shared bank always covers every expert")
            for i in range(n_envs):
                nets[i] = Mlp.init((in_dim, *hidden, n_experts), _init_rng(seed, SEED_TRUNK_INIT, i))
        if gp_on not in GP_TARGETS:
            raise ValueError(f"gp_on must be one of {sorted(GP_TARGETS)}")
        bank = cls(mode, n_envs, n_experts, in_dim, nets, kappa, lr, gp_on=gp_on)
        bank.reset_optimizers()
        return bank

    def reset_optimizers(self) -> None:
        self.opts = {k: Adam(net.params, self.lr) for k, net in self.nets.items()}

    @property
    def pairs(self) -> list[tuple[int, int]]:
        if self.mode == "Independent":
            return list(self.nets)
        return [(i, j) for i in self.nets for j in range(self.n_experts)]

    def locate(self, i: int, j: int) -> tuple[object, Mlp, int]:
        """(optimizer key, network, output index) serving D_ij."""
        key = (i, j) if self.mode == "Independent" else i
        if key not in self.nets or not 0 <= j < self.n_experts:
            raise KeyError(f"bank has no discriminator D_{i}{j}")
        return key, self.nets[key], (0 if self.mode == "Independent" else j)

    def experts_of(self, i: int) -> list[int]:
        return [j for (a, j) in self.pairs if a == i]

    def logit(self, i: int, j: int, x) -> np.ndarray:
        _, net, k = self.locate(i, j)
        self._check_dim(x)
        return forward(net, x)[0][:, k]

    def prob(self, i: int, j: int, x) -> np.ndarray:
        return sigmoid(self.logit(i, j, x))

    def probs(self, i: int, x) -> np.ndarray:
        """(n, J) matrix of D_ij over the experts paired with ``i``."""
        return np.stack([self.prob(i, j, x) for j in self.experts_of(i)], axis=1)

    @property
    def n_params(self) -> int:
        return sum(net.n_params() for net in self.nets.values())

    def _check_dim(self, x) -> None:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"discriminator input has shape {x.shape}, expected (n, {self.in_dim})")

    # checkpointing
    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {}
        keys = []
        for n, (key, net) in enumerate(self.nets.items()):
            keys.append(list(key) if isinstance(key, tuple) else key)
            for m, p in enumerate(net.params):
                arrays[f"disc{n}.p{m}"] = p
            arrays.update(self.opts[key].state_arrays(f"disc{n}.opt"))
        meta = {
            "mode": self.mode,
            "n_envs": self.n_envs,
            "n_experts": self.n_experts,
            "in_dim": self.in_dim,
            "kappa": self.kappa,
            "lr": self.lr,
            "gp_on": self.gp_on,
            "keys": keys,
            "sizes": [list(net.sizes) for net in self.nets.values()],
        }
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "DiscriminatorBank":
        nets = {}
        for n, (key, sizes) in enumerate(zip(meta["keys"], meta["sizes"])):
            key = tuple(key) if isinstance(key, list) else key
            params = [np.array(arrays[f"disc{n}.p{m}"]) for m in range(2 * (len(sizes) - 1))]
            nets[key] = Mlp(tuple(sizes), params)
        bank = cls(meta["mode"], meta["n_envs"], meta["n_experts"], meta["in_dim"], nets, meta["kappa"], meta["lr"], gp_on=meta.get("gp_on", "logit"))
        bank.reset_optimizers()
        for n, key in enumerate(nets):
            bank.opts[key].load_state_arrays(f"disc{n}.opt", arrays)
        return bank


# ------------------------------------------------------------------- losses


def _clamped_log_terms(f: np.ndarray):
    """log(1-D), log(D) and their derivatives w.r.t. the logit, D clamped."""
    D = sigmoid(f)
    Dc = np.clip(D, D_CLAMP, 1.0 - D_CLAMP)
    inside = (D >= D_CLAMP) & (D <= 1.0 - D_CLAMP)
    log1m = np.log1p(-Dc)
    logd = np.log(Dc)
    dlog1m = np.where(inside, -D, 0.0)
    dlogd = np.where(inside, 1.0 - D, 0.0)
    return log1m, logd, dlog1m, dlogd


def _normalized(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative, one per sample, with positive sum")
    return w / w.sum()


def interpolates(policy_x, expert_x, rng: np.random.Generator) -> np.ndarray:
    """x_hat = eps*x_pi + (1-eps)*x_E, index-aligned with the shorter batch cycled."""
    n = max(len(policy_x), len(expert_x))
    xp = policy_x[np.arange(n) % len(policy_x)]
    xe = expert_x[np.arange(n) % len(expert_x)]
    eps = rng.random((n, 1))
    return eps * xp + (1.0 - eps) * xe


def _pair_loss(net: Mlp, k: int, policy_x, expert_x, rng, kappa, policy_weights=None, expert_weights=None, gp_on="logit"):
    """Loss of output ``k`` of ``net`` and its parameter gradients."""
    if len(policy_x) == 0 or len(expert_x) == 0:
        raise ValueError("discriminator batches must be non-empty")
    wp = _normalized(policy_weights, len(policy_x))
    we = _normalized(expert_weights, len(expert_x))

    fp, tp = forward(net, policy_x)
    log1m, _, dlog1m, _ = _clamped_log_terms(fp[:, k])
    dyp = np.zeros_like(fp)
    dyp[:, k] = -wp * dlog1m
    grads = param_grad(tp, dyp)

    fe, te = forward(net, expert_x)
    _, logd, _, dlogd = _clamped_log_terms(fe[:, k])
    dye = np.zeros_like(fe)
    dye[:, k] = -we * dlogd
    for g, ge in zip(grads, param_grad(te, dye)):
        g += ge

    cls_loss = -float(np.sum(wp * log1m) + np.sum(we * logd))
    penalty = 0.0
    if kappa:
        penalty, gp = gp_param_grad(net, interpolates(policy_x, expert_x, rng), kappa, out_index=k, squash=GP_TARGETS[gp_on])
        for g, gg in zip(grads, gp):
            g += gg
    loss = cls_loss + penalty
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite discriminator loss {loss}")
    return loss, grads, {"classification": cls_loss, "penalty": penalty}


def disc_loss(bank: DiscriminatorBank, i: int, j: int, policy_x, expert_x, rng, kappa=None):
    """Eq.-style loss of D_ij; returns (loss, grads, parts)."""
    bank._check_dim(policy_x)
    bank._check_dim(expert_x)
    _, net, k = bank.locate(i, j)
    kappa = bank.kappa if kappa is None else kappa
    return _pair_loss(net, k, policy_x, expert_x, rng, kappa, gp_on=bank.gp_on)


def disc_loss_weighted(bank: DiscriminatorBank, i: int, j: int, policy_x, expert_x, expert_weights, rng, kappa=None, policy_weights=None):
    """As :func:`disc_loss` with the expert term reweighted per sample.

    Weights enter as a normalized average, so a weight of 2 on one sample is
    the same as listing that sample twice.
    """
    bank._check_dim(policy_x)
    bank._check_dim(expert_x)
    _, net, k = bank.locate(i, j)
    kappa = bank.kappa if kappa is None else kappa
    return _pair_loss(net, k, policy_x, expert_x, rng, kappa, policy_weights, expert_weights, bank.gp_on)


def wsd_loss(bank: DiscriminatorBank, i: int, policy_x, expert_xs, rng, kappa=None, expert_weights=None):
    """Sum over heads of the per-head loss for trunk ``i``; grads accumulate on the trunk."""
    if bank.mode != "WeightShared":
        raise ValueError("wsd_loss needs a WeightShared bank")
    if len(expert_xs) != bank.n_experts:
        raise ValueError(f"need {bank.n_experts} expert batches, got {len(expert_xs)}")
    kappa = bank.kappa if kappa is None else kappa
    net = bank.nets[i]
    bank._check_dim(policy_x)
    total = 0.0
    grads = [np.zeros_like(p) for p in net.params]
    parts = []
    for j, ex in enumerate(expert_xs):
        bank._check_dim(ex)
        w = None if expert_weights is None else expert_weights[j]
        loss, g, part = _pair_loss(net, j, policy_x, ex, rng, kappa, None, w, bank.gp_on)
        total += loss
        parts.append(part)
        for a, b in zip(grads, g):
            a += b
    return total, grads, parts


def update_pair(bank, i, j, policy_x, expert_x, rng, epochs=5, minibatch=256, expert_weights=None) -> list[float]:
    """Minibatch Adam descent on D_ij; expert samples drawn uniformly each step."""
    key, net, k = bank.locate(i, j)
    losses = []
    n = len(policy_x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = order[start : start + minibatch]
            eidx = rng.integers(len(expert_x), size=len(idx))
            w = None if expert_weights is None else expert_weights[eidx]
            loss, grads, _ = _pair_loss(net, k, policy_x[idx], expert_x[eidx], rng, bank.kappa, None, w, bank.gp_on)
            bank.opts[key].step(grads)
            losses.append(loss)
    return losses


def update_trunk(bank, i, policy_x, expert_xs, rng, epochs=5, minibatch=256, expert_weights=None) -> list[float]:
    losses = []
    n = len(policy_x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch):
            idx = order[start : start + minibatch]
            batches, ws = [], []
            for j, ex in enumerate(expert_xs):
                eidx = rng.integers(len(ex), size=len(idx))
                batches.append(ex[eidx])
                ws.append(None if expert_weights is None else expert_weights[j][eidx])
            loss, grads, _ = wsd_loss(bank, i, policy_x[idx], batches, rng, None, None if expert_weights is None else ws)
            bank.opts[i].step(grads)
            losses.append(loss)
    return losses


# ------------------------------------------------------------------ rewards


def _log1m_d(D: np.ndarray) -> np.ndarray:
    return np.log1p(-np.clip(D, D_CLAMP, 1.0 - D_CLAMP))


def omme_choice(bank: DiscriminatorBank, i: int, x) -> int:
    """Expert index maximizing the batch mean of log(1 - D_ij)."""
    experts = bank.experts_of(i)
    means = _log1m_d(bank.probs(i, x)).mean(axis=0)
    return experts[int(np.argmax(means))]


def surrogate_reward(bank: DiscriminatorBank, tag: str, i: int, x, j_star: int | None = None) -> np.ndarray:
    """Per-sample reward for policy samples ``x`` collected in environment ``i``."""
    if tag not in ALGORITHMS:
        raise ValueError(f"unknown algorithm tag {tag!r}")
    if tag in ("RIME", "SNEMPE-max"):
        ii = 0 if tag == "SNEMPE-max" else i
        r = -_log1m_d(bank.probs(ii, x)).max(axis=1)
    elif tag == "OMME":
        j = omme_choice(bank, i, x) if j_star is None else j_star
        r = -_log1m_d(bank.prob(i, j, x))
    elif tag == "GAIL-single":
        r = -_log1m_d(bank.prob(i, i, x))
    else:
        r = -_log1m_d(bank.prob(0, 0, x))
    check_finite(r, "surrogate reward")
    return r


def max_ordering_gap(values: np.ndarray) -> float:
    """mean_n(max_j v_nj) - max_j mean_n(v_nj); never negative."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    # identical 1-D reductions on both sides keep the comparison exact
    lhs = np.ascontiguousarray(values.max(axis=1)).sum() / n
    rhs = max(np.ascontiguousarray(values[:, j]).sum() / n for j in range(values.shape[1]))
    return float(lhs - rhs)


# ---------------------------------------------------------------------- WSD


def wsd_from_independent(bank: DiscriminatorBank) -> DiscriminatorBank:
    """Weight-shared bank whose trunk i stacks the nets D_i1..D_iN block-diagonally.

    Head j only sees the hidden units copied from D_ij, so every output,
    loss and penalty equals the independent one.
    """
    if bank.mode != "Independent":
        raise ValueError("source bank must be Independent")
    nets = {}
    J = bank.n_experts
    for i in range(bank.n_envs):
        members = [bank.nets[(i, j)] for j in range(J)]
        L = members[0].n_layers
        params = []
        for layer in range(L):
            Ws = [m.params[2 * layer] for m in members]
            bs = [m.params[2 * layer + 1] for m in members]
            if layer == 0:
                W = np.concatenate(Ws, axis=1)
            else:
                rows = sum(w.shape[0] for w in Ws)
                cols = sum(w.shape[1] for w in Ws)
                W = np.zeros((rows, cols))
                r = c = 0
                for w in Ws:
                    W[r : r + w.shape[0], c : c + w.shape[1]] = w
                    r += w.shape[0]
                    c += w.shape[1]
            params += [W, np.concatenate(bs)]
        sizes = (bank.in_dim, *(p.shape[1] for p in params[0::2]))
        nets[i] = Mlp(sizes, params)
    out = DiscriminatorBank("WeightShared", bank.n_envs, J, bank.in_dim, nets, bank.kappa, bank.lr, gp_on=bank.gp_on)
    out.reset_optimizers()
    return out


def mlp_param_count(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


# --------------------------------------------------------------------- LFIW


@dataclass
class RatioEstimator:
    """w(x) = softplus(net(x)) estimating p(x)/q(x) under the KL bound."""

    net: Mlp
    temperature: float = 2.0
    normalizer: float = 1.0

    @classmethod
    def create(cls, in_dim: int, rng, hidden=(64, 64), temperature: float = 2.0) -> "RatioEstimator":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return cls(Mlp.init((in_dim, *hidden, 1), rng), temperature)

    def raw(self, x) -> np.ndarray:
        return np.maximum(softplus(forward(self.net, x)[0][:, 0]), 1e-12)

    def bound(self, xp, xq) -> float:
        """E_P[log w + 1] - E_Q[w], the KL variational lower bound."""
        return float(np.mean(np.log(self.raw(xp)) + 1.0) - np.mean(self.raw(xq)))

    def calibrate(self, xq) -> None:
        self.normalizer = float(np.mean(self.raw(xq) ** (1.0 / self.temperature)))

    def weights(self, x) -> np.ndarray:
        """Temperature-smoothed weights, self-normalized over the calibration set."""
        return self.raw(x) ** (1.0 / self.temperature) / self.normalizer


def lfiw_fit(est: RatioEstimator, xp, xq, steps: int, rng, lr: float = 1e-3, minibatch: int = 256) -> RatioEstimator:
    """Maximize the KL bound by Adam, then self-normalize over ``xq``."""
    opt = Adam(est.net.params, lr)
    for _ in range(steps):
        ip = rng.integers(len(xp), size=min(minibatch, len(xp)))
        iq = rng.integers(len(xq), size=min(minibatch, len(xq)))
        op, tp = forward(est.net, xp[ip])
        oq, tq = forward(est.net, xq[iq])
        wp = np.maximum(softplus(op[:, 0]), 1e-12)
        wq = softplus(oq[:, 0])
        loss = -(np.mean(np.log(wp) + 1.0) - np.mean(wq))
        if not np.isfinite(loss) or abs(loss) > 1e6:
            raise NumericalError(f"importance-ratio bound diverged (loss {loss})")
        gp = param_grad(tp, (-sigmoid(op[:, 0]) / wp / len(ip))[:, None])
        gq = param_grad(tq, (sigmoid(oq[:, 0]) / len(iq))[:, None])
        opt.step([a + b for a, b in zip(gp, gq)])
    est.calibrate(xq)
    return est
