"""Exact occupancy measures and closed-form discriminators on finite MDPs.

Everything here is a pure function of dense numpy arrays.  Occupancies are
unnormalized and discounted, so they sum to ``1 / (1 - gamma)``.  Cells where
both measures in a ratio vanish are undefined (NaN) and drop out of every
divergence sum, with ``0 * log 0 := 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
WEIGHT_TOL = 1e-9
RANK_RTOL = 1e-9


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S'), row-stochastic over s'
    mu0: np.ndarray  # (S,)
    gamma: float
    R: np.ndarray | None = None  # (S, A); only experts look at it

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.mu0 = np.asarray(self.mu0, dtype=float)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {self.P.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be distributions")
        if self.mu0.shape != (self.P.shape[0],) or np.any(self.mu0 < 0) or abs(self.mu0.sum() - 1.0) > ROW_TOL:
            raise ValueError("mu0 must be a distribution over states")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.R is not None:
            self.R = np.asarray(self.R, dtype=float).reshape(self.P.shape[:2])

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


@dataclass
class TabularPolicy:
    pi: np.ndarray  # (S, A)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if self.pi.ndim != 2 or np.any(self.pi < 0) or np.max(np.abs(self.pi.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be distributions")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        pi = np.zeros((len(actions), n_actions))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi)


@dataclass
class OccupancyTable:
    rho: np.ndarray  # (S, A)

    @property
    def mu(self) -> np.ndarray:
        return self.rho.sum(axis=1)

    def normalized(self) -> np.ndarray:
        return self.rho / self.rho.sum()


@dataclass
class RankReport:
    n_unknowns: int
    n_equations: int
    rank: int
    matrix: np.ndarray
    rhs: np.ndarray

    @property
    def underdetermined(self) -> bool:
        return self.rank < self.n_unknowns

    def residual(self, occupancies: list[OccupancyTable]) -> np.ndarray:
        x = np.concatenate([o.rho.ravel() for o in occupancies])
        return self.matrix @ x - self.rhs


def _check_compatible(mdps, policy=None):
    if not mdps:
        raise ValueError("need at least one MDP")
    S, A = mdps[0].n_states, mdps[0].n_actions
    for m in mdps:
        if (m.n_states, m.n_actions) != (S, A):
            raise ValueError("MDPs have mismatched state/action spaces")
        if abs(m.gamma - mdps[0].gamma) > 0 or np.any(m.mu0 != mdps[0].mu0):
            raise ValueError("MDPs must share gamma and the initial distribution")
    if policy is not None and policy.pi.shape != (S, A):
        raise ValueError(f"policy shape {policy.pi.shape} does not match MDP ({S}, {A})")


def solve_occupancy(mdp: TabularMDP, policy: TabularPolicy) -> OccupancyTable:
    """Solve ``mu = mu0 + gamma * P_pi^T mu`` and return ``rho(s,a) = mu(s) pi(a|s)``."""
    _check_compatible([mdp], policy)
    P_pi = np.einsum("sa,sat->st", policy.pi, mdp.P)
    M = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    try:
        mu = np.linalg.solve(M, mdp.mu0)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular Bellman flow system") from exc
    return OccupancyTable(mu[:, None] * policy.pi)


def flow_residual(mdp: TabularMDP, policy: TabularPolicy, occ: OccupancyTable) -> np.ndarray:
    """Elementwise residual of the single-environment Bellman flow equation."""
    inflow = np.einsum("tbs,tb->s", mdp.P, occ.rho)
    return occ.rho - mdp.mu0[:, None] * policy.pi - mdp.gamma * inflow[:, None] * policy.pi


def flow_matrix(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Matrix ``I - gamma * Pi P^T`` over flattened (s, a) cells."""
    S, A = mdp.n_states, mdp.n_actions
    # M[(s,a),(t,b)] = pi(a|s) P(s|t,b)
    M = policy.pi[:, :, None, None] * np.transpose(mdp.P, (2, 0, 1))[:, None, :, :]
    return np.eye(S * A) - mdp.gamma * M.reshape(S * A, S * A)


def flow_rank_report(mdps: list[TabularMDP], policy: TabularPolicy) -> RankReport:
    """Constraint system of the mixture flow equation over all per-environment occupancies."""
    _check_compatible(mdps, policy)
    N = len(mdps)
    blocks = [flow_matrix(m, policy) / N for m in mdps]
    A = np.hstack(blocks)
    rhs = (mdps[0].mu0[:, None] * policy.pi).ravel()
    sv = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size else 0
    return RankReport(n_unknowns=A.shape[1], n_equations=A.shape[0], rank=rank, matrix=A, rhs=rhs)


def optimal_discriminator(num: np.ndarray, den_other: np.ndarray) -> np.ndarray:
    """Maximizer ``num / (num + den_other)`` of ``num log D + den_other log(1 - D)``.

    NaN where both inputs are zero.
    """
    num = np.asarray(num, dtype=float)
    den_other = np.asarray(den_other, dtype=float)
    if np.any(num < 0) or np.any(den_other < 0):
        raise ValueError("discriminator weights must be non-negative")
    total = num + den_other
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, num / np.where(total > 0, total, 1.0), np.nan)


def _xlogy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0, 0.0, x * np.log(np.where(x == 0, 1.0, y)))


def js_divergence(p: np.ndarray, q: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jensen-Shannon divergence (natural log) along ``axis``."""
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = _xlogy(p, np.where(m > 0, p / np.where(m > 0, m, 1.0), 1.0))
        kq = _xlogy(q, np.where(m > 0, q / np.where(m > 0, m, 1.0), 1.0))
    return 0.5 * (kp.sum(axis=axis) + kq.sum(axis=axis))


def _weights(lam, n_experts: int, n_states: int) -> np.ndarray:
    if lam is None:
        return np.full((n_experts, n_states), 1.0 / n_experts)
    if callable(lam):
        lam = np.array([[lam(j, s) for s in range(n_states)] for j in range(n_experts)])
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (n_experts, n_states):
        raise ValueError(f"weights must have shape ({n_experts}, {n_states}), got {lam.shape}")
    if np.any(lam < 0) or np.max(np.abs(lam.sum(axis=0) - 1.0)) > WEIGHT_TOL:
        raise ValueError("per-state expert weights must be non-negative and sum to 1")
    return lam


def policy_js_objective(mdps, policy: TabularPolicy, experts: list[TabularPolicy], lam=None) -> float:
    """Expected weighted JS divergence between ``policy`` and each expert under the
    agent's mixture state distribution over all environments."""
    _check_compatible(mdps, policy)
    lam = _weights(lam, len(experts), mdps[0].n_states)
    mu_bar = np.mean([solve_occupancy(m, policy).mu for m in mdps], axis=0)
    js = np.stack([js_divergence(policy.pi, e.pi, axis=1) for e in experts])  # (J, S)
    return float(np.sum(mu_bar * np.sum(lam * js, axis=0)))


def theorem51_rhs(mdps, policy: TabularPolicy, experts: list[TabularPolicy], lam=None) -> float:
    """Sum over (env, expert) pairs of the discriminator objective at its closed-form
    optimum, plus ``log 2 / (1 - gamma)``."""
    _check_compatible(mdps, policy)
    N = len(mdps)
    lam = _weights(lam, len(experts), mdps[0].n_states)
    total = 0.0
    for mdp in mdps:
        occ = solve_occupancy(mdp, policy)
        for j, expert in enumerate(experts):
            g = occ.rho * lam[j][:, None] / (2 * N)
            h = occ.mu[:, None] * expert.pi * lam[j][:, None] / (2 * N)
            d = optimal_discriminator(h, g)
            total += float(np.sum(_xlogy(g, 1.0 - np.nan_to_num(d)) + _xlogy(h, np.nan_to_num(d))))
    return total + math.log(2.0) / (1.0 - mdps[0].gamma)


def _argmax_bisect(g: np.ndarray, h: np.ndarray, iters: int = 64) -> np.ndarray:
    """Cellwise maximizer over [0, 1] of ``g log(1-D) + h log D`` by bisection on the
    sign of the derivative (scaled by D(1-D) > 0)."""
    lo = np.zeros_like(g)
    hi = np.ones_like(g)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        up = h * (1.0 - mid) - g * mid > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    out = 0.5 * (lo + hi)
    return np.where(g + h > 0, out, np.nan)


def theorem52_check(rho_pi: OccupancyTable, rho_e: OccupancyTable, lam_state, tol: float = 1e-10) -> bool:
    """True when the per-state weighted discriminator objective and the unweighted one
    share their maximizer in every defined cell."""
    lam_state = np.asarray(lam_state, dtype=float)
    if np.any(lam_state <= 0):
        raise ValueError("state weights must be positive")
    weighted = _argmax_bisect(rho_pi.rho * lam_state[:, None], rho_e.rho * lam_state[:, None])
    plain = optimal_discriminator(rho_e.rho, rho_pi.rho)
    if not np.array_equal(np.isnan(weighted), np.isnan(plain)):
        return False
    ok = ~np.isnan(plain)
    return bool(np.all(np.abs(weighted[ok] - plain[ok]) <= tol))


def gail_js_identity(rho_pi: OccupancyTable, rho_e: OccupancyTable) -> tuple[float, float]:
    """JS divergence of the normalized occupancies, computed directly and through the
    discriminator objective at its optimum.  The two values must agree."""
    p, q = rho_pi.normalized().ravel(), rho_e.normalized().ravel()
    direct = float(js_divergence(p, q))
    d = optimal_discriminator(q, p)
    inner = float(np.sum(_xlogy(q, np.nan_to_num(d)) + _xlogy(p, 1.0 - np.nan_to_num(d))))
    return direct, 0.5 * inner + math.log(2.0)


# ---------------------------------------------------------------- fixtures


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator, mu0=None) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if mu0 is None:
        mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, mu0, gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def random_state_weights(n_experts: int, n_states: int, rng: np.random.Generator) -> np.ndarray:
    """Per-state simplex draw; column ``s`` holds ``lambda_j(s)`` over experts."""
    return rng.dirichlet(np.ones(n_experts), size=n_states).T


# --------------------------------------------------------------- text files


def load_mdp_text(path) -> TabularMDP:
    """Read an MDP from the line-oriented text schema.

    Schema (blank lines and ``#`` comments ignored)::

        states <S>
        actions <A>
        gamma <float>
        mu0 <S floats>
        P <s> <a> <S floats>      # one line per (s, a)
        R <s> <a> <float>         # optional
    """
    S = A = None
    gamma = None
    mu0 = None
    rows: dict[tuple[int, int], list[float]] = {}
    rewards: dict[tuple[int, int], float] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            if key == "states":
                S = int(vals[0])
            elif key == "actions":
                A = int(vals[0])
            elif key == "gamma":
                gamma = float(vals[0])
            elif key == "mu0":
                mu0 = [float(v) for v in vals]
            elif key == "P":
                rows[(int(vals[0]), int(vals[1]))] = [float(v) for v in vals[2:]]
            elif key == "R":
                rewards[(int(vals[0]), int(vals[1]))] = float(vals[2])
            else:
                raise ValueError(f"unknown key {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if S is None or A is None or gamma is None or mu0 is None:
        raise ValueError(f"{path}: states, actions, gamma and mu0 are required")
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            if (s, a) not in rows or len(rows[(s, a)]) != S:
                raise ValueError(f"{path}: missing or malformed row P {s} {a}")
            P[s, a] = rows[(s, a)]
    R = None
    if rewards:
        R = np.zeros((S, A))
        for (s, a), r in rewards.items():
            R[s, a] = r
    return TabularMDP(P, np.array(mu0), gamma, R)


def dump_mdp_text(mdp: TabularMDP, path) -> None:
    lines = [f"states {mdp.n_states}", f"actions {mdp.n_actions}", f"gamma {mdp.gamma!r}"]
    lines.append("mu0 " + " ".join(repr(float(v)) for v in mdp.mu0))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(f"P {s} {a} " + " ".join(repr(float(v)) for v in mdp.P[s, a]))
    if mdp.R is not None:
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                lines.append(f"R {s} {a} {float(mdp.R[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
