"""Small numpy neural substrate: tanh MLPs, exact reverse-mode gradients,
the double-backprop path of the input-gradient penalty, policy heads, Adam,
and a binary checkpoint container.

Weights are stored as ``(fan_in, fan_out)`` so a layer is ``h @ W + b``.
Every public entry point raises :class:`NumericalError` as soon as a NaN or
Inf shows up in a forward or backward quantity.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
GP_EPS = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


def check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


@dataclass
class Mlp:
    """Feed-forward net with tanh hidden layers and an identity output."""

    sizes: tuple[int, ...]
    params: list[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> "Mlp":
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        params = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
            if k == len(sizes) - 2:
                W *= out_scale
                b *= out_scale
            params += [W, b]
        return cls(sizes, params)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "Mlp":
        sizes = tuple(int(s) for s in sizes)
        params = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            params += [np.zeros((n_in, n_out)), np.zeros(n_out)]
        return cls(sizes, params)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [p.copy() for p in self.params])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Tape:
    """Activations of one forward pass; ``hs[0]`` is the input."""

    net: Mlp
    hs: list[np.ndarray]
    y: np.ndarray
    retain: bool = False
    consumed: bool = field(default=False, init=False)


def forward(net: Mlp, x: np.ndarray, retain: bool = False) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != net input {net.in_dim}")
    check_finite(x, "network input")
    hs = [x]
    h = x
    p = net.params
    for k in range(net.n_layers - 1):
        h = np.tanh(h @ p[2 * k] + p[2 * k + 1])
        hs.append(h)
    y = h @ p[-2] + p[-1]
    check_finite(y, "network output")
    return y, Tape(net, hs, y, retain)


def _backprop(net: Mlp, hs: list[np.ndarray], dy: np.ndarray, extra_dh=None):
    """Reverse pass; ``extra_dh[k]`` is an additional gradient arriving at ``hs[k]``."""
    p = net.params
    grads: list[np.ndarray] = [None] * len(p)  # type: ignore[list-item]
    L = net.n_layers
    dz = dy
    for k in range(L - 1, -1, -1):
        grads[2 * k] = hs[k].T @ dz
        grads[2 * k + 1] = dz.sum(axis=0)
        dh = dz @ p[2 * k].T
        if extra_dh is not None and extra_dh[k] is not None:
            dh = dh + extra_dh[k]
        if k == 0:
            dx = dh
        else:
            dz = dh * (1.0 - hs[k] ** 2)
    return grads, dx


def param_grad(tape: Tape, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(upstream * y)`` with respect to every parameter."""
    if tape.consumed and not tape.retain:
        raise RuntimeError("tape already consumed")
    upstream = np.asarray(upstream, dtype=float).reshape(tape.y.shape)
    grads, _ = _backprop(tape.net, tape.hs, upstream)
    for g in grads:
        check_finite(g, "parameter gradient")
    tape.consumed = True
    return grads


def input_grad(tape: Tape, upstream: np.ndarray | None = None) -> np.ndarray:
    """Per-sample gradient of the output with respect to the input.

    With no ``upstream`` the net must have a scalar output.
    """
    if upstream is None:
        if tape.net.out_dim != 1:
            raise ValueError("upstream required for vector-output nets")
        upstream = np.ones_like(tape.y)
    upstream = np.asarray(upstream, dtype=float).reshape(tape.y.shape)
    _, dx = _backprop(tape.net, tape.hs, upstream)
    check_finite(dx, "input gradient")
    return dx


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def gp_param_grad(
    net: Mlp,
    x: np.ndarray,
    kappa: float = 10.0,
    out_index: int = 0,
    squash: str | None = "sigmoid",
    weights: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Penalty ``kappa * mean((||grad_x D(x)|| - 1)^2)`` and its parameter gradients.

    ``D`` is output ``out_index`` of the net, passed through a logistic
    squash when ``squash == "sigmoid"`` and used raw when ``squash`` is None.
    The norm is ``sqrt(sum g^2 + 1e-12)``.  Gradients are exact: the input
    gradient pass is itself differentiated.
    """
    y, tape = forward(net, x)
    hs = tape.hs
    B = hs[0].shape[0]
    p = net.params
    H = net.n_layers - 1
    w = p[-2][:, out_index]
    f = y[:, out_index]

    # input-gradient pass, keeping every intermediate
    c: list[np.ndarray] = [None] * (H + 1)  # type: ignore[list-item]
    u: list[np.ndarray] = [None] * (H + 1)  # type: ignore[list-item]
    c[H] = np.broadcast_to(w, (B, w.size))
    for k in range(H, 0, -1):
        u[k] = c[k] * (1.0 - hs[k] ** 2)
        c[k - 1] = u[k] @ p[2 * (k - 1)].T
    g = c[0]
    if squash == "sigmoid":
        D = sigmoid(f)
        s = D * (1.0 - D)
        G = s[:, None] * g
    elif squash is None:
        G = g
    else:
        raise ValueError(f"unknown squash {squash!r}")
    norm = np.sqrt(np.sum(G * G, axis=1) + GP_EPS)
    wts = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, float) / np.sum(weights)
    penalty = float(kappa * np.sum(wts * (norm - 1.0) ** 2))

    grads = [np.zeros_like(q) for q in p]
    if kappa == 0.0:
        return penalty, grads
    dnorm = 2.0 * kappa * wts * (norm - 1.0)
    dG = (dnorm / norm)[:, None] * G
    if squash == "sigmoid":
        ds = np.sum(dG * g, axis=1)
        dg = dG * s[:, None]
        df = ds * (1.0 - 2.0 * D) * s
    else:
        dg = dG
        df = np.zeros(B)

    # reverse through the input-gradient pass
    dc = dg
    extra_dh: list[np.ndarray | None] = [None] * (H + 1)
    for k in range(1, H + 1):
        Wk = p[2 * (k - 1)]
        du = dc @ Wk
        grads[2 * (k - 1)] += dc.T @ u[k]
        dc = du * (1.0 - hs[k] ** 2)
        extra_dh[k] = du * (-2.0 * hs[k] * c[k])
    grads[-2][:, out_index] += dc.sum(axis=0)

    # reverse through the forward pass
    dy = np.zeros_like(y)
    dy[:, out_index] = df
    fwd, _ = _backprop(net, hs, dy, extra_dh)
    for q, gq in zip(grads, fwd):
        q += gq
    check_finite(penalty, "gradient penalty")
    for q in grads:
        check_finite(q, "gradient-penalty parameter gradient")
    return penalty, grads


def flat_params(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_flat_params(params: Sequence[np.ndarray], flat: np.ndarray) -> None:
    i = 0
    for p in params:
        n = p.size
        p[...] = flat[i : i + n].reshape(p.shape)
        i += n


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{k}"] = m
            out[f"{prefix}.v{k}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for k in range(len(self.m)):
            self.m[k][...] = arrays[f"{prefix}.m{k}"]
            self.v[k][...] = arrays[f"{prefix}.v{k}"]


# ---------------------------------------------------------------- policies


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and state-independent log-std."""

    discrete = False

    def __init__(self, mean_net: Mlp, log_std: np.ndarray):
        self.mean_net = mean_net
        self.log_std = np.asarray(log_std, dtype=float)
        self.clamp()

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, hidden=(64, 64), rng=None, init_log_std: float = 0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        net = Mlp.init((obs_dim, *hidden, act_dim), rng, out_scale=0.01)
        return cls(net, np.full(act_dim, init_log_std))

    @property
    def obs_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def act_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def params(self) -> list[np.ndarray]:
        return self.mean_net.params + [self.log_std]

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    def mean(self, states: np.ndarray) -> np.ndarray:
        return forward(self.mean_net, states)[0]

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        a = np.asarray(actions, dtype=float).reshape(mu.shape)
        z = (a - mu) * np.exp(-self.log_std)
        return -0.5 * np.sum(z * z, axis=1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI

    def log_prob_and_grad(self, states, actions, upstream) -> tuple[np.ndarray, list[np.ndarray]]:
        """Log-densities and the gradient of ``sum(upstream * logp)``."""
        mu, tape = forward(self.mean_net, states)
        a = np.asarray(actions, dtype=float).reshape(mu.shape)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = a - mu
        logp = -0.5 * np.sum(diff * diff * inv_var, axis=1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI
        up = np.asarray(upstream, dtype=float)[:, None]
        grads = param_grad(tape, up * diff * inv_var)
        g_log_std = np.sum(up * (diff * diff * inv_var - 1.0), axis=0)
        return logp, grads + [g_log_std]

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.act_dim * (1.0 + LOG_2PI))

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(states)
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def act(self, state, rng=None, deterministic: bool = False) -> np.ndarray:
        mu = self.mean(state)[0]
        if deterministic:
            return mu
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def regression_grad(self, states, actions) -> tuple[float, list[np.ndarray]]:
        """Half mean-squared error of the mean against ``actions``."""
        mu, tape = forward(self.mean_net, states)
        diff = mu - np.asarray(actions, dtype=float).reshape(mu.shape)
        n = diff.shape[0]
        loss = 0.5 * float(np.sum(diff * diff)) / n
        return loss, param_grad(tape, diff / n) + [np.zeros_like(self.log_std)]

    def regression_loss(self, states, actions) -> float:
        diff = self.mean(states) - np.asarray(actions, dtype=float).reshape(-1, self.act_dim)
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"mean.{k}": p for k, p in enumerate(self.mean_net.params)}
        out["log_std"] = self.log_std
        return out

    @classmethod
    def from_arrays(cls, sizes, arrays: dict[str, np.ndarray]) -> "GaussianPolicy":
        n = 2 * (len(sizes) - 1)
        net = Mlp(tuple(sizes), [arrays[f"mean.{k}"].copy() for k in range(n)])
        return cls(net, arrays["log_std"].copy())


class CategoricalPolicy:
    """Softmax policy over a finite action set; actions are index arrays of shape (1,)."""

    discrete = True

    def __init__(self, logits_net: Mlp):
        self.logits_net = logits_net

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, hidden=(64, 64), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(Mlp.init((obs_dim, *hidden, n_actions), rng, out_scale=0.01))

    @property
    def obs_dim(self) -> int:
        return self.logits_net.in_dim

    @property
    def n_actions(self) -> int:
        return self.logits_net.out_dim

    act_dim = 1

    @property
    def params(self) -> list[np.ndarray]:
        return self.logits_net.params

    def clamp(self) -> None:
        pass

    def copy(self) -> "CategoricalPolicy":
        return CategoricalPolicy(self.logits_net.copy())

    def probs(self, states) -> np.ndarray:
        z = forward(self.logits_net, states)[0]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def _log_softmax(self, z):
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))

    def log_prob(self, states, actions) -> np.ndarray:
        ls = self._log_softmax(forward(self.logits_net, states)[0])
        idx = np.asarray(actions).reshape(-1).astype(int)
        return ls[np.arange(len(idx)), idx]

    def log_prob_and_grad(self, states, actions, upstream):
        z, tape = forward(self.logits_net, states)
        ls = self._log_softmax(z)
        idx = np.asarray(actions).reshape(-1).astype(int)
        rows = np.arange(len(idx))
        logp = ls[rows, idx]
        dz = -np.exp(ls)
        dz[rows, idx] += 1.0
        dz *= np.asarray(upstream, dtype=float)[:, None]
        return logp, param_grad(tape, dz)

    def entropy(self, states=None) -> float:
        if states is None:
            return math.log(self.n_actions)
        p = self.probs(states)
        return float(-np.mean(np.sum(p * np.log(np.maximum(p, 1e-300)), axis=1)))

    def sample(self, states, rng) -> np.ndarray:
        p = self.probs(states)
        u = rng.random((p.shape[0], 1))
        return (np.cumsum(p, axis=1) < u).sum(axis=1).reshape(-1, 1).astype(float)

    def act(self, state, rng=None, deterministic: bool = False) -> np.ndarray:
        p = self.probs(state)[0]
        if deterministic:
            return np.array([float(np.argmax(p))])
        k = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        return np.array([float(min(k, len(p) - 1))])

    def regression_grad(self, states, actions):
        """Mean negative log-likelihood of ``actions`` and its gradient."""
        n = len(states)
        logp, grads = self.log_prob_and_grad(states, actions, np.full(n, -1.0 / n))
        return -float(np.mean(logp)), grads

    def regression_loss(self, states, actions) -> float:
        return -float(np.mean(self.log_prob(states, actions)))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"logits.{k}": p for k, p in enumerate(self.logits_net.params)}

    @classmethod
    def from_arrays(cls, sizes, arrays):
        n = 2 * (len(sizes) - 1)
        return cls(Mlp(tuple(sizes), [arrays[f"logits.{k}"].copy() for k in range(n)]))


# ------------------------------------------------------------- checkpoints

MAGIC = b"RIMECKPT"
CONTAINER_VERSION = 1


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata record.

    Layout: magic, u32 version, u32 meta length, meta JSON, u32 array
    count, then per array: u16 name length, name, u32 ndim, u64 dims,
    little-endian float64 data.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 16
    meta = json.loads(data[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
    return arrays, meta


def policy_to_arrays(policy) -> tuple[dict[str, np.ndarray], dict]:
    if policy.discrete:
        return policy.to_arrays(), {"kind": "categorical", "sizes": list(policy.logits_net.sizes)}
    return policy.to_arrays(), {"kind": "gaussian", "sizes": list(policy.mean_net.sizes)}


def policy_from_arrays(arrays, meta):
    if meta["kind"] == "categorical":
        return CategoricalPolicy.from_arrays(meta["sizes"], arrays)
    return GaussianPolicy.from_arrays(meta["sizes"], arrays)
