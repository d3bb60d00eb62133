"""Robustness sweeps over the dynamics grid and mean/min aggregation."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envlab import DynamicsParam, EnvSpec, make_env, rollout

GRID_DECIMALS = 10


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"axis {self.name}: lo {self.lo} > hi {self.hi}")
        if self.step <= 0:
            raise ValueError(f"axis {self.name}: step must be positive")

    def values(self) -> list[float]:
        n = int(np.floor((self.hi - self.lo) / self.step + 1e-9))
        return [round(self.lo + k * self.step, GRID_DECIMALS) for k in range(n + 1)]


@dataclass
class SweepSpec:
    axes: list[Axis]
    episodes: int = 10
    deterministic: bool = True
    agg_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        self.axes = [a if isinstance(a, Axis) else Axis(*a) for a in self.axes]
        if not self.axes:
            raise ValueError("sweep needs at least one axis")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        lo, hi = self.agg_range
        if lo > hi:
            raise ValueError("aggregate range lo > hi")
        for ax in self.axes:
            vals = ax.values()
            for end in (lo, hi):
                if not any(abs(v - end) < 1e-9 for v in vals):
                    raise ValueError(f"axis {ax.name}: aggregate range endpoint {end} is not a grid point")

    @classmethod
    def one_d(cls, name: str = "gravity", lo=0.5, hi=1.5, step=0.05, **kw) -> "SweepSpec":
        return cls([Axis(name, lo, hi, step)], **kw)

    def grid(self) -> list[dict[str, float]]:
        names = [a.name for a in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(a.values() for a in self.axes))]


@dataclass
class RobustnessReport:
    family: str
    axes: list[str]
    points: list[dict[str, float]]
    means: np.ndarray
    stds: np.ndarray
    n_episodes: int
    agg_range: tuple[float, float] = (0.5, 1.5)
    label: str = ""
    per_seed: list = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        if len(self.points) == 0:
            raise ValueError("empty report")

    def _mask(self) -> np.ndarray:
        lo, hi = self.agg_range
        m = np.array([all(lo - 1e-9 <= p[a] <= hi + 1e-9 for a in self.axes) for p in self.points])
        if not m.any():
            raise ValueError("no grid point inside the aggregate range")
        return m

    @property
    def mean_over_range(self) -> float:
        return float(self.means[self._mask()].mean())

    @property
    def min_over_range(self) -> float:
        return float(self.means[self._mask()].min())

    @property
    def flatness(self) -> float:
        """Worst-to-average ratio in (0, 1]; for negative returns the ratio is inverted."""
        mean, lo = self.mean_over_range, self.min_over_range
        if mean == lo:
            return 1.0
        if mean > 0:
            return max(lo, 0.0) / mean
        return mean / lo

    def value_at(self, **point) -> float:
        for p, m in zip(self.points, self.means):
            if all(abs(p[k] - v) < 1e-9 for k, v in point.items()):
                return float(m)
        raise KeyError(f"no grid point {point}")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.axes, "mean", "std", "n_episodes"])
        for p, m, s in zip(self.points, self.means, self.stds):
            w.writerow([*(repr(p[a]) for a in self.axes), repr(float(m)), repr(float(s)), self.n_episodes])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None) -> str:
        d = {
            "family": self.family,
            "label": self.label,
            "axes": self.axes,
            "agg_range": list(self.agg_range),
            "n_episodes": self.n_episodes,
            "points": self.points,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "mean_over_range": self.mean_over_range,
            "min_over_range": self.min_over_range,
            "per_seed": self.per_seed,
        }
        text = json.dumps(d, sort_keys=True, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "RobustnessReport":
        d = json.loads(text)
        return cls(d["family"], d["axes"], d["points"], d["means"], d["stds"], d["n_episodes"], tuple(d["agg_range"]), d["label"], d.get("per_seed", []))


def report_filename(run_id: str, algorithm: str, family: str, ext: str = "sweep.csv") -> str:
    return f"{run_id}_{algorithm}_{family}.{ext}"


def _eval_point(policy, factory, spec: EnvSpec, env_seed: int, episodes: int, seed: int, deterministic: bool):
    env = factory(spec, env_seed)
    rets = []
    for e in range(episodes):
        (traj,) = rollout(env, policy, 1, seed + e, record_rewards=True, deterministic=deterministic)
        rets.append(traj.monitor_return)
    return float(np.mean(rets)), float(np.std(rets))


def sweep(
    policy,
    family: str,
    spec: SweepSpec,
    seed: int = 0,
    base: EnvSpec | None = None,
    env_factory=None,
    label: str = "",
    workers: int = 1,
) -> RobustnessReport:
    """Evaluate ``policy`` at every grid point.

    Every point reuses the same environment seed, so initial states match
    across points.  ``env_factory(EnvSpec, seed)`` overrides environment
    construction (evaluation stubs).  Points are independent, so
    ``workers > 1`` gives the same report as a serial run.
    """
    grid = spec.grid()
    if not grid:
        raise ValueError("empty sweep grid")
    base = base or EnvSpec(family)
    factory = env_factory or make_env
    env_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    jobs = []
    for point in grid:
        dyn = dict(base.dynamics.as_dict())
        dyn.update(point)
        jobs.append((policy, factory, EnvSpec(family, DynamicsParam.of(**dyn), base.horizon, base.gamma), env_seed, spec.episodes, seed, spec.deterministic))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_eval_point, *zip(*jobs)))
    else:
        out = [_eval_point(*job) for job in jobs]
    means, stds = zip(*out)
    return RobustnessReport(family, [a.name for a in spec.axes], grid, list(means), list(stds), spec.episodes, spec.agg_range, label)


def aggregate_seeds(reports: list[RobustnessReport], label: str = "") -> RobustnessReport:
    """Average per-point means over seed reports; std is across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.points != first.points:
            raise ValueError("seed reports cover different grids")
    M = np.stack([r.means for r in reports])
    per_seed = [{"mean_over_range": r.mean_over_range, "min_over_range": r.min_over_range} for r in reports]
    return RobustnessReport(first.family, first.axes, first.points, M.mean(axis=0), M.std(axis=0), first.n_episodes, first.agg_range, label or first.label, per_seed)


def format_cell(mean: float, lo: float) -> str:
    return f"{mean:.1f} / {lo:.1f}"


def compare(reports, columns=None):
    """Table of "mean / min" cells, one row per algorithm.

    ``reports`` maps a row name to a report or to {column: report}.  The
    best mean and the best min in each column get a ``*``; ties all get it.
    Returns (text, csv_text).
    """
    rows = dict(reports) if not isinstance(reports, dict) else reports
    table = {name: (r if isinstance(r, dict) else {"return": r}) for name, r in rows.items()}
    if not table:
        raise ValueError("nothing to compare")
    cols = columns or list(dict.fromkeys(c for r in table.values() for c in r))
    values = {(n, c): (round(r[c].mean_over_range, 1), round(r[c].min_over_range, 1)) for n, r in table.items() for c in cols if c in r}
    best = {}
    for c in cols:
        cells = [v for (n, cc), v in values.items() if cc == c]
        best[c] = (max(v[0] for v in cells), max(v[1] for v in cells)) if cells else (None, None)

    marked = {}
    for (n, c), (m, lo) in values.items():
        marked[(n, c)] = (m == best[c][0], lo == best[c][1])

    def cell(n, c):
        if (n, c) not in values:
            return "-"
        m, lo = values[(n, c)]
        bm, bl = marked[(n, c)]
        return f"{m:.1f}{'*' if bm else ''} / {lo:.1f}{'*' if bl else ''}"

    width = max(len(n) for n in table)
    cells = {(n, c): cell(n, c) for n in table for c in cols}
    colw = {c: max([len(c)] + [len(cells[(n, c)]) for n in table]) for c in cols}
    lines = [" | ".join([" " * width] + [c.ljust(colw[c]) for c in cols])]
    lines.append("-+-".join(["-" * width] + ["-" * colw[c] for c in cols]))
    for n in table:
        lines.append(" | ".join([n.ljust(width)] + [cells[(n, c)].ljust(colw[c]) for c in cols]))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "column", "mean", "min", "best_mean", "best_min"])
    for (n, c), (m, lo) in values.items():
        w.writerow([n, c, f"{m:.1f}", f"{lo:.1f}", int(marked[(n, c)][0]), int(marked[(n, c)][1])])
    return text, buf.getvalue()
