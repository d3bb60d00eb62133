"""``rimelab`` command line: experts, demos, imitation, sweeps, theory checks.

Every subcommand reads one YAML run config.  Artifacts land under the
config's output directory::

    experts/expert_<k>.ckpt   experts/report.json
    demos/demo_<k>.txt
    il/state.ckpt  il/metrics.jsonl  il/events.jsonl
    sweep/<run_id>_<algorithm>_<family>.sweep.{csv,json}
    theory/report.txt         compare.txt  compare.csv

Wall-clock data only ever goes to ``*.meta.json`` files, so every other
artifact is byte-identical across reruns of the same config and seed.

Seed splitting: component ``k`` of purpose ``p`` draws from
``SeedSequence(seed, spawn_key=(p, k, ...))``; see the ``SEED_*`` constants.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import experts as ex
from . import tabular as tb
from .envlab import FAMILY_PARAMS, DynamicsParam, EnvSpec, TabularPolicyAdapter, discounted_occupancy, make_env, rollout, windy_grid_mdp
from .imitate import IlConfig, TrainingAborted, TrainState, stream_int, train
from .neural import NumericalError
from .ppo import PpoConfig
from .robusteval import Axis, RobustnessReport, SweepSpec, compare, report_filename, sweep

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERICAL = 4

SEED_EXPERT = 30
SEED_DEMO_ENV = 31
SEED_DEMO_NOISE = 32
SEED_SWEEP = 33
SEED_THEORY = 34
SEED_EVAL = 35


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


# ------------------------------------------------------------------- config


def _strict(cls, d, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExpertSection:
    source: str = "pd"  # pd | ppo | value_iteration
    steps: int = 200_000
    eval_episodes: int = 10

    def __post_init__(self):
        if self.source not in ("pd", "ppo", "value_iteration"):
            raise ValueError(f"unknown expert source {self.source!r}")


@dataclass
class DemoSection:
    n_traj: int = 50
    sigma: float = 0.02
    state_only: bool = False

    def __post_init__(self):
        if self.n_traj < 1 or self.sigma < 0:
            raise ValueError("n_traj >= 1 and sigma >= 0 required")


@dataclass
class SweepSection:
    axes: list = field(default_factory=lambda: [["gravity", 0.5, 1.5, 0.05]])
    episodes: int = 10
    deterministic: bool = True
    agg_range: list = field(default_factory=lambda: [0.5, 1.5])
    checkpoint: str | None = None

    def spec(self) -> SweepSpec:
        return SweepSpec([Axis(*a) for a in self.axes], self.episodes, self.deterministic, tuple(self.agg_range))


@dataclass
class TheorySection:
    instances: int = 100
    mc_steps: int = 100_000


@dataclass
class CompareSection:
    reports: list = field(default_factory=list)


@dataclass
class RunConfig:
    family: str = "PointMass1D"
    zetas: list = field(default_factory=lambda: [{"gravity": 0.5}, {"gravity": 1.5}])
    nominal: dict = field(default_factory=dict)
    horizon: int | None = None
    gamma: float | None = None
    seed: int = 0
    run_id: str = "run"
    out: str = "runs"
    expert: ExpertSection = field(default_factory=ExpertSection)
    demos: DemoSection = field(default_factory=DemoSection)
    il: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    sweep: SweepSection = field(default_factory=SweepSection)
    theory: TheorySection = field(default_factory=TheorySection)
    compare: CompareSection = field(default_factory=CompareSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        d = dict(d)
        sections = {"expert": ExpertSection, "demos": DemoSection, "sweep": SweepSection, "theory": TheorySection, "compare": CompareSection}
        for name, sec in sections.items():
            if name in d:
                d[name] = _strict(sec, d[name], name)
        cfg = _strict(cls, d, "config")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.family not in FAMILY_PARAMS:
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.zetas:
            raise ConfigError("zetas must list at least one dynamics setting")
        try:
            for z in self.zetas:
                self.env_spec(z)
            self.env_spec(self.nominal)
            self.il_config()
            self.sweep.spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def env_spec(self, zeta: dict) -> EnvSpec:
        if not isinstance(zeta, dict):
            raise ConfigError(f"dynamics entry must be a mapping, got {zeta!r}")
        return EnvSpec(self.family, DynamicsParam.from_dict(zeta), self.horizon, self.gamma)

    def il_config(self) -> IlConfig:
        il = dict(self.il)
        if "ppo" in il:
            raise ConfigError("put PPO settings under the top-level ppo section")
        known = {f.name for f in fields(PpoConfig)}
        unknown = sorted(set(self.ppo) - known)
        if unknown:
            raise ConfigError(f"ppo: unknown keys {unknown}")
        il.setdefault("n_envs", len(self.zetas))
        il.setdefault("n_demo_traj", self.demos.n_traj)
        il.setdefault("state_only", self.demos.state_only)
        try:
            return IlConfig.from_dict({**il, "ppo": PpoConfig(**self.ppo)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"il: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        return cls.from_dict(d)


# ---------------------------------------------------------------- helpers


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_meta(path: Path, started: float, **extra) -> None:
    meta = {"started_unix": started, "finished_unix": time.time(), "elapsed_s": time.time() - started, **extra}
    path.write_text(json.dumps(meta, sort_keys=True, indent=1))


def evaluate(policy, spec: EnvSpec, episodes: int, seed: int) -> float:
    env = make_env(spec, seed)
    rets = [rollout(env, policy, 1, seed + e, record_rewards=True, deterministic=True)[0].monitor_return for e in range(episodes)]
    return float(np.mean(rets))


def _load_experts(cfg: RunConfig, out: Path):
    paths = [out / "experts" / f"expert_{k}.ckpt" for k in range(len(cfg.zetas))]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ArtifactError(f"missing expert checkpoints {missing}; run train-expert first")
    try:
        return [ex.load_expert(p) for p in paths]
    except (ValueError, KeyError, OSError) as exc:
        raise ArtifactError(f"invalid expert checkpoint: {exc}") from exc


def _load_demos(cfg: RunConfig, out: Path):
    paths = [out / "demos" / f"demo_{k}.txt" for k in range(len(cfg.zetas))]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ArtifactError(f"missing demo files {missing}; run gen-demos first")
    try:
        return [ex.read_demos(p) for p in paths]
    except (ValueError, KeyError, OSError) as exc:
        raise ArtifactError(f"invalid demo file: {exc}") from exc


# -------------------------------------------------------------- subcommands


def cmd_train_expert(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    started = time.time()
    (out / "experts").mkdir(exist_ok=True)
    specs = [cfg.env_spec(z) for z in cfg.zetas]
    made = []
    for k, spec in enumerate(specs):
        if cfg.expert.source == "pd":
            if cfg.family != "PointMass1D":
                raise ConfigError("PD experts exist only for PointMass1D")
            expert = ex.pd_expert(spec.dynamics)
        elif cfg.expert.source == "value_iteration":
            if cfg.family != "WindyGrid":
                raise ConfigError("value-iteration experts exist only for WindyGrid")
            expert = ex.value_iteration(windy_grid_mdp(spec))
        else:
            expert = ex.train_expert_ppo(spec, cfg.expert.steps, stream_int(cfg.seed, SEED_EXPERT, k))
        ex.save_expert(expert, out / "experts" / f"expert_{k}.ckpt")
        made.append(expert)

    seed = stream_int(cfg.seed, SEED_EVAL) % 2**31
    table = [[evaluate(e, s, cfg.expert.eval_episodes, seed) for e in made] for s in specs]
    report = {"zetas": cfg.zetas, "source": cfg.expert.source, "returns": [table[k][k] for k in range(len(specs))], "cross_returns": table}
    spec_ok = all(table[a][a] > table[a][b] for a in range(len(specs)) for b in range(len(specs)) if a != b)
    report["specialized"] = spec_ok
    (out / "experts" / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    _write_meta(out / "experts" / "run.meta.json", started)
    for k, z in enumerate(cfg.zetas):
        print(f"expert {k} {DynamicsParam.from_dict(z).label()}: return {table[k][k]:.2f}")
    if len(specs) > 1:
        print(f"specialization (own expert beats others on every env): {'yes' if spec_ok else 'NO'}")
    return EXIT_OK


def cmd_gen_demos(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    started = time.time()
    experts = _load_experts(cfg, out)
    (out / "demos").mkdir(exist_ok=True)
    for k, (z, expert) in enumerate(zip(cfg.zetas, experts)):
        env = make_env(cfg.env_spec(z), stream_int(cfg.seed, SEED_DEMO_ENV, k))
        noise = stream_int(cfg.seed, SEED_DEMO_NOISE, k)
        demo = ex.record_demos(expert, env, cfg.demos.n_traj, cfg.demos.sigma, noise, cfg.demos.state_only)
        ex.write_demos(demo, out / "demos" / f"demo_{k}.txt")
        print(f"demo {k} {demo.dynamics.label()}: {len(demo)} trajectories, {demo.n_transitions} transitions")
    _write_meta(out / "demos" / "run.meta.json", started)
    return EXIT_OK


def cmd_train_il(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    started = time.time()
    il = cfg.il_config()
    demos = _load_demos(cfg, out)
    if il.algorithm == "SNEMPE-max":
        specs = [cfg.env_spec(cfg.nominal)]
    else:
        specs = [cfg.env_spec(z) for z in cfg.zetas]
    d = out / "il"
    d.mkdir(exist_ok=True)
    trace_path = d / "metrics.jsonl"
    trace_path.unlink(missing_ok=True)
    try:
        res = train(il, specs, demos, cfg.seed, out_dir=d, trace_path=None)
    except TrainingAborted as exc:
        print(f"error: {exc}; checkpoint at {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        raise ArtifactError(f"demonstrations do not fit this run: {exc}") from exc
    trace_path.write_text("".join(line + "\n" for line in res.trace_lines()))
    (d / "events.jsonl").write_text("".join(json.dumps(list(e)) + "\n" for e in res.events))
    res.state.save(d / "state.ckpt")
    _write_meta(d / "run.meta.json", started, trace_sha256=res.trace_hash())
    print(f"{il.algorithm}: {len(res.trace)} records, {res.state.steps} env steps, trace sha256 {res.trace_hash()}")
    return EXIT_OK


def _sweep_policy(cfg: RunConfig, out: Path):
    path = Path(cfg.sweep.checkpoint) if cfg.sweep.checkpoint else out / "il" / "state.ckpt"
    if not path.exists():
        raise ArtifactError(f"missing checkpoint {path}; run train-il first")
    try:
        return TrainState.load(path).policy, cfg.il_config().algorithm
    except ValueError:
        pass
    try:
        return ex.load_expert(path), "expert"
    except (ValueError, KeyError) as exc:
        raise ArtifactError(f"{path}: not a training or expert checkpoint ({exc})") from exc


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    started = time.time()
    policy, algorithm = _sweep_policy(cfg, out)
    spec = cfg.sweep.spec()
    base = cfg.env_spec(cfg.nominal)
    report = sweep(policy, cfg.family, spec, stream_int(cfg.seed, SEED_SWEEP) % 2**31, base=base, label=algorithm, workers=workers)
    d = out / "sweep"
    d.mkdir(exist_ok=True)
    report.to_csv(d / report_filename(cfg.run_id, algorithm, cfg.family))
    report.to_json(d / report_filename(cfg.run_id, algorithm, cfg.family, "sweep.json"))
    _write_meta(d / f"{cfg.run_id}_{algorithm}_{cfg.family}.run.meta.json", started)
    print(f"{algorithm} on {cfg.family}: {len(report.points)} points, mean/min over range {report.mean_over_range:.1f} / {report.min_over_range:.1f}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    paths = [Path(p) for p in cfg.compare.reports] or sorted((out / "sweep").glob("*.sweep.json"))
    if not paths:
        raise ArtifactError("no sweep reports to compare; run sweep first")
    loaded = []
    for p in paths:
        if not p.exists():
            raise ArtifactError(f"missing sweep report {p}")
        try:
            loaded.append((p, RobustnessReport.from_json(p.read_text())))
        except (ValueError, KeyError) as exc:
            raise ArtifactError(f"{p}: invalid sweep report ({exc})") from exc
    labels = [r.label for _, r in loaded]
    reports = {}
    for p, r in loaded:
        # runs sharing an algorithm label are told apart by file name
        key = r.label if r.label and labels.count(r.label) == 1 else p.name.removesuffix(".sweep.json")
        reports.setdefault(key, {})[r.family] = r
    text, csv_text = compare(reports)
    (out / "compare.txt").write_text(text)
    (out / "compare.csv").write_text(csv_text)
    print(text, end="")
    return EXIT_OK


# ----------------------------------------------------------- theory checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def theory_checks(seed: int = 0, instances: int = 100, mc_steps: int = 100_000) -> list[CheckResult]:
    """Exact-oracle checks of the tabular occupancy and divergence identities."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SEED_THEORY,)))
    results = []

    worst = 0.0
    worst_res = 0.0
    for k in range(instances):
        gamma = (0.5, 0.9, 0.99)[k % 3]
        S, A = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        mdp = tb.random_mdp(S, A, gamma, rng)
        pol = tb.random_policy(S, A, rng)
        occ = tb.solve_occupancy(mdp, pol)
        worst = max(worst, abs(occ.rho.sum() - 1.0 / (1.0 - gamma)))
        worst_res = max(worst_res, float(np.abs(tb.flow_residual(mdp, pol, occ)).max()))
    results.append(CheckResult("occupancy mass equals 1/(1-gamma)", worst <= 1e-8, f"max error {worst:.2e}"))
    results.append(CheckResult("Bellman flow residual", worst_res <= 1e-10, f"max residual {worst_res:.2e}"))

    spec = EnvSpec("WindyGrid", DynamicsParam.of(wind=1.0))
    mdp = windy_grid_mdp(spec)
    pi = 0.5 * ex.value_iteration(mdp).pi + 0.5 / 4
    occ = tb.solve_occupancy(mdp, tb.TabularPolicy(pi))
    env = make_env(spec, int(rng.integers(2**31)))
    trajs = rollout(env, TabularPolicyAdapter(pi), mc_steps, int(rng.integers(2**31)))
    mc = discounted_occupancy(trajs, spec.gamma, 25, 4)
    l1 = float(np.abs(mc - occ.normalized()).sum())
    results.append(CheckResult("Monte-Carlo occupancy matches the solve", l1 <= 0.05, f"L1 {l1:.4f} at {sum(map(len, trajs))} steps"))

    mdps = [windy_grid_mdp(EnvSpec("WindyGrid", DynamicsParam.of(wind=w))) for w in (0.5, 1.5)]
    rep = tb.flow_rank_report(mdps, tb.TabularPolicy.uniform(25, 4))
    results.append(
        CheckResult(
            "mixture flow system is underdetermined",
            rep.rank <= 100 and rep.n_unknowns == 200,
            f"rank {rep.rank} with {rep.n_unknowns} unknowns",
        )
    )

    worst = 0.0
    for _ in range(instances):
        S, A, N = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        gamma = float(rng.choice([0.5, 0.9, 0.99]))
        mu0 = rng.dirichlet(np.ones(S))
        ms = [tb.random_mdp(S, A, gamma, rng, mu0) for _ in range(N)]
        pol = tb.random_policy(S, A, rng)
        exps = [tb.random_policy(S, A, rng) for _ in range(N)]
        lam = tb.random_state_weights(N, S, rng)
        worst = max(worst, abs(tb.policy_js_objective(ms, pol, exps, lam) - tb.theorem51_rhs(ms, pol, exps, lam)))
    results.append(CheckResult("weighted JS objective equals its discriminator form", worst <= 1e-8, f"max |LHS-RHS| {worst:.2e}"))

    ok = True
    for k in range(instances):
        S, A = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        rp = tb.OccupancyTable(rng.dirichlet(np.ones(S * A)).reshape(S, A))
        re = tb.OccupancyTable(rng.dirichlet(np.ones(S * A)).reshape(S, A))
        lam = rng.uniform(0.1, 1.0, S)
        if k % 2 == 0:
            lam[int(rng.integers(S))] *= 1e6
        ok &= tb.theorem52_check(rp, re, lam)
    results.append(CheckResult("state weights leave the optimal discriminator unchanged", bool(ok), f"{instances} instances"))

    worst = 0.0
    for _ in range(instances):
        S, A = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        rp = tb.OccupancyTable(rng.dirichlet(np.ones(S * A)).reshape(S, A))
        re = tb.OccupancyTable(rng.dirichlet(np.ones(S * A)).reshape(S, A))
        a, b = tb.gail_js_identity(rp, re)
        worst = max(worst, abs(a - b))
    results.append(CheckResult("JS divergence via the optimal discriminator", worst <= 1e-10, f"max gap {worst:.2e}"))
    return results


def cmd_verify_theory(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    started = time.time()
    results = theory_checks(cfg.seed, cfg.theory.instances, cfg.theory.mc_steps)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}" for r in results]
    (out / "theory").mkdir(exist_ok=True)
    (out / "theory" / "report.txt").write_text("\n".join(lines) + "\n")
    _write_meta(out / "theory" / "run.meta.json", started)
    print("\n".join(lines))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    "train-expert": cmd_train_expert,
    "gen-demos": cmd_gen_demos,
    "train-il": cmd_train_il,
    "sweep": cmd_sweep,
    "verify-theory": cmd_verify_theory,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rimelab", description="Robust imitation from multiple perturbed environments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker cap; 1 is the deterministic mode")
        sp.add_argument("--out", help="output directory, overrides the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be a non-negative integer")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](cfg, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
