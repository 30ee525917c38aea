"""Experiment configuration, presets, seeded runs and CSV output.

A run is fully determined by its resolved configuration: every seed gets its
own counter-based generator keyed by ``(master_seed, seed)``, so seed sets can
be split or reordered without changing any individual trajectory. Metrics
come from the exact oracles evaluated at checkpointed parameters, except in
the cart-pole presets where the logged quantity is the episode length.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as alg
from .approximator import LinearCdfModel, LinearValueModel, ScalarMlpModel, SoftmaxMlpModel, encode_cartpole
from .mdp_env import (
    CartPoleParams,
    Transition,
    build_grid_world,
    build_random_mdp,
    cartpole_failed,
    cartpole_reset,
    cartpole_step,
    perturb_policy,
    sample_iid_batch,
    sample_stream,
    stationary_distribution,
    uniform_policy,
    value_iteration,
)
from .objectives import DmspbeOracle, mspbe
from .saddle_linear import (
    SaddleState,
    average_iterates,
    build_saddle_matrices,
    calibrate,
    default_radii,
    err_certificate,
    sgda_step,
    step_size,
)
from .value_distribution import SupportGrid

log = logging.getLogger(__name__)

DISTRIBUTIONAL = ("dgtd2", "dtdc")
BASELINES = ("gtd2", "tdc", "nonlinear_gtd2", "nonlinear_tdc")
ENVIRONMENTS = ("gridworld", "cartpole-pe", "cartpole-control", "saddle")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` maps dotted field names to messages."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    name: str
    environment: dict
    algorithms: list[str]
    model: dict
    grid: dict
    schedules: dict
    seeds: list[int]
    total_steps: int = 0
    episodes: int = 0
    eval_every: int = 1000
    radius: float | None = alg.DEFAULT_RADIUS
    eta: float = 1.0
    epsilon: dict = field(default_factory=lambda: {"start": 0.1, "end": 0.02, "horizon": 0})
    master_seed: int = 0
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = {}
        kind = self.environment.get("kind")
        if kind not in ENVIRONMENTS:
            errors["environment.kind"] = f"must be one of {ENVIRONMENTS}, got {kind!r}"
        m = self.grid.get("m")
        if not isinstance(m, int) or m < 2:
            errors["grid.m"] = "must be an integer >= 2"
        if not self.grid.get("v_max", 0) > self.grid.get("v_min", 0):
            errors["grid.v_max"] = "must exceed grid.v_min"
        if not self.seeds:
            errors["seeds"] = "must be nonempty"
        elif len(set(self.seeds)) != len(self.seeds) or any(int(s) != s or s < 0 for s in self.seeds):
            errors["seeds"] = "must be distinct nonnegative integers"
        if not isinstance(self.eval_every, int) or self.eval_every < 1:
            errors["eval_every"] = "must be an integer >= 1"
        if self.total_steps < 0:
            errors["total_steps"] = "must be >= 0"
        if self.episodes < 0:
            errors["episodes"] = "must be >= 0"
        if not 0 <= self.eta <= 1:
            errors["eta"] = "must lie in [0, 1]"
        if self.radius is not None and not self.radius > 0:
            errors["radius"] = "must be positive or null"
        if not self.algorithms:
            errors["algorithms"] = "must be nonempty"
        known = DISTRIBUTIONAL + BASELINES + ("dgreedygq", "sgda")
        for a in self.algorithms:
            if a not in known:
                errors["algorithms"] = f"unknown algorithm {a!r}; expected one of {known}"
        if kind == "gridworld":
            bad = [a for a in self.algorithms if a not in ("dgtd2", "dtdc", "gtd2", "tdc")]
            if bad:
                errors["algorithms"] = f"grid world runs dgtd2, dtdc, gtd2 or tdc, not {bad}"
        if kind == "cartpole-control" and self.algorithms != ["dgreedygq"]:
            errors["algorithms"] = "cartpole-control runs dgreedygq only"
        if self.workers < 1:
            errors["workers"] = "must be >= 1"
        try:
            self.step_schedules()
        except (ValueError, TypeError, KeyError) as exc:
            errors["schedules"] = str(exc)
        if errors:
            raise ConfigError(errors)

    def step_schedules(self) -> alg.Schedules:
        s = self.schedules
        return alg.Schedules(alg.StepSchedule(**s["alpha"]), alg.StepSchedule(**s["beta"]),
                             strict=s.get("strict", True))

    def support_grid(self) -> SupportGrid:
        return SupportGrid(float(self.grid["v_min"]), float(self.grid["v_max"]), int(self.grid["m"]))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        if "algorithm" in obj:
            obj.setdefault("algorithms", [obj.pop("algorithm")])
        names = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError({k: "unknown field" for k in unknown})
        missing = sorted(k for k in ("name", "environment", "algorithms", "model", "grid", "schedules", "seeds")
                         if k not in obj)
        if missing:
            raise ConfigError({k: "required" for k in missing})
        obj["seeds"] = [int(s) for s in obj["seeds"]]
        return cls(**obj)


def _schedules(a0, b0, t0=1.0, p_alpha=1.0, p_beta=2.0 / 3.0, strict=True):
    return {"alpha": {"a0": a0, "p": p_alpha, "t0": t0}, "beta": {"a0": b0, "p": p_beta, "t0": t0},
            "strict": strict}


PRESETS: dict[str, dict] = {
    # 4x4 stand-in for the unspecified grid world: reward 1 on entering the
    # goal, the goal restarts at the start cell so the chain stays recurrent.
    "gridworld-offpolicy": {
        "name": "gridworld-offpolicy",
        "environment": {"kind": "gridworld", "width": 4, "height": 4, "goal_mode": "restart",
                        "gamma": 0.9, "perturbation": 0.05, "stream": "trajectory"},
        "algorithms": ["dgtd2", "dtdc"],
        "model": {"kind": "one_hot"},
        "grid": {"v_min": 0.0, "v_max": 10.0, "m": 50},
        "schedules": _schedules(1.0, 1.0, t0=1000.0),
        "seeds": [0, 1, 2, 3, 4],
        "total_steps": 200_000,
        "eval_every": 1000,
    },
    "gridworld-offpolicy-baseline": {
        "name": "gridworld-offpolicy-baseline",
        "environment": {"kind": "gridworld", "width": 4, "height": 4, "goal_mode": "restart",
                        "gamma": 0.9, "perturbation": 0.05, "stream": "trajectory"},
        "algorithms": ["gtd2", "tdc"],
        "model": {"kind": "one_hot"},
        "grid": {"v_min": 0.0, "v_max": 10.0, "m": 50},
        "schedules": _schedules(1.0, 1.0, t0=1000.0),
        "seeds": [0, 1, 2, 3, 4],
        "total_steps": 200_000,
        "eval_every": 1000,
    },
    "cartpole-pe": {
        "name": "cartpole-pe",
        "environment": {"kind": "cartpole-pe", "version": "v0", "gamma": 0.9,
                        "episodes_per_phase": 20},
        "algorithms": ["dgtd2"],
        "model": {"kind": "softmax_mlp", "hidden": 50, "activation": "tanh", "baseline_hidden": 30},
        "grid": {"v_min": 0.0, "v_max": 10.0, "m": 30},
        "schedules": _schedules(0.05, 0.1, t0=10_000.0),
        "epsilon": {"start": 0.1, "end": 0.02, "horizon": 20},
        "seeds": [0, 1, 2, 3, 4],
        "episodes": 500,
        "eval_every": 20,
    },
    "cartpole-control": {
        "name": "cartpole-control",
        "environment": {"kind": "cartpole-control", "version": "v0", "gamma": 0.9,
                        "replay_size": 10_000, "batch": 4, "warmup": 200},
        "algorithms": ["dgreedygq"],
        "model": {"kind": "softmax_mlp", "hidden": 50, "activation": "tanh"},
        "grid": {"v_min": 0.0, "v_max": 10.0, "m": 30},
        "schedules": {"alpha": {"a0": 0.02, "family": "constant"}, "beta": {"a0": 0.05, "family": "constant"},
                      "strict": False},
        "epsilon": {"start": 0.1, "end": 0.02, "horizon": 300},
        "eta": 1.0,
        "radius": None,
        "seeds": [0, 1, 2, 3, 4],
        "episodes": 1000,
        "eval_every": 1,
    },
    "saddle-linear": {
        "name": "saddle-linear",
        "environment": {"kind": "saddle", "mdp_seed": 7, "feature_seed": 11, "n_states": 3, "n_actions": 2,
                        "gamma": 0.9, "d": 4, "radius": 1.0, "calibration_samples": 20_000,
                        "horizons": [2500, 5000, 10_000, 20_000, 40_000], "delta_conf": 0.05},
        "algorithms": ["sgda"],
        "model": {"kind": "random_linear"},
        "grid": {"v_min": 0.0, "v_max": 10.0, "m": 5},
        "schedules": _schedules(1.0, 1.0, strict=False),
        "radius": None,
        "seeds": list(range(10)),
        "eval_every": 1,
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return ExperimentConfig.from_dict(copy.deepcopy(PRESETS[name]))


def list_presets() -> list[str]:
    return sorted(PRESETS)


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` assignments; values are parsed as JSON, falling back to strings."""
    obj = copy.deepcopy(obj)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError({item: "override must look like key=value"})
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = obj
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError({key: f"{p} is not a mapping"})
        node[parts[-1]] = value
    return obj


def resolve_config(preset_name: str | None = None, config_path: str | Path | None = None,
                   overrides: list[str] | None = None, seeds: list[int] | None = None) -> ExperimentConfig:
    obj: dict = {}
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError({"preset": f"unknown preset {preset_name!r}; available: {list_presets()}"})
        obj = copy.deepcopy(PRESETS[preset_name])
    if config_path is not None:
        obj.update(json.loads(Path(config_path).read_text()))
    if overrides:
        obj = apply_overrides(obj, overrides)
    if seeds is not None:
        obj["seeds"] = seeds
    return ExperimentConfig.from_dict(obj)


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    """Rows ``(step, metric, seed, value)`` plus per-eval checkpoints keyed ``(seed, metric, step)``."""

    rows: list[tuple[int, str, int, float]] = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    tables: dict[str, list[dict]] = field(default_factory=dict)

    def add(self, step: int, metric: str, seed: int, value: float) -> None:
        self.rows.append((int(step), metric, int(seed), float(value)))

    def series(self, metric: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
        sel = [(s, v) for s, m, sd, v in self.rows if m == metric and sd == seed]
        steps, values = zip(*sel) if sel else ((), ())
        return np.array(steps, dtype=int), np.array(values, dtype=float)

    def metrics(self) -> list[str]:
        return sorted({m for _, m, _, _ in self.rows})

    def seeds(self) -> list[int]:
        return sorted({s for _, _, s, _ in self.rows})

    def summary(self) -> list[tuple[int, str, float, float]]:
        """Mean and population standard deviation across seeds for each ``(step, metric)``."""
        groups: dict[tuple[int, str], list[float]] = {}
        for step, metric, _, value in self.rows:
            groups.setdefault((step, metric), []).append(value)
        out = []
        for (step, metric) in sorted(groups, key=lambda k: (k[1], k[0])):
            v = np.array(groups[(step, metric)])
            out.append((step, metric, float(v.mean()), float(v.std())))
        return out

    def merge(self, other: "RunLog") -> None:
        self.rows.extend(other.rows)
        self.checkpoints.update(other.checkpoints)
        for k, v in other.tables.items():
            self.tables.setdefault(k, []).extend(v)

    def sort(self) -> None:
        self.rows.sort(key=lambda r: (r[2], r[1], r[0]))


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_csv(log: RunLog, path: str | Path) -> Path:
    """Write ``step,metric,seed,value`` rows with round-trip exact floats."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "metric", "seed", "value"])
        for step, metric, seed, value in log.rows:
            w.writerow([step, metric, seed, _fmt(value)])
    return path


def emit_summary_csv(log: RunLog, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "metric", "mean", "std"])
        for step, metric, mean, std in log.summary():
            w.writerow([step, metric, _fmt(mean), _fmt(std)])
    return path


def read_csv(path: str | Path) -> RunLog:
    out = RunLog()
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.add(int(row["step"]), row["metric"], int(row["seed"]), float(row["value"]))
    return out


def write_outputs(log: RunLog, config: ExperimentConfig, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"runlog": emit_csv(log, out_dir / "runlog.csv"),
             "summary": emit_summary_csv(log, out_dir / "summary.csv")}
    cfg = out_dir / "config-resolved.json"
    cfg.write_text(config.to_json() + "\n", encoding="utf-8")
    paths["config"] = cfg
    for name, rows in log.tables.items():
        if not rows:
            continue
        p = out_dir / f"{name}.csv"
        with p.open("w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()})
        paths[name] = p
    return paths


# ---------------------------------------------------------------------------
# running


def seed_rng(master_seed: int, seed: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(master_seed, seed)``."""
    return np.random.Generator(np.random.Philox(key=[int(master_seed), int(seed)]))


def run(config: ExperimentConfig) -> RunLog:
    """Execute every seed and merge the logs in ``(seed, metric, step)`` order."""
    config.validate()
    seeds = list(config.seeds)
    out = RunLog()
    if config.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for part in pool.map(run_seed, [config] * len(seeds), seeds):
                out.merge(part)
    else:
        for seed in seeds:
            out.merge(run_seed(config, seed))
    out.sort()
    kind = config.environment["kind"]
    if kind == "saddle":
        out.tables["saddle"] = _saddle_table(out)
    return out


def run_seed(config: ExperimentConfig, seed: int) -> RunLog:
    kind = config.environment["kind"]
    t0 = time.perf_counter()
    if kind == "gridworld":
        part = _run_gridworld(config, seed)
    elif kind == "cartpole-pe":
        part = _run_cartpole_pe(config, seed)
    elif kind == "cartpole-control":
        part = _run_cartpole_control(config, seed)
    else:
        part = _run_saddle(config, seed)
    log.info("%s seed %d finished in %.1fs", config.name, seed, time.perf_counter() - t0)
    return part


# -- grid world


@dataclass
class GridWorldProblem:
    mdp: object
    target: np.ndarray
    behavior: np.ndarray
    weights: np.ndarray
    grid: SupportGrid


def gridworld_problem(config: ExperimentConfig) -> GridWorldProblem:
    env = config.environment
    mdp = build_grid_world(env.get("width", 4), env.get("height", 4), goal=env.get("goal"),
                           step_reward=env.get("step_reward", 0.0), goal_reward=env.get("goal_reward", 1.0),
                           gamma=env.get("gamma", 0.9), goal_mode=env.get("goal_mode", "restart"))
    _, target = value_iteration(mdp)
    behavior = perturb_policy(target, env.get("perturbation", 0.05))
    return GridWorldProblem(mdp, target, behavior, stationary_distribution(mdp, behavior), config.support_grid())


def uniform_cdf_init(model: LinearCdfModel) -> np.ndarray:
    """Parameters whose CDF is closest (least squares) to the uniform CDF at every input."""
    m = model.m
    row = np.arange(1, m + 1) / m
    if model.is_one_hot:
        theta = np.zeros(model.n_params)
        theta[model._cols] = row
        return theta
    Phi = model.features.reshape(-1, model.n_params)
    return np.linalg.lstsq(Phi, np.tile(row, model.n_inputs), rcond=None)[0]


def gridworld_models(problem: GridWorldProblem):
    n = problem.mdp.n_states
    return LinearCdfModel.one_hot(n, problem.grid.m), LinearValueModel(np.eye(n))


def _run_gridworld(config: ExperimentConfig, seed: int) -> RunLog:
    prob = gridworld_problem(config)
    mdp, grid = prob.mdp, prob.grid
    dist_model, value_model = gridworld_models(prob)
    schedules = config.step_schedules()
    target = alg.DistributionalTarget(grid, mdp.gamma)
    oracle = DmspbeOracle(dist_model, mdp, prob.target, grid, state_weights=prob.weights)
    out = RunLog()
    for name in config.algorithms:
        rng = seed_rng(config.master_seed, seed)  # same stream for every algorithm of a seed
        stream = sample_stream(mdp, prob.behavior, config.environment.get("stream", "trajectory"),
                               seed=rng, target=prob.target)
        if name in DISTRIBUTIONAL:
            metric = f"{name}.dmspbe"
            state = alg.LearnerState.init(uniform_cdf_init(dist_model), config.radius)

            def evaluate(theta):
                return oracle.j(theta)
            step_fn = {"dgtd2": alg.dgtd2_step, "dtdc": alg.dtdc_step}[name]

            def step(st, tr):
                return step_fn(st, tr, dist_model, schedules, target)
        else:
            metric = f"{name}.mspbe"
            state = alg.LearnerState.init(np.zeros(value_model.n_params), config.radius)

            def evaluate(theta):
                return mspbe(value_model.features, theta, mdp, prob.target, prob.weights)
            step_fn = {"gtd2": alg.gtd2_step, "tdc": alg.tdc_step}[name]

            def step(st, tr):
                return step_fn(st, tr, value_model, schedules, mdp.gamma)
        for t in range(config.total_steps + 1):
            if t % config.eval_every == 0 or t == config.total_steps:
                out.add(t, metric, seed, evaluate(state.theta))
                out.checkpoints[(seed, metric, t)] = state.theta.copy()
            if t < config.total_steps:
                state = step(state, next(stream))
    return out


# -- cart-pole


def _cartpole_params(env: dict) -> CartPoleParams:
    return CartPoleParams.v1() if env.get("version", "v0") == "v1" else CartPoleParams.v0()


def _cartpole_model(config: ExperimentConfig, rng: np.random.Generator, algorithm: str):
    mcfg = config.model
    if algorithm in ("nonlinear_gtd2", "nonlinear_tdc"):
        model = ScalarMlpModel(6, mcfg.get("baseline_hidden", 30), mcfg.get("activation", "tanh"))
    else:
        model = SoftmaxMlpModel(6, mcfg.get("hidden", 50), config.grid["m"], mcfg.get("activation", "tanh"))
    return model, model.init_params(rng)


def _q_means(model, theta, obs, grid: SupportGrid) -> np.ndarray:
    if isinstance(model, ScalarMlpModel):
        return np.array([model.value(theta, encode_cartpole(obs, a)) for a in (0, 1)])
    return alg.action_means(model, theta, obs, grid, 2, encode_cartpole)


def _act(model, theta, obs, epsilon, rng, grid) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(2))
    return int(np.argmax(_q_means(model, theta, obs, grid)))


def _run_cartpole_pe(config: ExperimentConfig, seed: int) -> RunLog:
    """Policy evaluation phases of ``episodes_per_phase`` episodes under a frozen epsilon-greedy policy.

    Each phase evaluates the current policy with the chosen learner on
    on-policy ``(s, a, r, s', a')`` transitions; the next phase acts
    epsilon-greedily on the updated estimate.
    """
    env = config.environment
    params = _cartpole_params(env)
    gamma = env.get("gamma", 0.9)
    per_phase = env.get("episodes_per_phase", 20)
    grid = config.support_grid()
    schedules = config.step_schedules()
    decay = alg.EpsilonDecay(**config.epsilon)
    out = RunLog()
    for name in config.algorithms:
        rng = seed_rng(config.master_seed, seed)
        model, theta0 = _cartpole_model(config, rng, name)
        state = alg.LearnerState.init(theta0, config.radius)
        target = alg.DistributionalTarget(grid, gamma)
        scalar = isinstance(model, ScalarMlpModel)
        step_fn = {"dgtd2": alg.dgtd2_step, "dtdc": alg.dtdc_step,
                   "nonlinear_gtd2": alg.nonlinear_gtd2_step, "nonlinear_tdc": alg.nonlinear_tdc_step,
                   "gtd2": alg.nonlinear_gtd2_step, "tdc": alg.nonlinear_tdc_step}[name]
        policy_theta = state.theta.copy()
        for episode in range(config.episodes):
            phase = episode // per_phase
            if episode % per_phase == 0:
                policy_theta = state.theta.copy()
            eps = decay(phase)
            s = cartpole_reset(rng)
            a = _act(model, policy_theta, s.as_array(), eps, rng, grid)
            length = 0
            while True:
                s2, r, done = cartpole_step(s, a, params)
                length += 1
                # only a fall is terminal; hitting the step cap still bootstraps
                failed = cartpole_failed(s2, params)
                a2 = _act(model, policy_theta, s2.as_array(), eps, rng, grid)
                tr = Transition(encode_cartpole(s.as_array(), a), a, r, encode_cartpole(s2.as_array(), a2),
                                a2, failed)
                if scalar:
                    state = step_fn(state, tr, model, schedules, gamma)
                else:
                    state = step_fn(state, tr, model, schedules, target)
                if done:
                    break
                s, a = s2, a2
            out.add(episode, f"{name}.episode_length", seed, length)
            if (episode + 1) % config.eval_every == 0:
                out.checkpoints[(seed, f"{name}.episode_length", episode)] = state.theta.copy()
    return out


def _run_cartpole_control(config: ExperimentConfig, seed: int) -> RunLog:
    """Distributional Greedy-GQ with a ring-buffer replay of raw transitions.

    With ``environment.target_length`` set, a seed stops early once the mean
    length of its last ``target_window`` (default 20) episodes reaches it.
    """
    env = config.environment
    params = _cartpole_params(env)
    grid = config.support_grid()
    schedules = config.step_schedules()
    decay = alg.EpsilonDecay(**config.epsilon)
    target = alg.DistributionalTarget(grid, env.get("gamma", 0.9))
    batch, warmup = env.get("batch", 4), env.get("warmup", 200)
    rng = seed_rng(config.master_seed, seed)
    model, theta0 = _cartpole_model(config, rng, "dgreedygq")
    state = alg.LearnerState.init(theta0, config.radius)
    replay: deque[Transition] = deque(maxlen=env.get("replay_size", 10_000))
    out = RunLog()
    metric = "dgreedygq.episode_length"
    stop_at, window = env.get("target_length"), env.get("target_window", 20)
    lengths: deque[int] = deque(maxlen=window)
    for episode in range(config.episodes):
        eps = decay(episode)
        s = cartpole_reset(rng)
        length = 0
        while True:
            obs = s.as_array()
            a = _act(model, state.theta, obs, eps, rng, grid)
            s2, r, done = cartpole_step(s, a, params)
            length += 1
            replay.append(Transition(obs, a, r, s2.as_array(), None, cartpole_failed(s2, params)))
            if len(replay) >= warmup:
                for i in rng.integers(len(replay), size=batch):
                    state = alg.dgreedygq_step(state, replay[i], model, schedules, target, eta=config.eta,
                                               n_actions=2, encode=encode_cartpole,
                                               project=config.radius is not None)
            if done:
                break
            s = s2
        out.add(episode, metric, seed, length)
        if (episode + 1) % config.eval_every == 0 and (episode + 1) % 50 == 0:
            out.checkpoints[(seed, metric, episode)] = state.theta.copy()
        lengths.append(length)
        if stop_at is not None and len(lengths) == window and np.mean(lengths) >= stop_at:
            break
    return out


# -- saddle


@dataclass
class SaddleProblem:
    mdp: object
    policy: np.ndarray
    weights: np.ndarray
    model: LinearCdfModel
    grid: SupportGrid
    matrices: object
    radii: tuple[float, float]


def saddle_problem(config: ExperimentConfig) -> SaddleProblem:
    env = config.environment
    grid = config.support_grid()
    mdp = build_random_mdp(env.get("n_states", 3), env.get("n_actions", 2), env.get("mdp_seed", 7),
                           env.get("gamma", 0.9))
    policy = uniform_policy(mdp)
    weights = stationary_distribution(mdp, policy)
    feats = np.random.default_rng(env.get("feature_seed", 11)).normal(size=(mdp.n_states, grid.m, env.get("d", 4)))
    model = LinearCdfModel(feats / np.sqrt(grid.m))
    matrices = build_saddle_matrices(model, mdp, policy, grid, weights)
    radius = env.get("radius")
    radii = (float(radius), float(radius)) if radius else default_radii(matrices)
    return SaddleProblem(mdp, policy, weights, model, grid, matrices, radii)


def run_saddle_once(prob: SaddleProblem, n: int, alpha: float, rng: np.random.Generator) -> SaddleState:
    mdp = prob.mdp
    target = alg.DistributionalTarget(prob.grid, mdp.gamma)
    d = prob.model.n_params
    start = rng.normal(size=d)
    state = SaddleState(0.9 * prob.radii[0] * start / np.linalg.norm(start), np.zeros(d), *prob.radii)
    s, a, s2 = sample_iid_batch(mdp, prob.policy, prob.weights, n, rng)
    for i in range(n):
        tr = Transition(int(s[i]), int(a[i]), float(mdp.reward[s[i], a[i]]), int(s2[i]))
        sgda_step(state, tr, prob.model, alpha, target)
    return state


def _saddle_calibration(config: ExperimentConfig, prob: SaddleProblem):
    env = config.environment
    target = alg.DistributionalTarget(prob.grid, prob.mdp.gamma)
    rng = seed_rng(config.master_seed, 2**32 - 1)  # shared across seeds
    return calibrate(prob.model, prob.mdp, prob.policy, prob.weights, target, prob.matrices,
                     max(prob.radii), env.get("calibration_samples", 20_000), rng)


def _run_saddle(config: ExperimentConfig, seed: int) -> RunLog:
    env = config.environment
    prob = saddle_problem(config)
    cal = _saddle_calibration(config, prob)
    out = RunLog()
    for n in env.get("horizons", [2500, 40_000]):
        rng = seed_rng(config.master_seed, seed)
        state = run_saddle_once(prob, int(n), step_size(int(n), cal.M_star), rng)
        theta_bar, w_bar = average_iterates(state)
        out.add(n, "sgda.err", seed, err_certificate(theta_bar, w_bar, prob.matrices, prob.radii))
        out.add(n, "sgda.bound_rhs", seed, cal.bound(int(n), env.get("delta_conf", 0.05)))
        out.checkpoints[(seed, "sgda.err", int(n))] = np.concatenate([theta_bar, w_bar])
    return out


def _saddle_table(log: RunLog) -> list[dict]:
    rows = []
    steps = sorted({s for s, m, _, _ in log.rows if m == "sgda.err"})
    for n in steps:
        errs = [v for s, m, _, v in log.rows if m == "sgda.err" and s == n]
        bound = [v for s, m, _, v in log.rows if m == "sgda.bound_rhs" and s == n][0]
        rows.append({"n": n, "err": float(np.median(errs)), "bound_rhs": float(bound)})
    return rows
