"""Run configuration: a flat ``key = value`` text file with a fixed schema.

Lines starting with ``#`` or ``;`` are comments.  Unknown keys are errors.
Relative paths are resolved against the directory holding the config file.
Environment entries of the form ``env<N>`` name the bundled maps.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..dwa import DwaConfig
from ..kinematics import SimConfig
from ..lifelong import ETA, MEMORY_BUDGET, STREAM_CAPACITY, SensorConfig, TrainHyper
from ..world import BUNDLED_MAPS

REGIMES = ("dwa_only", "sequential", "lifelong", "individual")
TRAINED_REGIMES = REGIMES[1:]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    collection_trials: int = 3
    segments: int = 5
    eval_repeats: int = 3


@dataclass(frozen=True)
class RunConfig:
    environments: tuple[Path, ...] = tuple(BUNDLED_MAPS / f"env{i}.map" for i in (1, 2, 3))
    seed: int = 0
    run_dir: Path = Path("run")
    regimes: tuple[str, ...] = REGIMES
    schedule: Schedule = Schedule()
    hyper: TrainHyper = TrainHyper()
    dwa: DwaConfig = DwaConfig()
    sim: SimConfig = SimConfig()
    sensor: SensorConfig = SensorConfig()
    eta: float = ETA
    memory_budget: int = MEMORY_BUDGET
    stream_capacity: int = STREAM_CAPACITY
    include_goal: bool = False
    planner_inflation: float = 0.3
    goal_tolerance: float = 0.3
    start_jitter_xy: float = 0.05
    start_jitter_theta: float = 0.05
    workers: int = 1
    debug: bool = False

    def __post_init__(self):
        if not self.environments:
            raise ConfigError("environments must be non-empty")
        s = self.schedule
        if min(s.collection_trials, s.segments, s.eval_repeats) < 1:
            raise ConfigError("schedule counts must be >= 1")
        bad = set(self.regimes) - set(REGIMES)
        if bad:
            raise ConfigError(f"unknown regimes {sorted(bad)}")
        if self.memory_budget < len(self.environments):
            raise ConfigError("memory_budget must cover one example per environment")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str
    target: tuple[str, ...] = field(default=())


def _keys() -> list[Key]:
    d = RunConfig()
    keys = [
        Key("environments", list, "env1, env2, env3", "comma-separated map files, or envN for bundled maps"),
        Key("seed", int, d.seed, "master seed"),
        Key("run_dir", str, str(d.run_dir), "output directory"),
        Key("regimes", list, ", ".join(d.regimes), "subset of " + ", ".join(REGIMES)),
        Key("collection_trials", int, d.schedule.collection_trials, "initial-policy trials per environment", ("schedule",)),
        Key("segments", int, d.schedule.segments, "cumulative experience segments", ("schedule",)),
        Key("eval_repeats", int, d.schedule.eval_repeats, "evaluation trials per policy and environment", ("schedule",)),
        Key("alpha", float, d.hyper.alpha, "learning rate", ("hyper",)),
        Key("epochs", int, d.hyper.epochs, "training epochs per policy", ("hyper",)),
        Key("batch_size", int, d.hyper.batch_size, "minibatch size", ("hyper",)),
        Key("eta", float, d.eta, "discriminator threshold for demonstrations"),
        Key("memory_budget", int, d.memory_budget, "joint capacity of training and long-term buffers"),
        Key("stream_capacity", int, d.stream_capacity, "streaming buffer length"),
        Key("include_goal", bool, d.include_goal, "use the local goal in similarity search"),
        Key("planner_inflation", float, d.planner_inflation, "obstacle inflation for the global planner (m)"),
        Key("goal_tolerance", float, d.goal_tolerance, "goal radius (m)"),
        Key("start_jitter_xy", float, d.start_jitter_xy, "uniform start position jitter half-width (m)"),
        Key("start_jitter_theta", float, d.start_jitter_theta, "uniform start heading jitter half-width (rad)"),
        Key("workers", int, d.workers, "parallel evaluation processes"),
        Key("debug", bool, d.debug, "cross-check every similarity search against an exhaustive scan"),
        Key("dt", float, d.sim.dt, "control period (s)", ("sim",)),
        Key("timeout", float, d.sim.timeout, "trial budget and penalty time (s)", ("sim",)),
        Key("robot_radius", float, d.sim.robot_radius, "disc footprint radius (m)", ("sim",)),
        Key("v_max", float, d.sim.limits.v_max, "actuator speed limit (m/s)", ("sim", "limits")),
        Key("omega_max", float, d.sim.limits.omega_max, "actuator turn-rate limit (rad/s)", ("sim", "limits")),
        Key("n_beams", int, d.sensor.n_beams, "lidar beams", ("sensor",)),
        Key("max_range", float, d.sensor.max_range, "lidar range (m)", ("sensor",)),
    ]
    for f in dataclasses.fields(DwaConfig):
        keys.append(Key(f"dwa_{f.name}", type(f.default), f.default, f"local planner {f.name.replace('_', ' ')}", ("dwa",)))
    return keys


SCHEMA = _keys()
_BY_NAME = {k.name: k for k in SCHEMA}


def print_schema() -> str:
    width = max(len(k.name) for k in SCHEMA)
    lines = [f"# {'key'.ljust(width)}  type   default  -- meaning"]
    for k in SCHEMA:
        lines.append(f"{k.name.ljust(width)}  {k.kind.__name__:<5}  {k.default}  -- {k.help}")
    return "\n".join(lines)


def _convert(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.kind is int:
            return int(raw)
        if key.kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        if key.kind is list:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.kind.__name__}") from None


def _resolve_env(entry: str, base: Path) -> Path:
    if entry.startswith("env") and entry[3:].isdigit():
        return BUNDLED_MAPS / f"{entry}.map"
    p = Path(entry)
    return p if p.is_absolute() else (base / p)


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = dict(cp["run"])
    unknown = sorted(set(values) - set(_BY_NAME))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")

    top: dict = {}
    nested: dict[str, dict] = {"schedule": {}, "hyper": {}, "dwa": {}, "sim": {}, "sensor": {}, "limits": {}}
    for name, raw in values.items():
        key = _BY_NAME[name]
        val = _convert(key, raw)
        if key.target:
            field_name = name[4:] if name.startswith("dwa_") else name
            nested[key.target[-1]][field_name] = val
        else:
            top[name] = val

    d = RunConfig()
    try:
        limits = dataclasses.replace(d.sim.limits, **nested["limits"])
        sim = dataclasses.replace(d.sim, limits=limits, **nested["sim"])
        out = dataclasses.replace(
            d,
            schedule=dataclasses.replace(d.schedule, **nested["schedule"]),
            hyper=dataclasses.replace(d.hyper, **nested["hyper"]),
            dwa=dataclasses.replace(d.dwa, **nested["dwa"]),
            sim=sim,
            sensor=dataclasses.replace(d.sensor, **nested["sensor"]),
        )
        if "environments" in top:
            top["environments"] = tuple(_resolve_env(e, base) for e in top["environments"])
        if "run_dir" in top:
            p = Path(top["run_dir"])
            top["run_dir"] = p if p.is_absolute() else base / p
        return dataclasses.replace(out, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base=path.resolve().parent)


def dump_config(cfg: RunConfig) -> str:
    """Render every key so the file alone reproduces the run."""
    lines = []
    for k in SCHEMA:
        obj = cfg
        for part in k.target:
            obj = getattr(obj, part)
        attr = k.name[4:] if k.name.startswith("dwa_") else k.name
        v = getattr(obj, attr)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k.name} = {v}")
    return "\n".join(lines) + "\n"
