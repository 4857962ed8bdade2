"""Configuration dataclasses, presets and the YAML config loader."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unparsable configuration."""


@dataclass(frozen=True)
class SimConfig:
    n_particles: int = 10
    particle_radius: float = 0.014
    bowl_radius: float = 0.08
    rim_height: float = 0.04
    spoon_radius: float = 0.01
    eta: float = 0.10
    phi_max: int = 50
    phi_step: int = 1
    max_action_norm: float = 0.01
    particle_damping: float = 0.8
    bowl_curvature: float = 0.03
    floor_radius: float = 0.0
    rest_speed: float = 1e-4
    contact_stiffness: float = 1000.0
    static_friction_threshold: float = 4.0
    slide_gain: float = 1.5
    tilt_gain: float = 0.01
    tilt_restoring: float = 0.1
    pile_packing_coefficient: float = 2.5
    pile_decay: float = 0.04
    crowd_tolerance: float = 0.3
    relax_iterations: int = 8
    seed: int = 0

    def __post_init__(self):
        positive = (
            "particle_radius", "bowl_radius", "rim_height", "spoon_radius", "eta",
            "max_action_norm", "contact_stiffness", "static_friction_threshold",
            "slide_gain", "tilt_gain", "tilt_restoring", "pile_packing_coefficient",
            "pile_decay",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"sim.{name} must be > 0, got {getattr(self, name)}")
        if self.n_particles < 0:
            raise ConfigError("sim.n_particles must be >= 0")
        if self.phi_max <= 0:
            raise ConfigError("sim.phi_max must be > 0")
        if self.phi_step < 1:
            raise ConfigError("sim.phi_step must be >= 1")
        if self.relax_iterations < 1:
            raise ConfigError("sim.relax_iterations must be >= 1")
        if not 0 <= self.floor_radius <= self.bowl_radius:
            raise ConfigError("sim.floor_radius must be in [0, bowl_radius]")
        if self.rest_speed < 0:
            raise ConfigError("sim.rest_speed must be >= 0")
        if self.crowd_tolerance < 0:
            raise ConfigError("sim.crowd_tolerance must be >= 0")
        if not 0 <= self.bowl_curvature < 1:
            raise ConfigError("sim.bowl_curvature must be in [0, 1)")
        if not 0 <= self.particle_damping < 1:
            raise ConfigError("sim.particle_damping must be in [0, 1)")
        if self.pile_decay >= 1:
            raise ConfigError("sim.pile_decay must be < 1")


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    steps_per_episode: int = 200
    batch_size: int = 128
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    tau: float = 0.005
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.8
    buffer_capacity: int = 100_000
    hidden: tuple[int, ...] = (400, 300)
    ou_mu: float = 0.0
    ou_sigma: float = 1.0
    ou_theta: float = 0.15
    ou_dt: float = 1.0
    eval_every: int = 10
    eval_episodes: int = 5
    updates_per_step: int = 1
    save_checkpoints: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 < self.gamma < 1:
            raise ConfigError(f"train.gamma must be in (0, 1), got {self.gamma}")
        if self.batch_size > self.buffer_capacity:
            raise ConfigError("train.batch_size must not exceed train.buffer_capacity")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.tau <= 1:
            raise ConfigError("train.tau must be in [0, 1]")
        if self.episodes < 0 or self.steps_per_episode < 1:
            raise ConfigError("train.episodes must be >= 0 and steps_per_episode >= 1")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0 < self.epsilon_decay_fraction <= 1:
            raise ConfigError("train.epsilon_decay_fraction must be in (0, 1]")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("train.eval_every and train.eval_episodes must be >= 1")


@dataclass(frozen=True)
class RiskSpec:
    """One risk monitor definition: which observable, and its two thresholds."""

    id: str
    parameter: str
    kappa_a: float
    kappa_d: float

    def __post_init__(self):
        if self.kappa_a == self.kappa_d:
            raise ConfigError(f"risk {self.id}: kappa_a and kappa_d must differ")
        if not self.kappa_d < self.kappa_a:
            raise ConfigError(f"risk {self.id}: kappa_d must be below kappa_a")


DEFAULT_RISKS = (
    RiskSpec("slide", "d", 0.05, 0.02),
    RiskSpec("overturn", "theta", 0.3, 0.1),
    RiskSpec("spill", "V", 0.66, 0.33),
)

# Highest priority first.
DEFAULT_PRIORITY = ("overturn", "spill", "slide")


@dataclass(frozen=True)
class ConditionSpec:
    """An evaluation condition: bowl setup plus the skills making up its library."""

    setup: str
    skills: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "skills", tuple(self.skills))
        if self.setup not in ("fixed", "unrestricted"):
            raise ConfigError(f"condition setup must be 'fixed' or 'unrestricted', got {self.setup!r}")
        if not self.skills:
            raise ConfigError("a condition needs at least one skill")


DEFAULT_CONDITIONS = {
    "pi_b-F": ConditionSpec("fixed", ("stir",)),
    "pi_b-U": ConditionSpec("unrestricted", ("stir",)),
    "L2-F": ConditionSpec("fixed", ("stir", "spill")),
    "L4-U": ConditionSpec("unrestricted", ("stir", "spill", "slide", "overturn")),
    "pi_c-U": ConditionSpec("unrestricted", ("compound",)),
}


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 20
    steps: int = 300
    trace_particle: int = 0
    trace_steps: int = 300


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    risks: tuple[RiskSpec, ...] = DEFAULT_RISKS
    priority: tuple[str, ...] = DEFAULT_PRIORITY
    eval: EvalConfig = field(default_factory=EvalConfig)
    # Per-skill overrides: {skill_name: {"frame": ..., "reward_scale": ...}}
    skills: dict[str, dict[str, Any]] = field(default_factory=dict)
    conditions: dict[str, ConditionSpec] = field(default_factory=lambda: dict(DEFAULT_CONDITIONS))
    output_dir: str = "runs"
    preset: str = "desk"
    seed: int = 0

    def __post_init__(self):
        ids = [r.id for r in self.risks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate risk ids in {ids}")
        if len(set(self.priority)) != len(self.priority):
            raise ConfigError(f"duplicate entries in priority {self.priority}")
        unknown = set(self.priority) - set(ids)
        if unknown:
            raise ConfigError(f"priority names unknown risks: {sorted(unknown)}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "sim": {"n_particles": 10},
        "train": {"episodes": 200, "steps_per_episode": 200, "hidden": (96, 72)},
        "eval": {"episodes": 20, "steps": 300},
    },
    "paper": {
        "sim": {"n_particles": 40, "particle_radius": 0.007},
        "train": {"episodes": 1500, "steps_per_episode": 500, "hidden": (400, 300)},
        "eval": {"episodes": 20, "steps": 1000, "trace_steps": 1000},
    },
}


def _build(cls, data: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**data)


def build_config(data: dict[str, Any] | None = None, preset: str | None = None,
                 seed: int | None = None) -> ExperimentConfig:
    """Resolve a config dict on top of a named preset."""
    data = dict(data or {})
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    preset = preset or data.pop("preset", "desk")
    data.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    allowed = {"sim", "train", "risks", "priority", "eval", "skills", "conditions",
               "output_dir", "seed"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    seed = int(data.get("seed", 0) if seed is None else seed)
    sim = {**base.get("sim", {}), **(data.get("sim") or {})}
    sim.setdefault("seed", seed)
    train = {**base.get("train", {}), **(data.get("train") or {})}
    train.setdefault("seed", seed)
    ev = {**base.get("eval", {}), **(data.get("eval") or {})}
    risks = data.get("risks")
    if risks is None:
        risk_specs = DEFAULT_RISKS
    else:
        try:
            risk_specs = tuple(_build(RiskSpec, dict(r), "risks") for r in risks)
        except TypeError as exc:
            raise ConfigError(f"bad risk entry: {exc}") from exc
    conditions = dict(DEFAULT_CONDITIONS)
    for cid, spec in (data.get("conditions") or {}).items():
        try:
            conditions[str(cid)] = _build(ConditionSpec, dict(spec), f"conditions.{cid}")
        except TypeError as exc:
            raise ConfigError(f"bad condition {cid!r}: {exc}") from exc
    try:
        return ExperimentConfig(
            sim=_build(SimConfig, sim, "sim"),
            train=_build(TrainConfig, train, "train"),
            risks=risk_specs,
            priority=tuple(data.get("priority", DEFAULT_PRIORITY)),
            eval=_build(EvalConfig, ev, "eval"),
            skills=dict(data.get("skills") or {}),
            conditions=conditions,
            output_dir=str(data.get("output_dir", "runs")),
            preset=preset,
            seed=seed,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, preset: str | None = None,
                seed: int | None = None) -> ExperimentConfig:
    """Load an experiment config from YAML; errors carry the file line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return build_config(data, preset=preset, seed=seed)
    except ConfigError as exc:
        raise ConfigError(f"{path}{_locate(text, str(exc))}: {exc}") from None


def _locate(text: str, message: str) -> str:
    # Point at the first line mentioning a key named in the error, if any.
    for lineno, line in enumerate(text.splitlines(), 1):
        key = line.strip().split(":", 1)[0].lstrip("- ")
        if key and key in message:
            return f" (line {lineno})"
    return ""


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(
        json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=True))
