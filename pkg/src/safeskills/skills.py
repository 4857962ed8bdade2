"""Base and failure-prevention skills, their rewards and initial procedures, and the library."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import sim
from .config import ConfigError, SimConfig, TrainConfig
from .nn import DenseNet, forward, load_checkpoint
from .risk import RISK_PARAMETERS, RiskMonitor, risk_reward
from .sim import WorldState

FRAMES = ("bowl", "table")
COMPOUND_RISKS = ("slide", "overturn", "spill")
MANIFEST_VERSION = 1

# Rough magnitude of each observable, used to scale network inputs.
OBSERVABLE_SCALE = {"d": 0.1, "theta": 0.3, "V": 1.0}


class RegistrationError(ValueError):
    pass


class InitialProcedureError(RuntimeError):
    """The scripted perturbation did not trigger its risk within the step budget."""


@dataclass(frozen=True)
class SkillKind:
    kind: str  # "base" | "prevention"
    risk: str | None = None

    def __post_init__(self):
        if self.kind not in ("base", "prevention"):
            raise ValueError(f"unknown skill kind {self.kind!r}")
        if (self.kind == "prevention") != (self.risk is not None):
            raise ValueError("prevention skills need a risk; base skills must not have one")

    @property
    def is_base(self) -> bool:
        return self.kind == "base"


BASE = SkillKind("base")


def prevention(risk: str) -> SkillKind:
    return SkillKind("prevention", risk)


def _observable(state: WorldState, parameter: str) -> float:
    fn = OBSERVABLE_FUNCS.get(parameter)
    if fn is None:
        raise ConfigError(f"no observable named {parameter!r}")
    return fn(state)


OBSERVABLE_FUNCS: dict[str, Callable[[WorldState], float]] = {
    "d": sim.observe_d, "theta": sim.observe_theta, "V": sim.observe_V,
}


def stir_observation(state: WorldState, frame: str = "bowl") -> np.ndarray:
    """[spoon x, spoon y, phase / phi_max]; spoon relative to the bowl centre or the table origin."""
    if frame == "bowl":
        x = state.spoon - state.bowl.center
    elif frame == "table":
        x = state.spoon - state.bowl.initial_center
    else:
        raise ConfigError(f"unknown frame {frame!r}; expected one of {FRAMES}")
    return np.array([x[0], x[1], state.phase / state.config.phi_max])


def prevention_observation(state: WorldState, risk_id: str, frame: str = "bowl") -> np.ndarray:
    parameter = RISK_PARAMETERS.get(risk_id)
    if parameter is None:
        raise ConfigError(f"unknown risk {risk_id!r}")
    return np.append(stir_observation(state, frame), _observable(state, parameter))


def stir_reward(prev: WorldState, next: WorldState) -> float:
    disp, inside = sim.displacements(prev, next)
    return float(np.sum(disp[inside]))


def prevention_reward(risk_vector: Mapping[str, int], risk_id: str) -> int:
    if risk_id not in risk_vector:
        raise ConfigError(f"risk {risk_id!r} not in risk vector {sorted(risk_vector)}")
    return risk_reward(risk_vector[risk_id])


def compound_reward(prev: WorldState, next: WorldState, risk_vector: Mapping[str, int]) -> float:
    missing = [r for r in COMPOUND_RISKS if r not in risk_vector]
    if missing:
        raise ConfigError(f"compound reward needs risks {missing}")
    total = stir_reward(prev, next)
    for r in COMPOUND_RISKS:
        total += prevention_reward(risk_vector, r)
    return total


# -- initial procedures ------------------------------------------------------

def _triggered(state: WorldState, risk_id: str, kappa_a: float) -> bool:
    return _observable(state, RISK_PARAMETERS[risk_id]) > kappa_a


def initial_procedure(state: WorldState, risk_id: str, rng: np.random.Generator,
                      kappa_a: float | None = None, budget: int = 200) -> WorldState:
    """Drive a fresh world into the risky state of ``risk_id``."""
    from .config import DEFAULT_RISKS

    if kappa_a is None:
        table = {r.id: r.kappa_a for r in DEFAULT_RISKS}
        if risk_id not in table:
            raise ConfigError(f"no default activation threshold for risk {risk_id!r}")
        kappa_a = table[risk_id]
    cfg = state.config
    if risk_id == "slide":
        if state.bowl.fixed:
            raise ConfigError("the slide procedure needs the unrestricted setup")
        return _slide_procedure(state, rng, kappa_a)
    if risk_id == "overturn":
        if state.bowl.fixed:
            raise ConfigError("the overturn procedure needs the unrestricted setup")
        angle = rng.uniform(0.0, 2.0 * math.pi)
        push = cfg.max_action_norm * np.array([math.cos(angle), math.sin(angle)])
        for _ in range(budget):
            state, _ = sim.step(state, push)
            if _triggered(state, risk_id, kappa_a):
                return state
        raise InitialProcedureError(f"overturn not triggered within {budget} steps")
    if risk_id == "spill":
        target = _random_point_in_bowl(state, rng)
        for _ in range(budget):
            delta = target - state.spoon
            if float(np.hypot(*delta)) < 0.5 * cfg.max_action_norm:
                target = _random_point_in_bowl(state, rng)
                delta = target - state.spoon
            state, _ = sim.step(state, delta)
            if _triggered(state, risk_id, kappa_a):
                return state
        raise InitialProcedureError(f"spill not triggered within {budget} steps")
    raise ConfigError(f"no initial procedure for risk {risk_id!r}")


def _random_point_in_bowl(state: WorldState, rng: np.random.Generator) -> np.ndarray:
    reach = state.bowl.radius - state.config.spoon_radius
    rad = reach * math.sqrt(rng.uniform())
    ang = rng.uniform(0.0, 2.0 * math.pi)
    return state.bowl.center + rad * np.array([math.cos(ang), math.sin(ang)])


def _slide_procedure(state: WorldState, rng: np.random.Generator, kappa_a: float) -> WorldState:
    # The bowl (with its content) is put down away from where it should be;
    # the spoon waits at the in-bowl point closest to the nominal position.
    state = state.copy()
    dist = rng.uniform(kappa_a, 2.0 * kappa_a)
    if dist <= kappa_a:
        dist = math.nextafter(kappa_a, math.inf)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    offset = dist * np.array([math.cos(ang), math.sin(ang)])
    state.bowl.center = state.bowl.initial_center + offset
    state.positions = state.positions + offset
    reach = state.bowl.radius - state.config.spoon_radius
    toward = -offset / dist
    state.spoon = state.bowl.center + toward * min(dist, reach)
    return sim.settle(state)


# -- policies, skills, library ----------------------------------------------

@dataclass
class Policy:
    """Deterministic actor mapping a skill observation to a spoon displacement (metres)."""

    actor: DenseNet
    obs_scale: np.ndarray
    max_action: float

    def __call__(self, obs) -> np.ndarray:
        return forward(self.actor, np.asarray(obs) * self.obs_scale)[0] * self.max_action

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.actor.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SkillSpec:
    name: str
    kind: SkillKind
    frame: str = "bowl"
    setup: str = "fixed"
    reward_scale: float = 1.0
    policy: Policy | None = field(default=None, compare=False)
    checkpoint: str | None = None

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ConfigError(f"skill {self.name}: unknown frame {self.frame!r}")
        if self.setup not in sim.SETUPS:
            raise ConfigError(f"skill {self.name}: unknown setup {self.setup!r}")

    @property
    def is_compound(self) -> bool:
        return self.name == "compound"

    def observe(self, state: WorldState) -> np.ndarray:
        if self.kind.is_base:
            return stir_observation(state, self.frame)
        return prevention_observation(state, self.kind.risk, self.frame)

    def obs_scale(self, cfg: SimConfig) -> np.ndarray:
        scale = [1.0 / cfg.eta, 1.0 / cfg.eta, 1.0]
        if not self.kind.is_base:
            scale.append(1.0 / OBSERVABLE_SCALE.get(RISK_PARAMETERS[self.kind.risk], 1.0))
        return np.array(scale)

    def reward(self, prev: WorldState, next: WorldState, risk_vector: Mapping[str, int]) -> float:
        if self.is_compound:
            return compound_reward(prev, next, risk_vector)
        if self.kind.is_base:
            return stir_reward(prev, next)
        return float(prevention_reward(risk_vector, self.kind.risk))

    def initial_state(self, state: WorldState, rng: np.random.Generator,
                      kappa_a: float | None = None, budget: int = 200) -> WorldState:
        if self.kind.is_base:
            return state
        return initial_procedure(state, self.kind.risk, rng, kappa_a, budget)

    def act(self, state: WorldState) -> np.ndarray:
        if self.policy is None:
            raise RuntimeError(f"skill {self.name} has no policy loaded")
        return self.policy(self.observe(state))

    def with_policy(self, policy: Policy, checkpoint: str | None = None) -> "SkillSpec":
        return replace(self, policy=policy, checkpoint=checkpoint)


SKILL_DEFAULTS: dict[str, dict] = {
    "stir": {"kind": BASE, "setup": "fixed", "reward_scale": 10.0},
    "compound": {"kind": BASE, "setup": "unrestricted", "reward_scale": 1.0},
    "slide": {"kind": prevention("slide"), "setup": "unrestricted"},
    "overturn": {"kind": prevention("overturn"), "setup": "unrestricted"},
    "spill": {"kind": prevention("spill"), "setup": "fixed"},
}


def make_skill(name: str, overrides: Mapping | None = None) -> SkillSpec:
    """Skill spec from the built-in table, with per-experiment overrides (frame, setup, reward_scale)."""
    if name not in SKILL_DEFAULTS:
        raise ConfigError(f"unknown skill {name!r}; choose from {sorted(SKILL_DEFAULTS)}")
    kw = dict(SKILL_DEFAULTS[name])
    for key, val in (overrides or {}).items():
        if key not in ("frame", "setup", "reward_scale"):
            raise ConfigError(f"skill {name}: unknown override {key!r}")
        kw[key] = val
    return SkillSpec(name=name, **kw)


class SkillLibrary:
    """Ordered, append-only collection of skills."""

    def __init__(self, skills: Sequence[SkillSpec] = ()):
        names = [s.name for s in skills]
        if len(set(names)) != len(names):
            raise RegistrationError(f"duplicate skill names in {names}")
        self._skills = tuple(skills)

    def __iter__(self):
        return iter(self._skills)

    def __len__(self) -> int:
        return len(self._skills)

    def __getitem__(self, name: str) -> SkillSpec:
        for s in self._skills:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self._skills]

    def base_skills(self) -> list[SkillSpec]:
        return [s for s in self._skills if s.kind.is_base]

    def prevention_for(self, risk_id: str) -> SkillSpec | None:
        for s in self._skills:
            if s.kind.risk == risk_id:
                return s
        return None


def register_skill(library: SkillLibrary, skill: SkillSpec) -> SkillLibrary:
    if skill.name in library.names:
        raise RegistrationError(f"skill {skill.name!r} already in the library")
    if not skill.kind.is_base and skill.kind.risk not in RISK_PARAMETERS:
        raise RegistrationError(f"skill {skill.name!r} prevents unregistered risk {skill.kind.risk!r}")
    return SkillLibrary([*library, skill])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_manifest(library: SkillLibrary, path: str | Path) -> None:
    path = Path(path)
    entries = []
    for s in library:
        entry = {"name": s.name, "kind": s.kind.kind, "risk": s.kind.risk, "frame": s.frame,
                 "setup": s.setup, "reward_scale": s.reward_scale, "checkpoint": s.checkpoint}
        if s.checkpoint is not None:
            ck = Path(s.checkpoint)
            ck = ck if ck.is_absolute() else path.parent / ck
            entry["sha256"] = file_sha256(ck)
        entries.append(entry)
    path.write_text(yaml.safe_dump({"schema_version": MANIFEST_VERSION, "skills": entries},
                                   sort_keys=False))


def load_manifest(path: str | Path, sim_cfg: SimConfig) -> SkillLibrary:
    path = Path(path)
    data = yaml.safe_load(path.read_text())
    if data.get("schema_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version {data.get('schema_version')}")
    lib = SkillLibrary()
    for e in data["skills"]:
        kind = SkillKind(e["kind"], e.get("risk"))
        spec = SkillSpec(name=e["name"], kind=kind, frame=e.get("frame", "bowl"),
                         setup=e.get("setup", "fixed"), reward_scale=e.get("reward_scale", 1.0))
        ck = e.get("checkpoint")
        if ck is not None:
            full = Path(ck) if Path(ck).is_absolute() else path.parent / ck
            if not full.exists():
                raise FileNotFoundError(f"checkpoint {full} listed in {path} is missing")
            if "sha256" in e and file_sha256(full) != e["sha256"]:
                raise ConfigError(f"checkpoint {full} does not match its manifest checksum")
            actor = load_checkpoint(full).net
            spec = spec.with_policy(Policy(actor, spec.obs_scale(sim_cfg), sim_cfg.max_action_norm), ck)
        lib = register_skill(lib, spec)
    return lib


class SkillEnv:
    """Gym-style training environment for one skill.

    Actions are in [-1, 1]^2 and scaled to the spoon's maximum step. Each reset
    runs the skill's initial procedure; attempts that exhaust the budget are
    counted in ``skipped`` and resampled.
    """

    act_dim = 2

    def __init__(self, skill: SkillSpec, sim_cfg: SimConfig, monitor: RiskMonitor | None = None,
                 procedure_budget: int = 200, max_attempts: int = 20):
        self.skill = skill
        self.sim_cfg = sim_cfg
        self.monitor = monitor or RiskMonitor.from_specs()
        self.procedure_budget = procedure_budget
        self.max_attempts = max_attempts
        self.obs_scale = skill.obs_scale(sim_cfg)
        self.obs_dim = len(self.obs_scale)
        self.state: WorldState | None = None
        self.skipped = 0
        self.initial_vectors: list[dict[str, int]] = []

    def _kappa_a(self) -> float | None:
        for e in self.monitor.estimators:
            if e.id == self.skill.kind.risk:
                return e.kappa_a
        return None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        for _ in range(self.max_attempts):
            world = sim.reset(self.sim_cfg, self.skill.setup, seed=int(rng.integers(2**31)))
            try:
                world = self.skill.initial_state(world, rng, self._kappa_a(), self.procedure_budget)
            except InitialProcedureError:
                self.skipped += 1
                continue
            break
        else:
            raise InitialProcedureError(
                f"{self.skill.name}: initial procedure failed {self.max_attempts} times in a row")
        world.step_count = 0
        self.state = world
        self.monitor.reset()
        vec = self.monitor.update(sim.observables(world), step=0)
        self.initial_vectors.append(vec)
        return self.skill.observe(world)

    def step(self, action) -> tuple[np.ndarray, float, dict]:
        prev = self.state
        nxt, info = sim.step(prev, np.asarray(action) * self.sim_cfg.max_action_norm)
        vec = self.monitor.update(sim.observables(nxt), step=nxt.step_count)
        reward = self.skill.reward(prev, nxt, vec) * self.skill.reward_scale
        self.state = nxt
        return self.skill.observe(nxt), reward, {"risk": vec, "step_info": info}


def train_skill(skill: SkillSpec, sim_cfg: SimConfig, train_cfg: TrainConfig,
                monitor: RiskMonitor | None = None, out_dir: str | Path | None = None,
                eval_steps: int | None = None):
    """Run DDPG for ``skill``; return (skill with best policy attached, TrainingResult, env)."""
    from .ddpg import run_training

    env = SkillEnv(skill, sim_cfg, monitor)
    result = run_training(env, train_cfg, name=skill.name, out_dir=out_dir, eval_steps=eval_steps)
    policy = Policy(result.best_actor, env.obs_scale, sim_cfg.max_action_norm)
    ck = f"{skill.name}_best.ckpt" if out_dir is not None else None
    return skill.with_policy(policy, ck), result, env
