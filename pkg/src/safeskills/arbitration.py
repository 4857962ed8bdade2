"""Rule-based skill selection over the risk vector, and the closed control loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import sim
from .config import ConfigError
from .risk import RiskMonitor
from .skills import SkillLibrary, SkillSpec, stir_reward
from .sim import WorldState

TRACE_HEADER = ["step", "d", "theta", "V", "rho_slide", "rho_overturn", "rho_spill", "skill"]
HALT = "halt"


class ArbitrationError(RuntimeError):
    """An active, prioritised risk has no prevention skill in the library."""

    def __init__(self, risk_id: str):
        super().__init__(f"risk {risk_id!r} is active but no prevention skill is registered for it")
        self.risk_id = risk_id


class EpisodeAborted(RuntimeError):
    """Raised from the control loop; carries whatever was recorded before the failure."""

    def __init__(self, message: str, metrics: "EpisodeMetrics", trace: "SelectionTrace"):
        super().__init__(message)
        self.metrics = metrics
        self.trace = trace


@dataclass(frozen=True)
class PriorityTable:
    """Risk ids, most important first."""

    order: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if len(set(self.order)) != len(self.order):
            raise ConfigError(f"duplicate risks in priority table {self.order}")

    @classmethod
    def for_library(cls, priority: Sequence[str], library: SkillLibrary) -> "PriorityTable":
        """Restrict a global ordering to the risks the library can prevent."""
        covered = [r for r in priority if library.prevention_for(r) is not None]
        missing = [s.kind.risk for s in library
                   if not s.kind.is_base and s.kind.risk not in priority]
        if missing:
            raise ConfigError(f"prevention skills for risks {missing} have no priority")
        return cls(tuple(covered))

    def __iter__(self):
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)


def select(risk_vector: Mapping[str, int], priority: PriorityTable | Sequence[str],
           library: SkillLibrary) -> SkillSpec:
    """Base skill when no prioritised risk is active, otherwise the prevention
    skill of the most important active one."""
    for risk_id in priority:
        if risk_vector.get(risk_id, 0) == 1:
            skill = library.prevention_for(risk_id)
            if skill is None:
                raise ArbitrationError(risk_id)
            return skill
    bases = library.base_skills()
    if not bases:
        raise ConfigError("library has no base skill")
    return bases[0]


@dataclass(frozen=True)
class TraceRecord:
    step: int
    d: float
    theta: float
    V: float
    rho: Mapping[str, int]
    skill: str

    def row(self) -> list:
        return [self.step, repr(self.d), repr(self.theta), repr(self.V),
                self.rho.get("slide", 0), self.rho.get("overturn", 0), self.rho.get("spill", 0),
                self.skill]


@dataclass
class SelectionTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def skills(self) -> list[str]:
        return [r.skill for r in self.records]

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()


@dataclass
class EpisodeMetrics:
    steps: int = 0
    stir_reward: float = 0.0
    spill_count: int = 0
    slide_d_mean: float = 0.0
    overturn_theta_mean: float = 0.0
    spilled_particles: int = 0
    halted: str | None = None


def run_episode(library: SkillLibrary, priority: PriorityTable | Sequence[str],
                monitor: RiskMonitor, world: WorldState, steps: int,
                on_step: Callable[[WorldState, str], None] | None = None,
                ) -> tuple[EpisodeMetrics, SelectionTrace, WorldState]:
    """Run the observe / update risks / select / act loop for ``steps`` steps.

    ``monitor`` watches every risk (for the metrics); only risks in
    ``priority`` take part in selection. If a prioritised risk becomes active
    without a prevention skill, the spoon stops for the rest of the episode.
    """
    monitor.reset()
    trace = SelectionTrace()
    metrics = EpisodeMetrics()
    d_sum = theta_sum = 0.0
    halted = False
    start_escaped = int(world.escaped.sum())
    for t in range(steps):
        obs = sim.observables(world)
        try:
            vec = monitor.update(obs, step=t)
            if halted:
                name, action = HALT, np.zeros(2)
            else:
                try:
                    skill = select(vec, priority, library)
                    name, action = skill.name, skill.act(world)
                except ArbitrationError as exc:
                    halted = True
                    metrics.halted = str(exc)
                    name, action = HALT, np.zeros(2)
            trace.records.append(TraceRecord(t, obs["d"], obs["theta"], obs["V"], vec, name))
            prev = world
            world, _ = sim.step(world, action)
        except Exception as exc:
            metrics.steps = t
            raise EpisodeAborted(f"episode aborted at step {t}: {exc}", metrics, trace) from exc
        metrics.stir_reward += stir_reward(prev, world)
        d_sum += obs["d"]
        theta_sum += obs["theta"]
        if on_step is not None:
            on_step(world, name)
    metrics.steps = steps
    metrics.spill_count = monitor.activations("spill") if "spill" in monitor.ids else 0
    metrics.slide_d_mean = d_sum / steps if steps else 0.0
    metrics.overturn_theta_mean = theta_sum / steps if steps else 0.0
    metrics.spilled_particles = int(world.escaped.sum()) - start_escaped
    return metrics, trace, world
