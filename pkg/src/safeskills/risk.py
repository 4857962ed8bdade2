"""Hysteresis risk estimators (safe/risky FSMs) and the spill-height mapping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .config import ConfigError, RiskSpec, DEFAULT_RISKS


class RiskState(str, Enum):
    SAFE = "safe"
    RISKY = "risky"


# Risk id -> observable parameter. Closed for the three built-in failures,
# extended at runtime by register_risk().
RISK_PARAMETERS: dict[str, str] = {"slide": "d", "overturn": "theta", "spill": "V"}


def register_risk(risk_id: str, parameter: str, kappa_a: float, kappa_d: float) -> "RiskEstimator":
    """Declare a novel risk and return a fresh estimator for it."""
    known = RISK_PARAMETERS.get(risk_id)
    if known is not None and known != parameter:
        raise ConfigError(f"risk {risk_id!r} already bound to parameter {known!r}")
    RISK_PARAMETERS[risk_id] = parameter
    return RiskEstimator(risk_id, parameter, kappa_a, kappa_d)


@dataclass(frozen=True)
class RiskEstimator:
    id: str
    parameter_id: str
    kappa_a: float
    kappa_d: float
    state: RiskState = RiskState.SAFE

    def __post_init__(self):
        if self.kappa_a == self.kappa_d:
            raise ConfigError(f"risk {self.id}: kappa_a must differ from kappa_d")
        if not self.kappa_d < self.kappa_a:
            raise ConfigError(f"risk {self.id}: kappa_d ({self.kappa_d}) must be below "
                              f"kappa_a ({self.kappa_a})")

    @classmethod
    def from_spec(cls, spec: RiskSpec) -> "RiskEstimator":
        return cls(spec.id, spec.parameter, spec.kappa_a, spec.kappa_d)

    @property
    def risky(self) -> bool:
        return self.state is RiskState.RISKY


def update(estimator: RiskEstimator, chi: float) -> RiskEstimator:
    """Advance the FSM. Strict comparisons: equality with a threshold holds the state."""
    if estimator.state is RiskState.SAFE and chi > estimator.kappa_a:
        return replace(estimator, state=RiskState.RISKY)
    if estimator.state is RiskState.RISKY and chi < estimator.kappa_d:
        return replace(estimator, state=RiskState.SAFE)
    return estimator


def risk_value(estimator: RiskEstimator) -> int:
    return 1 if estimator.state is RiskState.RISKY else 0


def risk_reward(rho: int) -> int:
    if rho not in (0, 1):
        raise ValueError(f"risk value must be 0 or 1, got {rho!r}")
    return 1 - rho


def default_estimators(specs: Iterable[RiskSpec] = DEFAULT_RISKS) -> list[RiskEstimator]:
    return [RiskEstimator.from_spec(s) for s in specs]


def update_all(risks: Sequence[RiskEstimator], observables: Mapping[str, float]
               ) -> tuple[list[RiskEstimator], dict[str, int]]:
    missing = [r.parameter_id for r in risks if r.parameter_id not in observables]
    if missing:
        raise ConfigError(f"missing observable(s) for risk update: {', '.join(missing)}")
    updated = [update(r, observables[r.parameter_id]) for r in risks]
    return updated, {r.id: risk_value(r) for r in updated}


def spill_volume_from_height(max_z: float, z_bowl: float, r: float) -> float:
    """Excess of the highest content point over the rim, in particle diameters."""
    if not r > 0:
        raise ValueError(f"particle radius must be positive, got {r}")
    return max(0.0, (max_z - z_bowl) / (2.0 * r))


@dataclass(frozen=True)
class RiskEvent:
    step: int
    risk_id: str
    transition: str  # "activate" | "deactivate"
    chi: float


class RiskMonitor:
    """The set of estimators watched on the control loop, with a transition log."""

    def __init__(self, estimators: Iterable[RiskEstimator]):
        self.estimators = list(estimators)
        ids = [e.id for e in self.estimators]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate risk ids: {ids}")
        self.events: list[RiskEvent] = []

    @classmethod
    def from_specs(cls, specs: Iterable[RiskSpec] = DEFAULT_RISKS) -> "RiskMonitor":
        return cls(default_estimators(specs))

    def register(self, risk_id: str, parameter: str, kappa_a: float, kappa_d: float) -> None:
        if any(e.id == risk_id for e in self.estimators):
            raise ConfigError(f"risk {risk_id!r} already registered")
        self.estimators.append(register_risk(risk_id, parameter, kappa_a, kappa_d))

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.estimators]

    def vector(self) -> dict[str, int]:
        return {e.id: risk_value(e) for e in self.estimators}

    def reset(self) -> None:
        self.estimators = [replace(e, state=RiskState.SAFE) for e in self.estimators]
        self.events = []

    def update(self, observables: Mapping[str, float], step: int = 0) -> dict[str, int]:
        before = self.estimators
        self.estimators, vec = update_all(before, observables)
        for old, new in zip(before, self.estimators):
            if old.state is not new.state:
                kind = "activate" if new.risky else "deactivate"
                self.events.append(RiskEvent(step, new.id, kind, float(observables[new.parameter_id])))
        return vec

    def activations(self, risk_id: str) -> int:
        return sum(1 for ev in self.events if ev.risk_id == risk_id and ev.transition == "activate")


def write_event_log(events: Iterable[RiskEvent], path: str | Path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["step", "risk_id", "transition", "chi"])
        for ev in events:
            w.writerow([ev.step, ev.risk_id, ev.transition, repr(ev.chi)])

