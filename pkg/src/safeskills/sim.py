"""Planar pseudo-3D stirring simulator.

A kinematic spoon disc pushes rigid particle discs inside a circular bowl.
The bowl can slide (stick/slip against a static friction threshold) and tilt
(torque from lateral wall forces against a restoring term) unless it is
fixed. Particle heights follow a crowding heuristic so that jamming the pile
lifts particles over the rim.

One call to :func:`step` is one 50 ms control window.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .config import ConfigError, SimConfig

Setup = Literal["fixed", "unrestricted"]
SETUPS = ("fixed", "unrestricted")


@dataclass(frozen=True)
class Particle:
    position: np.ndarray
    height: float
    radius: float


@dataclass
class BowlState:
    center: np.ndarray
    initial_center: np.ndarray
    tilt: float
    radius: float
    rim_height: float
    fixed: bool

    def copy(self) -> "BowlState":
        return replace(self, center=self.center.copy(),
                       initial_center=self.initial_center.copy())


@dataclass
class WorldState:
    spoon: np.ndarray
    bowl: BowlState
    positions: np.ndarray  # (n, 2)
    heights: np.ndarray  # (n,)
    radii: np.ndarray  # (n,)
    escaped: np.ndarray  # (n,) bool; spilled particles stay tracked but frozen
    velocities: np.ndarray  # (n, 2) last-step displacement, carried over with damping
    phase: int
    step_count: int
    config: SimConfig
    rng: np.random.Generator = field(repr=False)

    @property
    def particles(self) -> list[Particle]:
        return [Particle(p.copy(), float(h), float(r))
                for p, h, r in zip(self.positions, self.heights, self.radii)]

    @property
    def n_particles(self) -> int:
        return len(self.radii)

    def copy(self) -> "WorldState":
        # The generator is shared on purpose: step() never draws from it.
        return WorldState(
            spoon=self.spoon.copy(), bowl=self.bowl.copy(),
            positions=self.positions.copy(), heights=self.heights.copy(),
            radii=self.radii.copy(), escaped=self.escaped.copy(),
            velocities=self.velocities.copy(), phase=self.phase, step_count=self.step_count,
            config=self.config, rng=self.rng,
        )


@dataclass(frozen=True)
class StepInfo:
    displacements: np.ndarray
    in_bowl: np.ndarray
    spoon_force: np.ndarray
    wall_force: np.ndarray
    bowl_shift: np.ndarray
    newly_escaped: np.ndarray


def advance_phase(phase: int, phi_step: int, phi_max: int) -> int:
    if phi_max <= 0:
        raise ConfigError(f"phi_max must be positive, got {phi_max}")
    return (phase + phi_step) % phi_max


def excluded_fraction(height, radius, rim_height):
    """Fraction of a sphere's volume lying above the rim plane.

    ``height`` is the sphere centre's elevation; the protruding part is a
    spherical cap of height ``e = height + radius - rim_height``.
    """
    height = np.asarray(height, dtype=float)
    radius = np.asarray(radius, dtype=float)
    e = np.clip(height + radius - rim_height, 0.0, 2.0 * radius)
    frac = e * e * (3.0 * radius - e) / (4.0 * radius ** 3)
    return np.where(fully_above(height, radius, rim_height), 1.0, frac)


def fully_above(height, radius, rim_height):
    """Excluded fraction == 1, tested on the sphere's lowest point to avoid rounding."""
    return np.asarray(height) - np.asarray(radius) >= rim_height


def _pack_positions(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    r = cfg.particle_radius
    spacing = 2.0 * r * 1.05
    outer = cfg.bowl_radius - r - 0.05 * r
    inner = cfg.spoon_radius + r + 0.05 * r
    rows = int(math.ceil(outer / (spacing * math.sqrt(3) / 2))) + 1
    cols = int(math.ceil(outer / spacing)) + 1
    cand = []
    for j in range(-rows, rows + 1):
        y = j * spacing * math.sqrt(3) / 2
        shift = 0.5 * spacing if j % 2 else 0.0
        for i in range(-cols, cols + 1):
            x = i * spacing + shift
            d = math.hypot(x, y)
            if inner <= d <= outer:
                cand.append((round(d, 12), round(math.atan2(y, x), 12), x, y))
    if len(cand) < cfg.n_particles:
        raise ConfigError(
            f"{cfg.n_particles} particles of radius {r} do not fit in a bowl of "
            f"radius {cfg.bowl_radius} (room for {len(cand)})")
    cand.sort()
    pts = np.array([(x, y) for _, _, x, y in cand[: cfg.n_particles]], dtype=float)
    jitter = rng.uniform(-0.02 * r, 0.02 * r, size=pts.shape)
    return pts.reshape(-1, 2) + jitter.reshape(-1, 2)


def reset(config: SimConfig, setup: Setup = "fixed", seed: int | None = None) -> WorldState:
    """Fresh world: upright bowl at the origin, spoon at its centre, particles packed around it."""
    if setup not in SETUPS:
        raise ConfigError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    positions = _pack_positions(config, rng)
    n = config.n_particles
    bowl = BowlState(center=np.zeros(2), initial_center=np.zeros(2), tilt=0.0,
                     radius=config.bowl_radius, rim_height=config.rim_height,
                     fixed=setup == "fixed")
    return WorldState(
        spoon=np.zeros(2), bowl=bowl, positions=positions, heights=np.zeros(n),
        radii=np.full(n, config.particle_radius), escaped=np.zeros(n, dtype=bool),
        velocities=np.zeros((n, 2)), phase=0, step_count=0, config=config, rng=rng,
    )


def _unit(v: np.ndarray, fallback: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.hypot(v[0], v[1]))
    if n < 1e-15:
        return fallback, 0.0
    return v / n, n


def push_out_of_disc(points: np.ndarray, radii: np.ndarray, center: np.ndarray,
                     disc_radius: float, fallback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project overlapping discs radially out of a kinematic disc.

    Returns the new points and the per-point overlap depth that was removed.
    """
    off = points - center
    dist = np.hypot(off[:, 0], off[:, 1])
    reach = radii + disc_radius
    hit = dist < reach
    depth = np.where(hit, reach - dist, 0.0)
    if not hit.any():
        return points, depth
    safe = np.where(dist > 1e-15, dist, 1.0)
    normals = off / safe[:, None]
    normals[dist <= 1e-15] = fallback
    out = points.copy()
    out[hit] = center + normals[hit] * reach[hit, None]
    return out, depth


def _relax_pairs(pos: np.ndarray, radii: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One Jacobi sweep of pairwise overlap removal; returns moves and overlap per particle."""
    diff = pos[None, :, :] - pos[:, None, :]  # diff[i, j] = p_j - p_i
    dist = np.hypot(diff[..., 0], diff[..., 1])
    reach = radii[:, None] + radii[None, :]
    both = active[:, None] & active[None, :]
    np.fill_diagonal(both, False)
    overlap = np.where(both & (dist < reach), reach - dist, 0.0)
    if not overlap.any():
        return np.zeros_like(pos), np.zeros(len(pos))
    safe = np.where(dist > 1e-15, dist, 1.0)
    normals = diff / safe[..., None]
    # Coincident centres: separate along +x / -x by index order.
    coincident = (dist <= 1e-15) & both
    if coincident.any():
        sign = np.where(np.arange(len(pos))[:, None] < np.arange(len(pos))[None, :], 1.0, -1.0)
        normals[coincident] = np.stack([sign[coincident], np.zeros(coincident.sum())], axis=-1)
    move = -0.5 * (overlap[..., None] * normals).sum(axis=1)
    return move, overlap.sum(axis=1)


def _wall_project(pos, radii, confined, center, bowl_radius):
    off = pos - center
    dist = np.hypot(off[:, 0], off[:, 1])
    limit = bowl_radius - radii
    over = confined & (dist > limit)
    pen = np.where(over, dist - limit, 0.0)
    if not over.any():
        return pos, pen, np.zeros_like(pos)
    normals = off / np.where(dist > 1e-15, dist, 1.0)[:, None]
    push = normals * pen[:, None]
    return pos - push, pen, push


def in_bowl_mask(state: WorldState) -> np.ndarray:
    """Particles counted as inside the bowl: not spilled, within the rim radius, not fully above it."""
    off = state.positions - state.bowl.center
    planar = np.hypot(off[:, 0], off[:, 1]) <= state.bowl.radius
    return ~state.escaped & planar & ~fully_above(state.heights, state.radii, state.bowl.rim_height)


def step(state: WorldState, action) -> tuple[WorldState, StepInfo]:
    cfg = state.config
    a = np.asarray(action, dtype=float).reshape(2)
    a = np.where(np.isfinite(a), a, 0.0)
    norm = float(np.hypot(a[0], a[1]))
    if norm > cfg.max_action_norm:
        a = a * (cfg.max_action_norm / norm)

    new = state.copy()
    bowl = new.bowl
    k = cfg.contact_stiffness
    R = bowl.radius
    prev_spoon = state.spoon
    spoon = np.clip(prev_spoon + a, -cfg.eta, cfg.eta)
    motion_dir, _ = _unit(spoon - prev_spoon, np.array([1.0, 0.0]))

    # Spoon against the bowl wall.
    spoon_force = np.zeros(2)
    limit = R - cfg.spoon_radius
    n_sw, dist = _unit(spoon - bowl.center, motion_dir)
    if dist > limit:
        spoon_force = k * (dist - limit) * n_sw
        spoon = bowl.center + n_sw * limit
        spoon = np.clip(spoon, -cfg.eta, cfg.eta)

    pos = new.positions
    radii = new.radii
    active = ~new.escaped
    confined = active & ~fully_above(new.heights, radii, bowl.rim_height)
    pos[active] += cfg.particle_damping * new.velocities[active]
    # Concave floor: particles that are already rolling drift back towards the
    # middle; resting ones are held by static friction.
    speed = np.hypot(new.velocities[:, 0], new.velocities[:, 1])
    rolling = confined & (speed > cfg.rest_speed)
    off = pos[rolling] - bowl.center
    dist = np.hypot(off[:, 0], off[:, 1])
    slope = cfg.bowl_curvature * np.maximum(dist - cfg.floor_radius, 0.0)
    pos[rolling] -= off * (slope / np.where(dist > 0, dist, 1.0))[:, None]
    crowd = np.zeros(len(radii))
    wall_push = np.zeros(2)
    lever_force = 0.0
    lever = np.clip((new.heights + radii) / bowl.rim_height, 0.0, 1.0)

    if active.any():
        moved, _ = push_out_of_disc(pos[active], radii[active], spoon, cfg.spoon_radius, motion_dir)
        pos[active] = moved
        for it in range(cfg.relax_iterations):
            move, overlap = _relax_pairs(pos, radii, active)
            pos = pos + move
            moved, _ = push_out_of_disc(pos[active], radii[active], spoon, cfg.spoon_radius, motion_dir)
            pos[active] = moved
            pos, pen, push = _wall_project(pos, radii, confined, bowl.center, R)
            wall_push += push.sum(axis=0)
            lever_force += float((pen * lever).sum())
            if it == 0:
                # Resting contact (up to a tolerance) does not build a pile.
                crowd += np.maximum(overlap + pen - cfg.crowd_tolerance * radii, 0.0)

    wall_force = k * wall_push
    spoon_mag = float(np.hypot(*spoon_force))
    bowl_shift = np.zeros(2)
    if not bowl.fixed:
        torque = spoon_mag + k * lever_force
        bowl.tilt = float(np.clip(
            bowl.tilt + cfg.tilt_gain * torque - cfg.tilt_restoring * bowl.tilt, 0.0, math.pi / 2))
        total = spoon_force + wall_force
        f_dir, f_mag = _unit(total, np.zeros(2))
        if f_mag > cfg.static_friction_threshold:
            bowl_shift = cfg.slide_gain * (f_mag - cfg.static_friction_threshold) / k * f_dir
            bowl.center = bowl.center + bowl_shift
            pos, _, _ = _wall_project(pos, radii, confined, bowl.center, R)
            n_sw, dist = _unit(spoon - bowl.center, motion_dir)
            if dist > limit:
                spoon = np.clip(bowl.center + n_sw * limit, -cfg.eta, cfg.eta)

    # Particles fully above the rim and past it fall out of the bowl for good.
    off = pos - bowl.center
    planar = np.hypot(off[:, 0], off[:, 1])
    newly = active & ~confined & (planar > R)
    # Squeezed particles climb the pile; the others settle back down.
    heights = np.where(crowd > 0, new.heights + cfg.pile_packing_coefficient * crowd,
                       new.heights * (1.0 - cfg.pile_decay))
    heights[newly] = 0.0
    heights[new.escaped] = state.heights[new.escaped]
    frozen = new.escaped
    pos[frozen] = state.positions[frozen]

    new.velocities = np.where(frozen[:, None] | newly[:, None], 0.0, pos - state.positions)
    new.positions = pos
    new.heights = heights
    new.escaped = new.escaped | newly
    new.spoon = spoon
    new.phase = advance_phase(state.phase, cfg.phi_step, cfg.phi_max)
    new.step_count = state.step_count + 1
    assert np.all(np.isfinite(new.positions)) and np.all(np.isfinite(new.heights)), "NaN in world state"
    assert np.all(np.isfinite(new.spoon)) and math.isfinite(bowl.tilt), "NaN in world state"

    disp, inb = displacements(state, new)
    info = StepInfo(displacements=disp, in_bowl=inb, spoon_force=spoon_force,
                    wall_force=wall_force, bowl_shift=bowl_shift, newly_escaped=newly)
    return new, info


def settle(state: WorldState) -> WorldState:
    """Resolve particle overlaps in place (spoon, pairs, wall) without any dynamics."""
    cfg = state.config
    active = ~state.escaped
    if not active.any():
        return state
    confined = active & ~fully_above(state.heights, state.radii, state.bowl.rim_height)
    pos = state.positions
    fallback = np.array([1.0, 0.0])
    for _ in range(4 * cfg.relax_iterations):
        move, _ = _relax_pairs(pos, state.radii, active)
        pos = pos + move
        moved, _ = push_out_of_disc(pos[active], state.radii[active], state.spoon,
                                    cfg.spoon_radius, fallback)
        pos[active] = moved
        pos, _, _ = _wall_project(pos, state.radii, confined, state.bowl.center, state.bowl.radius)
    state.positions = pos
    return state


def observe_d(state: WorldState) -> float:
    off = state.bowl.center - state.bowl.initial_center
    return float(np.hypot(off[0], off[1]))


def observe_theta(state: WorldState) -> float:
    # The bowl always starts upright.
    return float(state.bowl.tilt)


def observe_V(state: WorldState) -> float:
    keep = ~state.escaped
    if not keep.any():
        return 0.0
    ratios = excluded_fraction(state.heights[keep], state.radii[keep], state.bowl.rim_height)
    return float(ratios.max())


def observables(state: WorldState) -> dict[str, float]:
    return {"d": observe_d(state), "theta": observe_theta(state), "V": observe_V(state)}


def displacements(prev: WorldState, next: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle planar displacement and whether the particle is in the bowl in ``next``."""
    if prev.n_particles != next.n_particles:
        raise AssertionError(
            f"particle count changed: {prev.n_particles} -> {next.n_particles}")
    delta = next.positions - prev.positions
    return np.hypot(delta[:, 0], delta[:, 1]), in_bowl_mask(next)


TRAJECTORY_HEADER = ["step", "spoon_x", "spoon_y", "bowl_dx", "bowl_dy", "tilt", "V"]


def trajectory_row(state: WorldState) -> list[float]:
    off = state.bowl.center - state.bowl.initial_center
    row = [state.step_count, *state.spoon.tolist(), *off.tolist(),
           state.bowl.tilt, observe_V(state)]
    return row + state.positions.reshape(-1).tolist()


def write_trajectory_csv(states: Iterable[WorldState], path: str | Path,
                         comment: str | None = None) -> None:
    states = list(states)
    n = states[0].n_particles if states else 0
    header = TRAJECTORY_HEADER + [f"p{i}_{ax}" for i in range(n) for ax in "xy"]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for s in states:
            w.writerow([repr(v) if isinstance(v, float) else v for v in trajectory_row(s)])
