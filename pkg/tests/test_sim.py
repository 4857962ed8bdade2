import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from safeskills import sim
from safeskills.config import ConfigError, SimConfig

actions = st.lists(st.tuples(st.floats(-0.03, 0.03), st.floats(-0.03, 0.03)),
                   min_size=1, max_size=40)


def cap_fraction_oracle(height, radius, rim):
    # Numerically integrate disc slices of the sphere above the rim plane.
    lo = min(max(rim - height, -radius), radius)
    vol, _ = quad(lambda z: math.pi * (radius ** 2 - z ** 2), lo, radius)
    return vol / (4.0 / 3.0 * math.pi * radius ** 3)


def circle_push_oracle(point, center, reach):
    # Independent geometry: a disc overlapping a moved disc ends tangent to it.
    px, py = point
    cx, cy = center
    dx, dy = px - cx, py - cy
    n = math.sqrt(dx * dx + dy * dy)
    if n >= reach:
        return point
    return (cx + dx / n * reach, cy + dy / n * reach)


def single_particle_world(pos, cfg=None):
    cfg = cfg or SimConfig(n_particles=1)
    w = sim.reset(cfg, "fixed", seed=0)
    w.positions = np.array([pos], dtype=float)
    return w


def test_reset_fixed_and_paper_count():
    w = sim.reset(SimConfig(), "fixed")
    assert w.bowl.fixed and w.phase == 0 and np.array_equal(w.spoon, [0.0, 0.0])
    cfg = SimConfig(n_particles=40, particle_radius=0.007, floor_radius=0.055)
    w = sim.reset(cfg, "unrestricted")
    assert w.n_particles == 40 and not w.bowl.fixed
    off = np.hypot(*w.positions.T)
    assert np.all(off + w.radii <= cfg.bowl_radius)


def test_reset_errors():
    with pytest.raises(ConfigError, match="do not fit"):
        sim.reset(SimConfig(n_particles=500))
    with pytest.raises(ConfigError):
        sim.reset(SimConfig(), "floating")


def test_idle_without_contact_changes_nothing():
    w = sim.reset(SimConfig(), "unrestricted", seed=3)
    nxt, info = sim.step(w, (0.0, 0.0))
    assert np.array_equal(nxt.positions, w.positions)
    assert np.array_equal(nxt.bowl.center, w.bowl.center) and nxt.bowl.tilt == 0.0
    assert not info.displacements.any()


def test_spoon_push_matches_circle_oracle():
    cfg = SimConfig(n_particles=1)
    reach = cfg.particle_radius + cfg.spoon_radius
    ang = 0.45
    start = (reach * math.cos(ang), reach * math.sin(ang))
    w = single_particle_world(start, cfg)
    nxt, _ = sim.step(w, (0.01, 0.0))
    expect = circle_push_oracle(start, (0.01, 0.0), reach)
    assert np.array_equal(nxt.spoon, [0.01, 0.0])
    assert np.allclose(nxt.positions[0], expect, rtol=0, atol=1e-15)


@given(x=st.floats(-0.05, 0.05), y=st.floats(-0.05, 0.05))
def test_push_out_of_disc_matches_oracle(x, y):
    reach = 0.02
    pts, depth = sim.push_out_of_disc(np.array([[x, y]]), np.array([0.01]), np.zeros(2), 0.01,
                                      np.array([1.0, 0.0]))
    if math.hypot(x, y) < 1e-12:
        return
    assert np.allclose(pts[0], circle_push_oracle((x, y), (0.0, 0.0), reach), atol=1e-15)
    assert depth[0] == pytest.approx(max(reach - math.hypot(x, y), 0.0), abs=1e-15)


@given(h=st.floats(-0.05, 0.1), r=st.floats(0.002, 0.02))
def test_excluded_fraction_matches_cap_integration(h, r):
    rim = 0.04
    assert float(sim.excluded_fraction(h, r, rim)) == pytest.approx(
        cap_fraction_oracle(h, r, rim), abs=1e-9)


def test_spill_observable_examples():
    w = sim.reset(SimConfig(), "fixed")
    assert sim.observe_V(w) == 0.0
    w.heights[2] = w.bowl.rim_height
    assert sim.observe_V(w) == pytest.approx(0.5, abs=1e-15)


@given(idx=st.integers(0, 9), a=st.floats(0, 0.1), b=st.floats(0, 0.1))
def test_spill_observable_monotone_in_height(idx, a, b):
    w = sim.reset(SimConfig(), "fixed")
    lo, hi = sorted([a, b])
    w.heights[idx] = lo
    v_lo = sim.observe_V(w)
    w.heights[idx] = hi
    assert sim.observe_V(w) >= v_lo


def test_distance_and_tilt_observables():
    w = sim.reset(SimConfig(), "unrestricted")
    assert sim.observe_d(w) == 0.0 and sim.observe_theta(w) == 0.0
    w.bowl.center = np.array([0.03, 0.04])
    assert sim.observe_d(w) == pytest.approx(0.05)


@given(acts=actions)
@settings(max_examples=30, deadline=None)
def test_fixed_setup_never_moves_bowl(acts):
    w = sim.reset(SimConfig(), "fixed", seed=1)
    for a in acts:
        w, _ = sim.step(w, a)
        assert np.array_equal(w.bowl.center, w.bowl.initial_center) and w.bowl.tilt == 0.0


@given(acts=actions, setup=st.sampled_from(sim.SETUPS))
@settings(max_examples=30, deadline=None)
def test_step_invariants(acts, setup):
    cfg = SimConfig()
    w = sim.reset(cfg, setup, seed=2)
    n = w.n_particles
    for a in acts:
        prev = w
        w, info = sim.step(w, a)
        assert w.n_particles == n and 0 <= w.phase < cfg.phi_max
        assert np.all(np.abs(w.spoon) <= cfg.eta)
        assert np.hypot(*(w.spoon - prev.spoon)) <= cfg.max_action_norm * (1 + 1e-12) + \
            np.hypot(*info.bowl_shift)
        assert np.all(info.displacements >= 0)
        assert not (prev.escaped & ~w.escaped).any()


@given(acts=actions)
@settings(max_examples=15, deadline=None)
def test_same_seed_same_actions_is_bitwise_identical(acts):
    runs = []
    for _ in range(2):
        w = sim.reset(SimConfig(), "unrestricted", seed=9)
        for a in acts:
            w, _ = sim.step(w, a)
        runs.append(w)
    a, b = runs
    for name in ("spoon", "positions", "heights", "escaped", "velocities"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.bowl.center.tobytes() == b.bowl.center.tobytes() and a.bowl.tilt == b.bowl.tilt


def test_nonfinite_action_is_treated_as_zero():
    w = sim.reset(SimConfig(), "fixed")
    nxt, _ = sim.step(w, (np.nan, np.inf))
    assert np.array_equal(nxt.spoon, w.spoon)


def test_phase_wraps():
    assert sim.advance_phase(49, 1, 50) == 0
    assert sim.advance_phase(10, 3, 50) == 13
    with pytest.raises(ConfigError):
        sim.advance_phase(0, 1, 0)


def test_pushing_into_wall_slides_and_tilts_unrestricted_bowl():
    w = sim.reset(SimConfig(), "unrestricted")
    for _ in range(40):
        w, _ = sim.step(w, (0.01, 0.0))
    assert sim.observe_d(w) > 0.0 and sim.observe_theta(w) > 0.0
    assert w.bowl.center[0] > 0.0


def test_crowding_raises_pile():
    cfg = SimConfig()
    w = sim.reset(cfg, "fixed", seed=4)
    peak = 0.0
    for t in range(200):
        ang = 0.35 * t
        target = 0.05 * np.array([math.cos(ang), math.sin(ang)])
        w, _ = sim.step(w, np.clip(target - w.spoon, -0.01, 0.01))
        peak = max(peak, float(w.heights.max()))
    assert peak > 0.0


def test_displacements_match_elementwise_oracle():
    rng = np.random.default_rng(11)
    a = sim.reset(SimConfig(), "fixed", seed=5)
    b = a.copy()
    b.positions = a.positions + rng.normal(scale=0.01, size=a.positions.shape)
    b.heights = rng.uniform(0, 0.06, size=a.n_particles)
    disp, inb = sim.displacements(a, b)
    for k in range(a.n_particles):
        dx, dy = b.positions[k] - a.positions[k]
        assert disp[k] == pytest.approx(math.sqrt(dx * dx + dy * dy), abs=1e-15)
        planar = math.hypot(*(b.positions[k] - b.bowl.center)) <= b.bowl.radius
        above = b.heights[k] - b.radii[k] >= b.bowl.rim_height
        assert inb[k] == (planar and not above)


def test_displacement_example_and_count_mismatch():
    a = single_particle_world((0.0, 0.0))
    b = a.copy()
    b.positions = np.array([[0.01, 0.0]])
    disp, inb = sim.displacements(a, b)
    assert disp[0] == pytest.approx(0.01) and inb[0]
    with pytest.raises(AssertionError):
        sim.displacements(a, sim.reset(SimConfig(n_particles=2)))


def test_trajectory_csv(tmp_path):
    w = sim.reset(SimConfig(n_particles=2))
    states = [w]
    for _ in range(3):
        w, _ = sim.step(w, (0.005, 0.0))
        states.append(w)
    path = tmp_path / "traj.csv"
    sim.write_trajectory_csv(states, path, comment="config_hash=x")
    lines = path.read_text().splitlines()
    assert lines[1] == "step,spoon_x,spoon_y,bowl_dx,bowl_dy,tilt,V,p0_x,p0_y,p1_x,p1_y"
    assert len(lines) == 2 + 4


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(eta=0.0)
    with pytest.raises(ConfigError):
        replace(SimConfig(), floor_radius=1.0)
