import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safeskills import sim
from safeskills.arbitration import (HALT, TRACE_HEADER, ArbitrationError, EpisodeAborted,
                                    PriorityTable, run_episode, select)
from safeskills.config import DEFAULT_PRIORITY, ConfigError, SimConfig
from safeskills.nn import DenseNet
from safeskills.risk import RiskMonitor
from safeskills.skills import Policy, SkillLibrary, initial_procedure, make_skill, register_skill

CFG = SimConfig()
RISKS = ("slide", "overturn", "spill")


def with_random_policy(name, seed=0):
    skill = make_skill(name)
    scale = skill.obs_scale(CFG)
    net = DenseNet.create([len(scale), 8, 2], ["relu", "radial_tanh"], np.random.default_rng(seed))
    return skill.with_policy(Policy(net, scale, CFG.max_action_norm))


def library(*names):
    lib = SkillLibrary()
    for i, n in enumerate(names):
        lib = register_skill(lib, with_random_policy(n, i))
    return lib


L4 = library("stir", "spill", "slide", "overturn")


def brute_force(vec, priority):
    # The rule written out by hand: scan from most to least important.
    active = [r for r in priority if vec[r] == 1]
    return "stir" if not active else active[0]


def test_priority_table_default_order():
    assert tuple(DEFAULT_PRIORITY) == ("overturn", "spill", "slide")
    with pytest.raises(ConfigError):
        PriorityTable(("spill", "spill"))


def test_select_examples():
    assert select({"slide": 0, "overturn": 0, "spill": 0}, DEFAULT_PRIORITY, L4).name == "stir"
    assert select({"slide": 1, "overturn": 0, "spill": 1}, DEFAULT_PRIORITY, L4).name == "spill"
    assert select({"slide": 1, "overturn": 1, "spill": 1}, DEFAULT_PRIORITY, L4).name == "overturn"


@pytest.mark.parametrize("priority", list(itertools.permutations(RISKS)))
def test_select_exhaustive_truth_table(priority):
    for bits in itertools.product([0, 1], repeat=3):
        vec = dict(zip(RISKS, bits))
        assert select(vec, priority, L4).name == brute_force(vec, priority)


def test_missing_prevention_skill_names_risk():
    l2 = library("stir", "spill")
    with pytest.raises(ArbitrationError, match="overturn") as info:
        select({"slide": 0, "overturn": 1, "spill": 1}, DEFAULT_PRIORITY, l2)
    assert info.value.risk_id == "overturn"


def test_priority_restricted_to_library():
    l2 = library("stir", "spill")
    table = PriorityTable.for_library(DEFAULT_PRIORITY, l2)
    assert table.order == ("spill",)
    assert select({"slide": 1, "overturn": 1, "spill": 0}, table, l2).name == "stir"
    with pytest.raises(ConfigError):
        PriorityTable.for_library(("slide",), l2)


@given(st.lists(st.fixed_dictionaries({r: st.integers(0, 1) for r in RISKS}), min_size=1, max_size=20))
def test_switch_back_to_base_without_latching(seq):
    for vec in seq:
        select(vec, DEFAULT_PRIORITY, L4)
    assert select(dict.fromkeys(RISKS, 0), DEFAULT_PRIORITY, L4).name == "stir"


@given(bits=st.tuples(*[st.integers(0, 1)] * 3), extra=st.sampled_from(RISKS))
def test_priority_monotonicity(bits, extra):
    rank = {r: i for i, r in enumerate(DEFAULT_PRIORITY)}
    vec = dict(zip(RISKS, bits))
    before = select(vec, DEFAULT_PRIORITY, L4).name
    after = select({**vec, extra: 1}, DEFAULT_PRIORITY, L4).name
    if before != "stir":
        assert rank[after] <= rank[before]
    if rank[extra] < rank.get(before, len(rank)):
        assert after == extra


def test_select_is_pure():
    vec = {"slide": 1, "overturn": 0, "spill": 0}
    assert select(vec, DEFAULT_PRIORITY, L4) is select(dict(vec), DEFAULT_PRIORITY, L4)
    assert vec == {"slide": 1, "overturn": 0, "spill": 0}


def test_fixed_base_only_episode_selects_base_throughout():
    lib = library("stir")
    w = sim.reset(CFG, "fixed", seed=1)
    metrics, trace, _ = run_episode(lib, PriorityTable.for_library(DEFAULT_PRIORITY, lib),
                                    RiskMonitor.from_specs(), w, 100)
    assert len(trace) == 100 and set(trace.skills) == {"stir"}
    assert metrics.steps == 100 and metrics.slide_d_mean == 0.0 and metrics.overturn_theta_mean == 0.0


def test_slide_start_selects_slide_prevention_first():
    w = initial_procedure(sim.reset(CFG, "unrestricted", seed=2), "slide", np.random.default_rng(2))
    _, trace, _ = run_episode(L4, DEFAULT_PRIORITY, RiskMonitor.from_specs(), w, 5)
    assert trace.skills[0] == "slide"
    assert trace.records[0].rho["slide"] == 1


def test_episodes_are_deterministic():
    out = []
    for _ in range(2):
        w = sim.reset(CFG, "unrestricted", seed=3)
        m, trace, end = run_episode(L4, DEFAULT_PRIORITY, RiskMonitor.from_specs(), w, 60)
        out.append((trace.to_csv(), m.stir_reward, end.positions.tobytes()))
    assert out[0] == out[1]


def test_trace_csv_layout():
    w = sim.reset(CFG, "fixed", seed=4)
    _, trace, _ = run_episode(L4, DEFAULT_PRIORITY, RiskMonitor.from_specs(), w, 3)
    lines = trace.to_csv(comment="config_hash=q").splitlines()
    assert lines[0] == "# config_hash=q" and lines[1] == ",".join(TRACE_HEADER)
    assert len(lines) == 2 + 3


def test_unpreventable_risk_halts_spoon():
    lib = library("stir")
    w = initial_procedure(sim.reset(CFG, "unrestricted", seed=5), "slide", np.random.default_rng(5))
    m, trace, end = run_episode(lib, DEFAULT_PRIORITY, RiskMonitor.from_specs(), w, 10)
    assert set(trace.skills) == {HALT} and "slide" in m.halted
    assert np.array_equal(end.spoon, w.spoon)


class Exploding:
    name = "stir"

    def __init__(self, at):
        self.at, self.calls = at, 0

    def act(self, state):
        self.calls += 1
        if self.calls > self.at:
            raise FloatingPointError("policy produced garbage")
        return np.zeros(2)


def test_failure_mid_episode_keeps_partial_trace():
    bad = Exploding(4)
    lib = library("stir")
    lib.base_skills = lambda: [bad]
    with pytest.raises(EpisodeAborted) as info:
        run_episode(lib, (), RiskMonitor.from_specs(), sim.reset(CFG, "fixed"), 10)
    assert len(info.value.trace) == 4 and info.value.metrics.steps == 4
