import json

import pytest
from hypothesis import given, strategies as st

from cgforge.scheduler import (
    BudgetError, ScheduleError, Phase, Schedule, build_schedule, check_schedule, naive_traffic,
    split_multiplicities, working_set,
)
from cgforge.tpspec import validate
from problems import problems


@pytest.fixture
def wide_problem():
    # x + y alone exceed small budgets, forcing the greedy strategy
    return validate("64x2e + 64x1o + 32x3e", "1x1o + 1x2e", "64x2o + 64x3o + 32x1o + 32x1e",
                    [(1, 1, 1, "B"), (1, 1, 2, "B"), (2, 2, 3, "C"), (3, 2, 4, "C"), (2, 1, 4, "C")])


def floor_of(p):
    return max((working_set(r) for r in split_multiplicities(p).resolved), default=1)


def test_large_budget_is_single_phase(example_problem):
    s = build_schedule(example_problem, 100_000)
    check_schedule(s)
    assert s.strategy == "single_phase" and len(s.phases) == 1
    t = s.traffic
    assert (t.loads_words, t.stores_words, t.flops) == (1738, 656, 28992)


def test_example_naive_traffic(example_problem):
    t = naive_traffic(example_problem)
    assert (t.loads_words, t.stores_words) == (2061, 656)


@pytest.mark.parametrize("group_z, phases", [(True, 2), (False, 3)])
def test_stream_z_on_example(example_problem, group_z, phases):
    s = build_schedule(example_problem, 1642, group_z=group_z)
    check_schedule(s)
    assert s.strategy == "stream_z" and len(s.phases) == phases
    assert s.traffic.loads_words == 1738


def test_example_too_small_budget(example_problem):
    with pytest.raises(BudgetError) as exc:
        build_schedule(example_problem, 1000)
    assert exc.value.need > 1000


def test_greedy_schedule_replays(wide_problem):
    b = floor_of(wide_problem)
    s = build_schedule(wide_problem, b)
    assert s.strategy == "greedy" and len(s.phases) > 1
    check_schedule(s)
    assert max(ph.resident_words for ph in s.phases) <= b


def test_forced_infeasible_strategy_raises(wide_problem):
    with pytest.raises(ValueError):
        build_schedule(wide_problem, floor_of(wide_problem), strategy="single_phase")
    with pytest.raises(ValueError):
        build_schedule(wide_problem, 10**6, strategy="bogus")


def test_checker_catches_missing_store(example_problem):
    s = build_schedule(example_problem, 100_000)
    ph = s.phases[0]
    broken = Phase(ph.loads, ph.z_ranges, ph.stores[1:], ph.subkernels, ph.resident_words, ph.scratch_words)
    bad = Schedule(s.problem, s.source, (broken,), s.strategy, s.budget_words, s.zero_fill)
    with pytest.raises(ScheduleError):
        check_schedule(bad)


def test_checker_catches_missing_load(example_problem):
    s = build_schedule(example_problem, 100_000)
    ph = s.phases[0]
    broken = Phase(ph.loads[1:], ph.z_ranges, ph.stores, ph.subkernels, ph.resident_words, ph.scratch_words)
    bad = Schedule(s.problem, s.source, (broken,), s.strategy, s.budget_words, s.zero_fill)
    with pytest.raises(ScheduleError):
        check_schedule(bad)


def test_deterministic_json(wide_problem):
    a = build_schedule(wide_problem, 2000).to_json()
    b = build_schedule(wide_problem, 2000).to_json()
    assert a == b
    d = json.loads(a)
    assert d["strategy"] == "greedy" and len(d["phases"]) > 1


@given(problems(max_mul=40), st.floats(0, 1), st.sampled_from([None, "stream_z", "greedy"]))
def test_schedule_invariants(p, frac, strategy):
    lo = floor_of(p)
    budget = int(lo + frac * (p.dim_x + p.dim_y + p.dim_z + p.total_weights))
    try:
        s = build_schedule(p, budget, strategy=strategy)
    except ValueError:
        assert strategy == "stream_z"  # only stream_z can be infeasible above the floor
        return
    check_schedule(s)
    sp = s.problem
    t, naive = s.traffic, naive_traffic(p)
    assert t.flops == naive.flops
    # every input word used is loaded at least once and every output word is stored
    touched = {("w", i) for r in sp.resolved for i in r.weight_indices().tolist()}
    assert t.loads_words >= len(touched)
    assert t.stores_words >= p.dim_z
    if s.strategy in ("single_phase", "stream_z"):
        assert t.loads_words <= naive.loads_words


def test_budget_error_names_subkernel():
    p = validate("32x4e", "1x4e", "32x4e", [(1, 1, 1, "C")])
    with pytest.raises(BudgetError) as exc:
        build_schedule(p, 100)
    assert exc.value.subkernel == 0 and exc.value.budget == 100
    assert "subkernel 0" in str(exc.value)
