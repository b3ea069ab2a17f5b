from types import SimpleNamespace

import pytest

from sbpfscan import fixtures
from sbpfscan.explore.driver import EXPLORATION_COMPLETE, FINDING_LIMIT, coverage_ratio
from sbpfscan.explore.reach import ReachabilityIndex
from sbpfscan.explore.scheduler import ExplorationComplete, Scheduler, compute_targets
from sbpfscan.symcore.state import ACTIVE, EXITED

from conftest import analyze, static


def _st(pc, t, status=ACTIVE):
    return SimpleNamespace(pc=pc, fork_time=t, id=t, status=status, constraints=())


def test_current_state_kept_while_on_new_code():
    sch = Scheduler()
    a, b = _st(0, 1), _st(8, 2)
    sch.add([a, b])
    assert sch.select_next() is b          # newest uncovered state first
    assert sch.select_next() is b
    sch.covered.add(8)
    assert sch.select_next() is a          # current is on covered code, a is not


def test_falls_back_to_newest_then_finishes():
    sch = Scheduler()
    sch.strategy = "main"
    states = [_st(0, 1), _st(0, 5), _st(0, 3)]
    sch.covered.add(0)
    sch.add(states)
    assert sch.select_next() is states[1]
    for s in states:
        s.status = EXITED
    sch.drop_terminal()
    with pytest.raises(ExplorationComplete):
        sch.select_next()


def test_random_strategy_is_seeded():
    picks = []
    for _ in range(2):
        sch = Scheduler(seed=7)
        sch.covered.add(0)
        sch.add([_st(0, i) for i in range(20)])
        picks.append([sch.select_next().id for _ in range(5)])
    assert picks[0] == picks[1]


def test_deferred_cap_evicts():
    sch = Scheduler(deferred_cap=3)
    sch.add([_st(0, i) for i in range(5)])
    assert len(sch.deferred) == 3 and sch.evicted == 2


def test_targets_per_strategy():
    _, _, marks = static("level4")
    assert compute_targets("cpi", marks) == marks.cpi_sites
    assert compute_targets("main", marks) == marks.dispatch_leaves
    assert compute_targets("random", marks) == frozenset()


def test_reachability_index():
    img, cfg, marks = static("level4")
    (site,) = marks.cpi_sites
    idx = ReachabilityIndex(cfg, marks.cpi_sites)
    assert idx.block_reaches(img.entry)
    assert idx.block_reaches(site)
    after = [i.address for i in img.instructions if i.address > site and i.is_exit]
    assert not idx.block_reaches(after[0])
    assert not ReachabilityIndex(cfg, frozenset()).still_reachable(SimpleNamespace(pc=img.entry, call_stack=()))


SMALL_FIXTURES = [n for n in fixtures.EXPECTED] + ["pruning", "dispatch"]


@pytest.mark.parametrize("name", SMALL_FIXTURES)
def test_pruning_keeps_findings(name):
    _, cfg, _ = static(name)
    assert len(cfg.blocks) <= 200
    on, off = analyze(name), analyze(name, prune=False)
    assert {f.key for f in on.findings} == {f.key for f in off.findings}
    assert on.stats["states_visited"] <= off.stats["states_visited"]


@pytest.mark.parametrize("name", ["pruning", "acpi_const", "acpi_owner_data"])
def test_pruning_visits_fewer_states_when_targets_exist(name):
    on, off = analyze(name), analyze(name, prune=False)
    assert on.stats["states_pruned"] > 0
    assert on.stats["states_visited"] < off.stats["states_visited"]


def test_termination_and_coverage():
    r = analyze("clean")
    assert r.termination_reason == EXPLORATION_COMPLETE
    img, cfg, _ = static("clean")
    ins_ratio, block_ratio = coverage_ratio(r.coverage, img, cfg)
    assert 0 < ins_ratio <= 1 and 0 < block_ratio <= 1
    assert coverage_ratio(r.coverage, img) == ins_ratio
    assert r.coverage_series and r.coverage_series[-1][1] == len(r.coverage)


def test_finding_limit_stops_early():
    r = analyze("level1", finding_limit=1)
    assert r.termination_reason == FINDING_LIMIT and len(r.findings) == 1
