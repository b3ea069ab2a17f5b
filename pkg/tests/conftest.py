import random
from functools import lru_cache

import pytest

from sbpfscan import fixtures
from sbpfscan.bytecode.cfg import build_cfg
from sbpfscan.bytecode.elf import load_program
from sbpfscan.bytecode.marks import compute_marks
from sbpfscan.config import AnalysisConfig
from sbpfscan.explore.driver import run_analysis
from sbpfscan.runtime.layout import ConcreteAccount, serialize

SMALL = dict(max_accounts=4, max_data=64, max_ix=64, global_timeout=120)


def small_config(**kw) -> AnalysisConfig:
    return AnalysisConfig(**{**SMALL, **kw})


@lru_cache(maxsize=None)
def image(name):
    return load_program(fixtures.build(name))


@lru_cache(maxsize=None)
def static(name):
    img = image(name)
    cfg = build_cfg(img)
    return img, cfg, compute_marks(img, cfg)


_runs = {}


def analyze(name, **kw):
    """Analysis result for a fixture, cached per distinct configuration."""
    key = (name, tuple(sorted(kw.items())))
    if key not in _runs:
        _runs[key] = run_analysis(image(name), small_config(**kw))
    return _runs[key]


def random_inputs(img, rng, count=3, n_accounts=4):
    """Plausible concrete inputs: mostly program-owned accounts, account 0 naming accounts 1 and 2."""
    pid = bytes.fromhex(img.digest)
    out = []
    for _ in range(count):
        keys = [rng.randbytes(32) for _ in range(n_accounts)]
        accs = []
        for i in range(n_accounts):
            data = keys[1] + keys[2] if i == 0 else rng.randbytes(rng.randrange(40))
            owner = pid if rng.random() < 0.8 else keys[0]
            accs.append(ConcreteAccount(keys[i], owner, rng.randrange(10**9), data,
                                        rng.randrange(2), rng.randrange(2), 0))
        ix = bytes([rng.randrange(3)]) + rng.randbytes(15)
        out.append(serialize(accs, ix, pid))
    return out


@pytest.fixture
def rng():
    return random.Random(1234)


def lockstep(img, blob, ctx, limit=20000):
    """Run the symbolic engine on a concrete input next to the reference VM; return both."""
    from sbpfscan.symcore.concrete import ConcreteVM
    from sbpfscan.symcore.engine import step
    from sbpfscan.symcore.state import ACTIVE

    vm = ConcreteVM(img, blob)
    s = ctx.concrete_state(blob)
    n = 0
    while vm.status == "running" and s.status == ACTIVE and n < limit:
        assert s.pc == vm.pc, f"pc diverged at step {n}"
        vm.step()
        succ = step(s, ctx)
        assert len(succ) == 1, f"concrete input forked at {vm.pc:#x}"
        s = succ[0]
        n += 1
        if s.status == ACTIVE:
            assert s.regs == vm.regs, f"registers diverged at step {n}"
    return s, vm


# one PASS/FAIL line per acceptance criterion in the terminal summary
_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1].split("[")[0]
    if report.when == "call" or report.failed:
        prev = _criteria.get(name, "PASS")
        _criteria[name] = "FAIL" if report.failed or prev == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[0])):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {num:>2} {label.replace('_', ' ')}: {_criteria[name]}")
