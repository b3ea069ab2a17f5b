import pytest
import z3
from hypothesis import given, settings
from hypothesis import strategies as st

from sbpfscan import fixtures
from sbpfscan.bytecode.asm import assemble
from sbpfscan.bytecode.elf import load_program
from sbpfscan.errors import MergeRefused
from sbpfscan.explore.driver import count_deserialization_states
from sbpfscan.runtime.context import AnalysisContext
from sbpfscan.symcore.engine import merge, merge_tree, step
from sbpfscan.symcore.state import ACTIVE, EXITED

from conftest import analyze, image, lockstep, random_inputs, small_config


def _deser_counts(n, merge_on):
    cfg = small_config(max_accounts=n)
    return count_deserialization_states(image("deser"), cfg, merge=merge_on)


@pytest.mark.parametrize("n", [1, 3, 10])
def test_merge_leaves_one_state_per_round(n):
    stats = _deser_counts(n, True)
    assert stats.arrivals == [8] * n
    assert stats.merged == [1] * n


@pytest.mark.parametrize("n", [1, 2, 3])
def test_without_merging_states_multiply(n):
    stats = _deser_counts(n, False)
    assert stats.merged[-1] == 8 ** n
    assert stats.arrivals == [8 ** (k + 1) for k in range(n)]


JOIN = """
.text
entrypoint:
    add64 r1, {ix}
    ldxb r2, [r1+0]
    ldxb r3, [r1+1]
    ldxb r4, [r1+2]
    mov64 r6, 0
    jgt r2, 100, +1
    add64 r6, 1
    jeq r3, 7, +2
    add64 r6, r3
    stxb [r10-1], r4
    jset r4, 1, +1
    mul64 r6, 3
join:
    mov64 r0, r6
    exit
"""


def _ix_offset():
    img = load_program(assemble(".text\nentrypoint:\n exit\n"))
    return AnalysisContext(img, small_config()).layout.ix_offset


def _run_to_join():
    off = _ix_offset()
    img = load_program(assemble(JOIN.format(ix=off)))
    ctx = AnalysisContext(img, small_config())
    join = max(i.address for i in img.instructions) - 8
    work, done = [ctx.initial_state()], []
    while work:
        s = work.pop()
        if s.pc == join:
            done.append(s)
            continue
        work.extend(x for x in step(s, ctx) if x.status == ACTIVE)
    return ctx, done


_CTX, _PATHS = _run_to_join()
IX0 = _CTX.tx.var("ix_0", 64)


def _at(expr, value):
    if isinstance(expr, int):
        return expr
    return z3.simplify(z3.substitute(expr, (IX0, z3.BitVecVal(value, 64)))).as_long()


def _holds(cons, value):
    return all(z3.is_true(z3.simplify(z3.substitute(c, (IX0, z3.BitVecVal(value, 64)))))
               for c in cons)


def test_join_program_forks_into_eight_paths():
    assert len(_PATHS) == 8


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255), st.integers(0, 2**40 - 1))
def test_merged_state_agrees_with_the_path_that_holds(a, b, c, rest):
    value = a | b << 8 | c << 16 | rest << 24
    (merged,) = merge_tree([p.copy() for p in _PATHS], _CTX)
    flat = merge([p.copy() for p in _PATHS], _CTX)
    live = [p for p in _PATHS if _holds(p.constraints, value)]
    assert len(live) == 1
    (path,) = live
    stack = merged.memory.region("stack")
    for m in (merged, flat):
        assert _holds(m.constraints, value)
        assert [_at(r, value) for r in m.regs] == [_at(r, value) for r in path.regs]
        got = m.memory.get(stack, 4095)
        want = path.memory.get(stack, 4095)
        assert _at(_byte(got), value) == _at(_byte(want), value)


def _byte(b):
    from sbpfscan.symcore.values import byte_to_z3
    return b if isinstance(b, int) else byte_to_z3(b)


def test_merge_refuses_mismatched_states():
    a, b = _PATHS[0].copy(), _PATHS[1].copy()
    b.pc += 8
    with pytest.raises(MergeRefused):
        merge([a, b])


def test_concrete_branch_does_not_fork():
    img = load_program(assemble(".text\nentrypoint:\n mov64 r2, 5\n jgt r2, 4, +1\n "
                                "mov64 r0, 1\n exit\n"))
    ctx = AnalysisContext(img, small_config())
    s = ctx.initial_state()
    while s.status == ACTIVE:
        (s,) = step(s, ctx)
    assert s.status == EXITED and s.exit_code == 0


def test_symbolic_division_forks_a_fault_path():
    img = load_program(assemble(f".text\nentrypoint:\n add64 r1, {_ix_offset()}\n"
                                " ldxdw r2, [r1+0]\n mov64 r0, 9\n div64 r0, r2\n exit\n"))
    ctx = AnalysisContext(img, small_config())
    s = ctx.initial_state()
    for _ in range(3):
        (s,) = step(s, ctx)
    ok, bad = step(s, ctx)
    assert bad.abort_reason == "division-by-zero"
    assert ok.status == ACTIVE


@pytest.mark.parametrize("name", fixtures.NAMES)
def test_engine_matches_reference_interpreter(name, rng):
    img = image(name)
    ctx = AnalysisContext(img, small_config(format_skip=False))
    blobs = random_inputs(img, rng, count=3)
    if name in fixtures.EXPECTED:
        blobs += [f.exploit.input_bytes for f in analyze(name).findings if f.exploit]
    for blob in blobs:
        s, vm = lockstep(img, blob, ctx)
        assert vm.status != "running"
        if vm.status == "exited":
            assert s.status == EXITED and s.exit_code == vm.exit_code
        else:
            assert s.status != ACTIVE
