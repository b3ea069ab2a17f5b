import pytest
import z3
from hypothesis import given, settings
from hypothesis import strategies as st

from sbpfscan.errors import ContradictionError
from sbpfscan.symcore import values as V
from sbpfscan.symcore.solver import NO, YES, SolverHandle, slice_constraints, to_smtlib

u64 = st.integers(0, 2**64 - 1)
edgy = st.one_of(u64, st.sampled_from([0, 1, 2**31, 2**32 - 1, 2**63, 2**64 - 1, 0x80000000]))
OPS = ["add", "sub", "mul", "div", "mod", "or", "and", "xor", "lsh", "rsh", "arsh",
       "mov", "neg", "udiv", "urem", "lmul", "uhmul", "shmul", "sdiv", "srem"]
X, Y = z3.BitVecs("x y", 64)


def _sym_eval(name, bits, a, b):
    r = V.alu(name, bits, X, Y)
    if isinstance(r, int):
        return r
    return z3.simplify(z3.substitute(r, (X, z3.BitVecVal(a, 64)),
                                     (Y, z3.BitVecVal(b, 64)))).as_long()


def _ref(name, bits, a, b):
    """Independent reference written against the instruction semantics."""
    m = (1 << bits) - 1
    a, b = a & m, b & m
    s = lambda v: v - (1 << bits) if v >> (bits - 1) else v
    r = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "lmul": lambda: a * b,
        "or": lambda: a | b, "and": lambda: a & b, "xor": lambda: a ^ b,
        "lsh": lambda: a << (b % bits), "rsh": lambda: a >> (b % bits),
        "arsh": lambda: s(a) >> (b % bits), "mov": lambda: b, "neg": lambda: -a,
        "div": lambda: a // b, "udiv": lambda: a // b, "mod": lambda: a % b, "urem": lambda: a % b,
        "uhmul": lambda: (a * b) >> 64,
        "shmul": lambda: (s(a) * s(b)) >> 64,
        "sdiv": lambda: _trunc_div(s(a), s(b)),
        "srem": lambda: s(a) - _trunc_div(s(a), s(b)) * s(b),
    }[name]() & m
    if bits == 32 and name in ("add", "sub", "mul") and r >> 31:
        r |= 0xFFFFFFFF00000000
    return r


def _trunc_div(p, q):
    sign = -1 if (p < 0) != (q < 0) else 1
    return sign * (abs(p) // abs(q))


def _defined(name, bits, b, a):
    m = (1 << bits) - 1
    if name in V.DIVIDING and b & m == 0:
        return False
    if name in ("sdiv", "srem") and b & m == m and a & m == 1 << (bits - 1):
        return False
    if name in ("uhmul", "shmul") and bits == 32:
        return False
    return True


@settings(max_examples=600, deadline=None)
@given(st.sampled_from(OPS), st.sampled_from([32, 64]), edgy, edgy)
def test_alu_concrete_and_symbolic_agree_with_reference(name, bits, a, b):
    if not _defined(name, bits, b, a):
        return
    want = _ref(name, bits, a, b)
    assert V.alu(name, bits, a, b) == want
    assert _sym_eval(name, bits, a, b) == want


@pytest.mark.parametrize("name", sorted(V.DIVIDING))
def test_division_by_zero_is_reported(name):
    with pytest.raises(V.DivisionByZero):
        V.alu(name, 64, 5, 0)


def test_alu32_sign_extension_rules():
    assert V.alu("add", 32, 0x7FFFFFFF, 1) == 0xFFFFFFFF80000000
    assert V.alu("sub", 32, 0, 1) == 2**64 - 1
    assert V.alu("or", 32, 0x80000000, 0) == 0x80000000
    assert V.alu("mov", 32, 0, 0xFFFFFFFFFFFFFFFF) == 0xFFFFFFFF


CODES = [0x10, 0x50, 0x20, 0x30, 0xA0, 0xB0, 0x60, 0x70, 0xC0, 0xD0, 0x40]


@settings(max_examples=400, deadline=None)
@given(st.sampled_from(CODES), edgy, edgy)
def test_compare_symbolic_matches_concrete(code, a, b):
    c = V.compare(code, X, Y)
    got = z3.simplify(z3.substitute(c, (X, z3.BitVecVal(a, 64)), (Y, z3.BitVecVal(b, 64))))
    assert z3.is_true(got) == V.compare(code, a, b)


def test_compare_signedness():
    assert V.compare(0x20, 2**64 - 1, 1) is True
    assert V.compare(0x60, 2**64 - 1, 1) is False
    assert V.compare(0x40, 6, 2) is True


@settings(max_examples=200, deadline=None)
@given(u64, st.sampled_from([16, 32, 64]))
def test_byteswap(v, bits):
    n = bits // 8
    want = int.from_bytes((v & ((1 << bits) - 1)).to_bytes(n, "little"), "big")
    assert V.byteswap(v, bits, True) == want
    assert V.byteswap(v, bits, False) == v & ((1 << bits) - 1)
    sym = V.byteswap(X, bits, True)
    assert z3.simplify(z3.substitute(sym, (X, z3.BitVecVal(v, 64)))).as_long() == want


@settings(max_examples=200, deadline=None)
@given(u64, st.sampled_from([1, 2, 4, 8]))
def test_bytes_roundtrip(v, width):
    bs = V.value_to_bytes(v, width)
    assert V.bytes_to_value(bs) == v & ((1 << (8 * width)) - 1)


def test_symbolic_field_reassembles_to_variable():
    bs = V.value_to_bytes(X, 8)
    assert V.bytes_to_value(bs).eq(X)
    part = V.bytes_to_value(bs[2:4])
    assert V.free_names(part) == {"x"}


def test_fold_and_ite():
    assert V.fold(X - X) == 0
    assert V.ite(True, 1, 2) == 1
    assert V.ite(X == 1, 3, 3) == 3
    assert V.free_names(V.ite(X == 1, Y, 0)) == {"x", "y"}


def test_solver_verdicts_and_cache():
    s = SolverHandle(timeout_ms=2000)
    cs = [z3.ULT(X, 10)]
    assert s.check(cs, X == 5) == YES
    assert s.check(cs, X == 50) == NO
    before = s.queries
    assert s.check(cs, X == 5) == YES
    assert s.queries == before
    assert s.check(cs, z3.BoolVal(False)) == NO


def test_slicing_drops_unrelated_constraints():
    z = z3.BitVec("z", 64)
    cs = [X == 1, Y == X + 1, z == 9]
    assert slice_constraints(cs, Y == 2) == cs[:2]
    assert slice_constraints(cs, None) == cs


def test_model_and_concretize():
    s = SolverHandle()
    assert s.concretize([X + 3 == 10], [X, 4]) == [7, 4]
    with pytest.raises(ContradictionError):
        s.model([X == 1, X == 2])


def test_smtlib_dump_parses_back():
    text = to_smtlib([z3.ULT(X, 4), Y == X * 2], "demo")
    assert text.startswith("; demo")
    parsed = z3.parse_smt2_string(text)
    s = z3.Solver()
    s.add(parsed)
    assert s.check() == z3.sat
