import struct

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sbpfscan.bytecode import isa
from sbpfscan.errors import DecodeError

V1 = sorted(isa.legal_opcodes("v1"))
V2_ONLY = sorted(isa.legal_opcodes("v2") - isa.legal_opcodes("v1"))


@st.composite
def instructions(draw, dialect="v2"):
    op = draw(st.sampled_from(sorted(isa.legal_opcodes(dialect))))
    dst = draw(st.integers(0, 10))
    src = draw(st.integers(0, 10))
    off = draw(st.integers(-(2**15), 2**15 - 1))
    if op == isa.LDDW:
        imm = draw(st.integers(0, 2**64 - 1))
    elif op in (0xD4, 0xDC):
        imm = draw(st.sampled_from([16, 32, 64]))
    else:
        imm = draw(st.integers(-(2**31), 2**31 - 1))
    return isa.Instruction(op, dst, src, off, imm)


def _canonical(ins):
    imm = ins.imm if ins.opcode == isa.LDDW else isa.to_signed(ins.imm, 32)
    return (ins.opcode, ins.dst, ins.src, ins.offset, imm)


def test_roundtrip_over_100k_random_instructions():
    seen = {"n": 0, "ops": set()}

    @settings(max_examples=550, deadline=None, suppress_health_check=list(HealthCheck))
    @given(st.lists(instructions(), min_size=200, max_size=200))
    def check(batch):
        text = b"".join(isa.encode(i) for i in batch)
        decoded = isa.decode_text(text, "v2")
        assert [_canonical(d) for d in decoded] == [_canonical(i) for i in batch]
        assert b"".join(isa.encode(d) for d in decoded) == text
        seen["n"] += len(batch)
        seen["ops"].update(i.opcode for i in batch)

    check()
    assert seen["n"] >= 100_000
    assert seen["ops"] == set(isa.legal_opcodes("v2"))


@settings(max_examples=3000, deadline=None)
@given(st.binary(min_size=8, max_size=8))
def test_decode_then_encode_reproduces_bytes(slot):
    if slot[0] == isa.LDDW:
        return
    try:
        ins = isa.decode(slot, None, 0, "v2")
    except DecodeError:
        return
    assert isa.encode(ins) == slot


@pytest.mark.parametrize("op", [o for o in range(256) if o not in isa.legal_opcodes("v2")][:40])
def test_illegal_opcode_rejected(op):
    with pytest.raises(DecodeError) as exc:
        isa.decode(bytes([op]) + bytes(7), None, 0x40, "v2")
    assert exc.value.address == 0x40


@pytest.mark.parametrize("op", V2_ONLY)
def test_pqr_only_in_v2(op):
    slot = struct.pack("<BBhi", op, 0x21, 0, 7)
    with pytest.raises(DecodeError):
        isa.decode(slot, None, 0, "v1")
    assert isa.decode(slot, None, 0, "v2").opcode == op


def test_lddw_spans_two_slots():
    ins = isa.Instruction(isa.LDDW, 3, 0, 0, 0x1122334455667788, 0)
    raw = isa.encode(ins)
    assert len(raw) == 16
    (back,) = isa.decode_text(raw)
    assert back.imm == 0x1122334455667788 and back.size == 16
    nxt = isa.decode_text(raw + isa.encode(isa.Instruction(isa.EXIT, 0, 0, 0, 0)))[1]
    assert nxt.address == 16


def test_truncated_lddw_and_bad_second_slot():
    raw = isa.encode(isa.Instruction(isa.LDDW, 1, 0, 0, 5))
    with pytest.raises(DecodeError):
        isa.decode_text(raw[:8])
    with pytest.raises(DecodeError):
        isa.decode_text(raw[:8] + bytes([0x95]) + bytes(7))


def test_register_range_and_byteswap_width():
    with pytest.raises(DecodeError):
        isa.decode(struct.pack("<BBhi", 0xBF, 0x0B, 0, 0), None, 0)
    with pytest.raises(DecodeError):
        isa.decode(struct.pack("<BBhi", 0xD4, 0x01, 0, 24), None, 0)


def test_misaligned_text():
    with pytest.raises(DecodeError):
        isa.decode_text(bytes(12))


@pytest.mark.parametrize("ins,text", [
    (isa.Instruction(0x07, 1, 0, 0, -8), "add64 r1, -8"),
    (isa.Instruction(0x79, 2, 10, -16, 0), "ldxdw r2, [r10-16]"),
    (isa.Instruction(0x72, 1, 0, 3, 1), "stb [r1+3], 1"),
    (isa.Instruction(0x15, 1, 0, 4, 0), "jeq r1, 0, +4"),
    (isa.Instruction(0x8D, 0, 0, 0, 3), "callx r3"),
    (isa.Instruction(0xDC, 4, 0, 0, 32), "be32 r4"),
    (isa.Instruction(0x95, 0, 0, 0, 0), "exit"),
])
def test_formatting(ins, text):
    assert isa.format_instruction(ins) == text


def test_known_syscall_hashes():
    # murmur3 of the syscall name, as registered by the runtime
    assert isa.syscall_hash("sol_log_") == 0x207559BD
    assert isa.syscall_hash("abort") == 0xB6FC1A11
    assert isa.murmur3_32(b"") == 0


def test_jump_and_call_targets():
    j = isa.Instruction(0x05, 0, 0, -2, 0, address=0x40)
    assert j.jump_target() == 0x38
    c = isa.Instruction(0x85, 0, 1, 0, 3, address=0x10)
    assert c.is_relative_call and c.relative_call_target() == 0x30
