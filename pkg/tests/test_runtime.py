import struct

import pytest
import z3
from hypothesis import given, settings
from hypothesis import strategies as st

from sbpfscan.bytecode.asm import assemble
from sbpfscan.bytecode.elf import load_program
from sbpfscan.errors import ConfigurationError
from sbpfscan.runtime import ledger as L
from sbpfscan.runtime.context import AnalysisContext
from sbpfscan.runtime.layout import (REALLOC_PADDING, ConcreteAccount, InputLayout,
                                     deserialize, serialize)
from sbpfscan.runtime.syscalls import derive_concrete
from sbpfscan.symcore.memory import INPUT_START, Memory, MemRegion
from sbpfscan.symcore.state import ABORTED, EXITED
from sbpfscan.symcore.values import SymByte

from conftest import lockstep, small_config

accounts = st.builds(
    ConcreteAccount, st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32),
    st.integers(0, 2**64 - 1), st.binary(max_size=80), st.integers(0, 1), st.integers(0, 1),
    st.integers(0, 1), st.integers(0, 2**64 - 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(accounts, max_size=4), st.binary(max_size=100), st.binary(min_size=32, max_size=32))
def test_serialize_roundtrip(accs, ix, pid):
    blob = serialize(accs, ix, pid)
    assert len(blob) % 8 == 0 or ix
    back, ix2, pid2 = deserialize(blob)
    assert back == accs and ix2 == ix and pid2 == pid


def test_serialized_field_offsets():
    acc = ConcreteAccount(b"K" * 32, b"O" * 32, 77, b"abc", 1, 0, 1)
    blob = serialize([acc], b"\x05", b"P" * 32)
    assert struct.unpack_from("<Q", blob, 0)[0] == 1
    assert blob[8:12] == bytes([0xFF, 1, 0, 1])
    assert blob[16:48] == b"K" * 32 and blob[48:80] == b"O" * 32
    assert struct.unpack_from("<QQ", blob, 80) == (77, 3)
    assert blob[96:99] == b"abc"
    tail = 8 + ((88 + 3 + REALLOC_PADDING + 7) & ~7) + 8
    assert struct.unpack_from("<Q", blob, tail)[0] == 1
    assert blob[tail + 8] == 5 and blob[tail + 9:] == b"P" * 32


def test_analysis_layout_reserves_capacity():
    lay = InputLayout(2, 16, 8)
    assert lay.footprint == ((88 + 16 + REALLOC_PADDING + 7) & ~7) + 8
    assert lay.field_at(8 + 40) == (0, "owner", 0)
    assert lay.field_at(lay.account_base(1) + 88 + 3) == (1, "data", 3)
    assert lay.field_at(lay.account_base(1) + 88 + 16) == (1, "realloc", 0)
    assert lay.field_at(lay.ix_len_offset + 2) == (None, "ix_len", 2)
    assert lay.field_at(lay.ix_offset + 7) == (None, "ix", 7)
    assert lay.field_at(lay.program_id_offset) == (None, "program_id", 0)
    for name in ("key", "owner", "lamports", "data_len", "data", "is_signer", "rent_epoch"):
        off = lay.field_offset(1, name)
        assert lay.field_at(off)[:2] == (1, name)


def test_layout_rejects_oversized_input():
    with pytest.raises(ConfigurationError):
        InputLayout(2000, 10240)
    with pytest.raises(ConfigurationError):
        InputLayout(0, 8)


def test_memory_overlays_are_copied_on_fork():
    r = MemRegion("buf", 0x100, 16, True, b"\x01\x02")
    m = Memory((r,))
    assert m.read(r, 0, 3) == [1, 2, 0]
    child = m.copy()
    child.write(r, 1, [9])
    assert m.read(r, 1, 1) == [2] and child.read(r, 1, 1) == [9]
    assert m.find(0x10F, 1) is r and m.find(0x10F, 2) is None


def test_symbolic_input_variables_are_named_by_field():
    img = load_program(assemble(".text\nentrypoint:\n exit\n"))
    ctx = AnalysisContext(img, small_config())
    tx, lay = ctx.tx, ctx.layout
    b = tx.initial_byte(lay.field_offset(2, "owner") + 9)
    assert isinstance(b, SymByte) and str(b.expr) == "acc2_owner_1" and b.k == 1
    assert str(tx.initial_byte(lay.field_offset(0, "is_signer"))) == "acc0_is_signer"
    assert str(tx.initial_byte(lay.ix_offset + 17).expr) == "ix_2"
    assert tx.initial_byte(lay.field_offset(0, "marker")) == 0xFF
    assert tx.initial_byte(lay.program_id_offset + 3) == ctx.program_id[3]
    assert ctx.program_id == bytes.fromhex(img.digest)
    s = ctx.initial_state()
    assert s.regs[1] == INPUT_START
    names = {str(c) for c in s.assumptions}
    assert "64 == acc0_data_len" in names


def test_ledger_classifies_variable_names():
    assert L.classify_name("acc3_data_12") == (3, "data")
    assert L.classify_name("acc0_is_signer") == (0, "is_signer")
    assert L.classify_name("ix_len") == ("ix", None)
    assert L.classify_name("pda_0") == ("pda", None)
    assert L.classify_name("sysvar0_1") is None


def test_ledger_records_branch_facts():
    led = L.Ledger()
    led.on_read(1, "data")
    assert led.reads == {}
    led.active = True
    led.on_read(1, "data")
    led.on_read(2, "key")
    led.on_branch({"acc1_owner_0"})
    led.on_branch({"acc2_key_0", "acc0_data_1"})
    led.on_branch({"acc3_key_0"})
    led.on_branch({"acc0_is_signer"})
    led.on_write(4, "lamports", 0x80)
    assert led.read_accounts == {1}
    assert led.owner_compared == {1}
    assert led.key_sources[2] == {("data", 0)} and led.key_sources[3] == {"const"}
    assert led.signer_seen == {0} and led.written == {4}
    clone = led.copy()
    clone.on_read(5, "lamports")
    assert 5 not in led.reads


SYSCALLS = """
.text
entrypoint:
    mov64 r6, r1
    mov64 r1, r10
    add64 r1, -64
    mov64 r2, r6
    add64 r2, 16
    mov64 r3, 32
    call sol_memcpy_
    mov64 r1, r10
    add64 r1, -64
    mov64 r2, r6
    add64 r2, 16
    mov64 r3, 32
    mov64 r4, r10
    add64 r4, -8
    call sol_memcmp_
    ldxw r7, [r10-8]
    mov64 r1, 48
    mov64 r2, 0
    call sol_alloc_free_
    mov64 r8, r0
    stxdw [r8+0], r7
    lddw r1, msg
    mov64 r2, 2
    call sol_log_
    mov64 r1, r10
    add64 r1, -64
    stxdw [r10-128], r1
    stdw [r10-120], 32
    mov64 r1, r10
    add64 r1, -128
    mov64 r2, 1
    mov64 r3, r10
    add64 r3, -96
    call sol_sha256
    ldxdw r0, [r10-96]
    exit
.rodata
msg:
    .ascii "hi"
"""


def test_syscalls_agree_with_reference_vm():
    img = load_program(assemble(SYSCALLS))
    ctx = AnalysisContext(img, small_config())
    blob = serialize([ConcreteAccount(bytes(range(32)), bytes(32), 5, b"")], b"", ctx.program_id)
    s, vm = lockstep(img, blob, ctx)
    assert s.status == EXITED and vm.status == "exited"
    assert s.regs[7] == 0
    assert s.exit_code == vm.exit_code


def test_abort_syscall_ends_the_path():
    img = load_program(assemble(".text\nentrypoint:\n call abort\n exit\n"))
    ctx = AnalysisContext(img, small_config())
    s, vm = lockstep(img, serialize([], b"", ctx.program_id), ctx)
    assert s.status == ABORTED


def test_pda_derivation_is_deterministic():
    pid = b"\x07" * 32
    a = derive_concrete(b"seed", pid)
    assert a == derive_concrete(b"seed", pid) and len(a) == 32
    assert a != derive_concrete(b"seeds", pid)
