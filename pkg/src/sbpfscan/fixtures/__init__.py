"""Handcrafted sBPF programs used by the test-suite and the README examples.

Every program shares a C-SDK style entry: ``deserialize`` walks the input
region once, filling a ``SolParameters`` record at ``r10-40`` and an array of
``SolAccountInfo`` records (56 bytes each) at ``r10-600``.  Handlers then work
on those records exactly like compiled C programs do.

``build(name)`` returns ELF bytes, ``source(name)`` the assembly listing and
``EXPECTED`` the finding kinds each program should produce.
"""

from __future__ import annotations

from functools import lru_cache

from ..bytecode.asm import assemble

PARAMS = -40
KA = -600
MAX_INFOS = 10
INFO = {"key": 0, "lamports": 8, "data_len": 16, "data": 24, "owner": 32, "rent_epoch": 40,
        "is_signer": 48, "is_writable": 49, "executable": 50}
P_KA, P_KA_NUM, P_DATA, P_DATA_LEN, P_PROGRAM_ID = 0, 8, 16, 24, 32

DESERIALIZER = """
.func deserialize
deserialize:
    ldxdw r3, [r1+0]
    jgt r3, 10, deser_fail
    stxdw [r2+8], r3
    add64 r1, 8
    ldxdw r4, [r2+0]
    mov64 r5, 0
    jeq r3, 0, deser_tail
deser_loop:
    ldxb r6, [r1+0]
    jeq r6, 0xff, deser_fresh
    ldxdw r7, [r2+0]
    mul64 r6, 56
    add64 r7, r6
    ldxdw r6, [r7+0]
    stxdw [r4+0], r6
    ldxdw r6, [r7+8]
    stxdw [r4+8], r6
    ldxdw r6, [r7+16]
    stxdw [r4+16], r6
    ldxdw r6, [r7+24]
    stxdw [r4+24], r6
    ldxdw r6, [r7+32]
    stxdw [r4+32], r6
    ldxdw r6, [r7+40]
    stxdw [r4+40], r6
    ldxdw r6, [r7+48]
    stxdw [r4+48], r6
    add64 r1, 8
    ja deser_next
deser_fresh:
    ldxb r6, [r1+1]
    mov64 r7, 0
    jeq r6, 0, deser_signer_set
    mov64 r7, 1
deser_signer_set:
    stxb [r4+48], r7
    ldxb r6, [r1+2]
    mov64 r7, 0
    jeq r6, 0, deser_writable_set
    mov64 r7, 1
deser_writable_set:
    stxb [r4+49], r7
    ldxb r6, [r1+3]
    mov64 r7, 0
    jeq r6, 0, deser_exec_set
    mov64 r7, 1
deser_exec_set:
    stxb [r4+50], r7
    mov64 r6, r1
    add64 r6, 8
    stxdw [r4+0], r6
    mov64 r6, r1
    add64 r6, 40
    stxdw [r4+32], r6
    mov64 r6, r1
    add64 r6, 72
    stxdw [r4+8], r6
    ldxdw r7, [r1+80]
    stxdw [r4+16], r7
    mov64 r6, r1
    add64 r6, 88
    stxdw [r4+24], r6
    add64 r1, 10328
    add64 r1, r7
    add64 r1, 7
    and64 r1, -8
    ldxdw r6, [r1+0]
    stxdw [r4+40], r6
    add64 r1, 8
deser_next:
    add64 r4, 56
    add64 r5, 1
    jlt r5, r3, deser_loop
deser_tail:
    ldxdw r6, [r1+0]
    stxdw [r2+24], r6
    add64 r1, 8
    stxdw [r2+16], r1
    add64 r1, r6
    stxdw [r2+32], r1
    mov64 r0, 0
    exit
deser_fail:
    mov64 r0, 1
    exit
"""

ENTRY = """
.text
.entry entrypoint
.func entrypoint
entrypoint:
    mov64 r2, r10
    add64 r2, -40
    mov64 r3, r10
    add64 r3, -600
    stxdw [r2+0], r3
    call deserialize
    jne r0, 0, fail
"""

FAIL = """
fail:
    mov64 r0, 1
    exit
"""

OK = """
    mov64 r0, 0
    exit
"""


def slot(i: int, fld: str) -> int:
    """Frame offset of field ``fld`` in the i-th account info record."""
    return KA + 56 * i + INFO[fld]


def _m(off: int) -> str:
    return f"[r10{off:+d}]"


def ld(reg: str, i: int, fld: str) -> str:
    if fld in ("is_signer", "is_writable", "executable"):
        return f"    ldxb {reg}, {_m(slot(i, fld))}\n"
    return f"    ldxdw {reg}, {_m(slot(i, fld))}\n"


def signer_gate(i: int, fail: str = "fail") -> str:
    return ld("r1", i, "is_signer") + f"    jeq r1, 0, {fail}\n"


def cmp32(a_reg: str, a_off: int, b_reg: str, b_off: int, fail: str = "fail") -> str:
    out = ""
    for w in range(4):
        out += f"    ldxdw r3, [{a_reg}+{a_off + 8 * w}]\n"
        out += f"    ldxdw r4, [{b_reg}+{b_off + 8 * w}]\n"
        out += f"    jne r3, r4, {fail}\n"
    return out


def owner_is_program(i: int, fail: str = "fail") -> str:
    return (ld("r1", i, "owner") + f"    ldxdw r2, {_m(PARAMS + P_PROGRAM_ID)}\n"
            + cmp32("r1", 0, "r2", 0, fail))


def key_is_const(i: int, label: str, fail: str = "fail") -> str:
    return ld("r1", i, "key") + f"    lddw r2, {label}\n" + cmp32("r1", 0, "r2", 0, fail)


def key_is_data(i: int, j: int, data_off: int = 0, fail: str = "fail") -> str:
    """Compare account i's key with 32 bytes of account j's data."""
    return ld("r1", i, "key") + ld("r2", j, "data") + cmp32("r1", 0, "r2", data_off, fail)


def load_amount(reg: str = "r7", off: int = 0) -> str:
    return f"    ldxdw r1, {_m(PARAMS + P_DATA)}\n    ldxdw {reg}, [r1+{off}]\n"


def debit(i: int, amount: str = "r7", fail: str = "fail") -> str:
    return (ld("r1", i, "lamports") + "    ldxdw r2, [r1+0]\n"
            f"    jlt r2, {amount}, {fail}\n    sub64 r2, {amount}\n    stxdw [r1+0], r2\n")


def credit(i: int, amount: str = "r7") -> str:
    return (ld("r1", i, "lamports") + "    ldxdw r2, [r1+0]\n"
            f"    add64 r2, {amount}\n    stxdw [r1+0], r2\n")


def write_data_byte(i: int, off: int, value: int) -> str:
    return ld("r1", i, "data") + f"    stb [r1+{off}], {value}\n"


def invoke(target: int, n_infos: int = 2) -> str:
    """sol_invoke_signed_c with account ``target``'s key as program id."""
    ix = -700
    metas = -740
    return (
        ld("r1", target, "key")
        + f"    stxdw {_m(ix)}, r1\n"
        + f"    mov64 r1, r10\n    add64 r1, {metas}\n    stxdw {_m(ix + 8)}, r1\n"
        + f"    stdw {_m(ix + 16)}, 1\n"
        + f"    ldxdw r1, {_m(PARAMS + P_DATA)}\n    stxdw {_m(ix + 24)}, r1\n"
        + f"    stdw {_m(ix + 32)}, 0\n"
        + ld("r1", 0, "key") + f"    stxdw {_m(metas)}, r1\n"
        + f"    stb {_m(metas + 8)}, 1\n    stb {_m(metas + 9)}, 0\n"
        + f"    mov64 r1, r10\n    add64 r1, {ix}\n"
        + f"    mov64 r2, r10\n    add64 r2, {KA}\n"
        + f"    mov64 r3, {n_infos}\n    mov64 r4, 0\n    mov64 r5, 0\n"
        + "    call sol_invoke_signed_c\n"
    )


def log_message(label: str, length: int) -> str:
    return f"    lddw r1, {label}\n    mov64 r2, {length}\n    call sol_log_\n"


RODATA_COMMON = """
.rodata
token_program:
    .quad 0x0a0b0c0d0e0f1011
    .quad 0x1213141516171819
    .quad 0x1a1b1c1d1e1f2021
    .quad 0x2223242526272829
msg_signed:
    .ascii "signed"
msg_unsigned:
    .ascii "unsigned"
"""


def program(body: str, extra: str = "") -> str:
    return ENTRY + body + OK + FAIL + DESERIALIZER + extra + RODATA_COMMON


# ------------------------------------------------------------------ programs

def _deser_only() -> str:
    return program("")


def _level0() -> str:
    # wallet(0) data names the authority and the vault; its owner is never checked
    return program(
        signer_gate(1)
        + key_is_data(1, 0, 0)
        + key_is_data(2, 0, 32)
        + load_amount()
        + debit(2)
        + credit(3)
    )


def _level1(gate: bool = False) -> str:
    return program(
        owner_is_program(0)
        + key_is_data(1, 0, 0)
        + (signer_gate(1) if gate else "")
        + load_amount()
        + debit(0)
        + credit(2)
    )


def _level4() -> str:
    return program(invoke(3))


def _acpi_const() -> str:
    return program(key_is_const(3, "token_program") + invoke(3))


def _acpi_owner_data() -> str:
    return program(owner_is_program(0) + key_is_data(3, 0, 0) + invoke(3))


def _signer_rejoin(gate: bool = False) -> str:
    branch = (
        ld("r1", 1, "is_signer")
        + "    jne r1, 0, was_signed\n"
        + log_message("msg_unsigned", 8)
        + "    ja rejoin\n"
        + "was_signed:\n"
        + log_message("msg_signed", 6)
        + "rejoin:\n"
    )
    return program(
        owner_is_program(0)
        + key_is_data(1, 0, 0)
        + branch
        + (signer_gate(1) if gate else "")
        + load_amount()
        + debit(0)
        + credit(2)
    )


def _implicit_owner(where: str) -> str:
    # config(0) supplies the amount; its owner is never checked
    touch = write_data_byte(0, 8, 1)
    return program(
        signer_gate(1)
        + owner_is_program(2)
        + (touch if where == "before" else "")
        + ld("r1", 0, "data") + "    ldxdw r7, [r1+0]\n"
        + debit(2)
        + credit(3)
        + (touch if where == "after" else "")
    )


def _dispatch() -> str:
    return program(
        "    ldxdw r1, [r10-24]\n    ldxb r2, [r1+0]\n"
        "    jeq r2, 0, op_deposit\n    jeq r2, 1, op_withdraw\n    jeq r2, 2, op_close\n"
        "    ja fail\n"
        "op_deposit:\n" + load_amount("r7", 8) + credit(0) + "    ja done\n"
        "op_withdraw:\n" + owner_is_program(0) + signer_gate(1) + load_amount("r7", 8)
        + debit(0) + credit(1) + "    ja done\n"
        "op_close:\n" + owner_is_program(0) + signer_gate(1) + ld("r1", 0, "lamports")
        + "    stdw [r1+0], 0\n"
        "done:\n"
    )


def _nested_dispatch() -> str:
    return program(
        "    ldxdw r1, [r10-24]\n    ldxb r2, [r1+0]\n"
        "    jeq r2, 0, group_a\n    jeq r2, 1, group_b\n    ja fail\n"
        "group_a:\n    ldxb r2, [r1+1]\n    jeq r2, 0, a0\n    jeq r2, 1, a1\n    ja fail\n"
        "group_b:\n    ldxb r2, [r1+1]\n    jeq r2, 0, b0\n    jeq r2, 1, b1\n    ja fail\n"
        "a0:\n    mov64 r0, 0\n    exit\n"
        "a1:\n    mov64 r0, 0\n    exit\n"
        "b0:\n    mov64 r0, 0\n    exit\n"
        "b1:\n"
    )


def _pruning() -> str:
    # a validation failure path that forks heavily before bailing out
    noisy = "bad_len:\n    ldxdw r6, [r10-24]\n"
    for k in range(6):
        noisy += (f"    ldxb r1, [r6+{k}]\n    jeq r1, 0, noisy_{k}\n"
                  f"    call sol_log_compute_units_\nnoisy_{k}:\n")
    noisy += "    mov64 r0, 2\n    exit\n"
    return program(
        "    ldxdw r1, [r10-16]\n    jlt r1, 8, bad_len\n"
        "    ldxdw r1, [r10-24]\n    ldxb r2, [r1+0]\n"
        "    jeq r2, 0, op_pay\n    jeq r2, 1, op_forward\n    ja fail\n"
        "op_pay:\n" + owner_is_program(0) + key_is_data(1, 0, 0) + load_amount("r7", 8)
        + debit(0) + credit(2) + "    ja done\n"
        "op_forward:\n" + invoke(3) + "done:\n",
        extra=noisy,
    )


def _three_functions() -> str:
    return (
        "\n.text\n.entry entrypoint\n.func entrypoint\nentrypoint:\n"
        "    ldxb r2, [r1+8]\n    jeq r2, 0, skip_helper\n    call helper\n"
        "skip_helper:\n    call leaf\n    mov64 r0, 0\n    exit\n"
        ".func helper\nhelper:\n    ldxb r2, [r1+9]\n    jeq r2, 1, helper_cpi\n    exit\n"
        "helper_cpi:\n    call leaf\n    mov64 r1, r10\n    add64 r1, -64\n    stxdw [r10-64], r1\n"
        "    mov64 r2, 0\n    mov64 r3, 0\n    mov64 r4, 0\n    mov64 r5, 0\n"
        "    call sol_invoke_signed_c\n    exit\n"
        ".func leaf\nleaf:\n    mov64 r0, 7\n    exit\n"
    )


FORMAT_FN = "_ZN5alloc3fmt6format17h9e1c43a2b0d5f786E"
FMT_WRITE = "_ZN4core3fmt5write17h5b8e0e7c0d1f3a21E"
U64_DISPLAY = "_ZN4core3fmt3num3imp52_$LT$impl$u20$core..fmt..Display$u20$for$u20$u64$GT$3fmt17h0b4d2c8e6a1f9d37E"
STRING_WRITE = "_ZN58_$LT$alloc..string..String$u20$as$u20$core..fmt..Write$GT$9write_str17h2f6a9c1e8b7d4e05E"


def _format_runtime() -> str:
    """The formatting machinery a Rust program links for ``format!("...{}", n)``.

    Lowered the way rustc emits it: ``format`` builds a String and hands a
    ``dyn Write`` to ``core::fmt::write``, which walks the argument list and
    calls each formatter through a function pointer; the u64 formatter renders
    four digits per round through a two-byte lookup table, and padding goes
    through the writer vtable as well.
    """
    sym = {"fmt": FORMAT_FN, "write": FMT_WRITE, "disp": U64_DISPLAY, "sws": STRING_WRITE}
    return """
.func {fmt}
{fmt}:
    mov64 r6, r1
    mov64 r7, r2
    stdw [r6+0], 0
    stdw [r6+8], 0
    stdw [r6+16], 0
    lddw r1, {sws}
    stxdw [r10-16], r1
    mov64 r1, r6
    mov64 r2, r10
    add64 r2, -16
    mov64 r3, r7
    call {write}
    jne r0, 0, fmt_failed
    mov64 r0, 0
    exit
fmt_failed:
    call abort
.func {write}
{write}:
    stxdw [r10-64], r1
    stxdw [r10-56], r2
    stdw [r10-48], 0
    mov64 r6, r3
    mov64 r7, 0
cfw_loop:
    ldxdw r1, [r6+8]
    jge r7, r1, cfw_done
    ldxdw r1, [r6+0]
    mov64 r2, r7
    lsh64 r2, 4
    add64 r1, r2
    ldxdw r2, [r1+0]
    ldxdw r3, [r1+8]
    jeq r3, 0, cfw_arg
    ldxdw r1, [r10-64]
    ldxdw r4, [r10-56]
    ldxdw r4, [r4+0]
    callx r4
    jne r0, 0, cfw_err
cfw_arg:
    ldxdw r1, [r6+24]
    jge r7, r1, cfw_next
    ldxdw r1, [r6+16]
    mov64 r2, r7
    lsh64 r2, 4
    add64 r1, r2
    ldxdw r4, [r1+8]
    ldxdw r1, [r1+0]
    mov64 r2, r10
    add64 r2, -64
    callx r4
    jne r0, 0, cfw_err
cfw_next:
    add64 r7, 1
    ja cfw_loop
cfw_done:
    mov64 r0, 0
    exit
cfw_err:
    mov64 r0, 1
    exit
.func {disp}
{disp}:
    ldxdw r1, [r1+0]
    mov64 r3, r2
    mov64 r2, 1
    call fmt_u64
    exit
.func fmt_u64
fmt_u64:
    mov64 r6, r1
    mov64 r8, r3
    mov64 r9, 39
u64_chunk:
    jlt r6, 10000, u64_lt4
    mov64 r1, r6
    mod64 r1, 10000
    div64 r6, 10000
    mov64 r2, r1
    div64 r2, 100
    lsh64 r2, 1
    mod64 r1, 100
    lsh64 r1, 1
    sub64 r9, 4
    mov64 r3, r10
    add64 r3, -48
    add64 r3, r9
    lddw r4, digit_pairs
    add64 r4, r2
    ldxh r5, [r4+0]
    stxh [r3+0], r5
    lddw r4, digit_pairs
    add64 r4, r1
    ldxh r5, [r4+0]
    stxh [r3+2], r5
    ja u64_chunk
u64_lt4:
    jlt r6, 100, u64_lt2
    mov64 r1, r6
    mod64 r1, 100
    lsh64 r1, 1
    div64 r6, 100
    sub64 r9, 2
    mov64 r3, r10
    add64 r3, -48
    add64 r3, r9
    lddw r4, digit_pairs
    add64 r4, r1
    ldxh r5, [r4+0]
    stxh [r3+0], r5
u64_lt2:
    jge r6, 10, u64_two
    sub64 r9, 1
    mov64 r3, r10
    add64 r3, -48
    add64 r3, r9
    mov64 r5, r6
    add64 r5, 48
    stxb [r3+0], r5
    ja u64_pad
u64_two:
    lsh64 r6, 1
    sub64 r9, 2
    mov64 r3, r10
    add64 r3, -48
    add64 r3, r9
    lddw r4, digit_pairs
    add64 r4, r6
    ldxh r5, [r4+0]
    stxh [r3+0], r5
u64_pad:
    mov64 r1, r8
    mov64 r2, r10
    add64 r2, -48
    add64 r2, r9
    mov64 r3, 39
    sub64 r3, r9
    call pad_integral
    exit
.func pad_integral
pad_integral:
    mov64 r6, r1
    mov64 r7, r2
    mov64 r8, r3
    ldxdw r9, [r6+16]
    jeq r9, 0, pad_body
    jge r8, r9, pad_body
    sub64 r9, r8
pad_fill:
    jeq r9, 0, pad_body
    ldxdw r1, [r6+0]
    lddw r2, pad_space
    mov64 r3, 1
    ldxdw r4, [r6+8]
    ldxdw r4, [r4+0]
    callx r4
    jne r0, 0, pad_done
    sub64 r9, 1
    ja pad_fill
pad_body:
    ldxdw r1, [r6+0]
    mov64 r2, r7
    mov64 r3, r8
    ldxdw r4, [r6+8]
    ldxdw r4, [r4+0]
    callx r4
pad_done:
    exit
.func {sws}
{sws}:
    mov64 r6, r1
    mov64 r7, r2
    mov64 r8, r3
    ldxdw r1, [r6+8]
    ldxdw r2, [r6+16]
    sub64 r1, r2
    jge r1, r8, sws_copy
    ldxdw r9, [r6+8]
    lsh64 r9, 1
    ldxdw r1, [r6+16]
    add64 r1, r8
    jge r9, r1, sws_min
    mov64 r9, r1
sws_min:
    jge r9, 8, sws_alloc
    mov64 r9, 8
sws_alloc:
    mov64 r1, r9
    mov64 r2, 0
    call sol_alloc_free_
    jeq r0, 0, sws_oom
    ldxdw r3, [r6+16]
    ldxdw r2, [r6+0]
    stxdw [r6+0], r0
    stxdw [r6+8], r9
    jeq r3, 0, sws_copy
    mov64 r1, r0
    call sol_memcpy_
sws_copy:
    ldxdw r1, [r6+0]
    ldxdw r2, [r6+16]
    add64 r1, r2
    mov64 r2, r7
    mov64 r3, r8
    call sol_memcpy_
    ldxdw r2, [r6+16]
    add64 r2, r8
    stxdw [r6+16], r2
    mov64 r0, 0
    exit
sws_oom:
    call abort
.func __rust_dealloc
__rust_dealloc:
    mov64 r0, 0
    exit
""".format(**sym)


def _format_rodata() -> str:
    pairs = "".join(f"{n:02d}" for n in range(100))
    return f'\n.rodata\ndigit_pairs:\n    .ascii "{pairs}"\npad_space:\n    .ascii " "\npiece_amount:\n    .ascii "amount: "\n'


def _format(negative: bool = False) -> str:
    sret = -640
    call = (
        load_amount("r2")
        + "    stxdw [r10-656], r2\n"
        + "    lddw r1, piece_amount\n    stxdw [r10-688], r1\n    stdw [r10-680], 8\n"
        + "    mov64 r1, r10\n    add64 r1, -656\n    stxdw [r10-704], r1\n"
        + f"    lddw r1, {U64_DISPLAY}\n    stxdw [r10-696], r1\n"
        + "    mov64 r1, r10\n    add64 r1, -688\n    stxdw [r10-736], r1\n    stdw [r10-728], 1\n"
        + "    mov64 r1, r10\n    add64 r1, -704\n    stxdw [r10-720], r1\n    stdw [r10-712], 1\n"
        + "    mov64 r2, r10\n    add64 r2, -736\n"
        + f"    mov64 r1, r10\n    add64 r1, {sret}\n    call {FORMAT_FN}\n"
    )
    use = (
        f"    ldxdw r1, {_m(sret)}\n    ldxdw r2, {_m(sret + 16)}\n    call sol_log_\n"
        f"    ldxdw r1, {_m(sret)}\n    ldxdw r2, {_m(sret + 8)}\n    mov64 r3, 1\n"
        "    call __rust_dealloc\n"
    )
    if negative:
        use = f"    ldxdw r2, {_m(sret + 16)}\n    jgt r2, 30, fail\n" + use
    body = (
        owner_is_program(0)
        + key_is_data(1, 0, 0)
        + call
        + use
        + load_amount()
        + debit(0)
        + credit(2)
    )
    return program(body, extra=_format_runtime() + _format_rodata())


def _two_loops() -> str:
    loop = """
    mov64 r5, 0
{n}_head:
    ldxb r6, [r1+0]
    jeq r6, 0xff, {n}_next
    add64 r1, 8
{n}_next:
    add64 r1, 16
    add64 r5, 1
    jlt r5, 3, {n}_head
"""
    return ("\n.text\n.entry entrypoint\n.func entrypoint\nentrypoint:\n"
            + loop.format(n="first") + loop.format(n="second") + OK)


def _exit_only() -> str:
    return "\n.text\n.entry entrypoint\n.func entrypoint\nentrypoint:\n    mov64 r0, 0\n    exit\n"


_SOURCES = {
    "deser": _deser_only,
    "level0": _level0,
    "level1": _level1,
    "level4": _level4,
    "clean": lambda: _level1(gate=True),
    "signer_rejoin": _signer_rejoin,
    "signer_rejoin_gated": lambda: _signer_rejoin(gate=True),
    "owner_write_before": lambda: _implicit_owner("before"),
    "owner_write_after": lambda: _implicit_owner("after"),
    "owner_unwritten": lambda: _implicit_owner("none"),
    "acpi_const": _acpi_const,
    "acpi_owner_data": _acpi_owner_data,
    "dispatch": _dispatch,
    "nested_dispatch": _nested_dispatch,
    "pruning": _pruning,
    "three_functions": _three_functions,
    "format": _format,
    "format_branch": lambda: _format(negative=True),
    "two_loops": _two_loops,
    "exit_only": _exit_only,
}

# finding kinds each fixture produces under default settings
EXPECTED = {
    "deser": set(),
    "level0": {"moc"},
    "level1": {"msc"},
    "level4": {"acpi"},
    "clean": set(),
    "signer_rejoin": {"msc"},
    "signer_rejoin_gated": set(),
    "owner_write_before": set(),
    "owner_write_after": set(),
    "owner_unwritten": {"moc"},
    "acpi_const": set(),
    "acpi_owner_data": set(),
    "format": {"msc"},
}

NAMES = tuple(sorted(_SOURCES))


def source(name: str) -> str:
    return _SOURCES[name]()


@lru_cache(maxsize=None)
def build(name: str, dialect: str = "v1") -> bytes:
    return assemble(source(name), dialect)
