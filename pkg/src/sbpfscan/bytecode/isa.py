"""sBPF instruction set: opcode tables, decoding, encoding and text rendering.

Instructions are 8-byte little-endian slots::

    opcode:u8  regs:u8 (src << 4 | dst)  offset:i16  imm:i32

``lddw`` is the only wide form and spans two slots; the second slot carries
the upper 32 bits of the immediate and must otherwise be zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import DecodeError

SLOT = 8
_SLOT_FMT = struct.Struct("<BBhi")

# instruction classes
CLS_LD, CLS_LDX, CLS_ST, CLS_STX, CLS_ALU32, CLS_JMP, CLS_PQR, CLS_ALU64 = range(8)

LDDW = 0x18
CALL = 0x85
CALLX = 0x8D
EXIT = 0x95
JA = 0x05

SIZE_SUFFIX = {0x00: "w", 0x08: "h", 0x10: "b", 0x18: "dw"}
SIZE_BYTES = {0x00: 4, 0x08: 2, 0x10: 1, 0x18: 8}

ALU_OPS = {
    0x00: "add", 0x10: "sub", 0x20: "mul", 0x30: "div", 0x40: "or", 0x50: "and",
    0x60: "lsh", 0x70: "rsh", 0x80: "neg", 0x90: "mod", 0xA0: "xor", 0xB0: "mov",
    0xC0: "arsh",
}
JMP_OPS = {
    0x10: "jeq", 0x20: "jgt", 0x30: "jge", 0x40: "jset", 0x50: "jne", 0x60: "jsgt",
    0x70: "jsge", 0xA0: "jlt", 0xB0: "jle", 0xC0: "jslt", 0xD0: "jsle",
}
# product/quotient/remainder class, only legal in the v2 dialect
PQR_OPS = {
    0x30: ("uhmul", (64,)), 0x40: ("udiv", (32,)), 0x50: ("udiv", (64,)),
    0x60: ("urem", (32,)), 0x70: ("urem", (64,)), 0x80: ("lmul", (32,)),
    0x90: ("lmul", (64,)), 0xB0: ("shmul", (64,)), 0xC0: ("sdiv", (32,)),
    0xD0: ("sdiv", (64,)), 0xE0: ("srem", (32,)), 0xF0: ("srem", (64,)),
}


def _build_tables():
    names = {}
    names[LDDW] = "lddw"
    for size, suf in SIZE_SUFFIX.items():
        names[0x61 | size] = "ldx" + suf
        names[0x62 | size] = "st" + suf
        names[0x63 | size] = "stx" + suf
    for code, name in ALU_OPS.items():
        for cls, width in ((CLS_ALU32, "32"), (CLS_ALU64, "64")):
            if name == "neg":
                names[code | cls] = name + width
                continue
            names[code | cls] = name + width
            names[code | cls | 0x08] = name + width
    names[0xD4] = "le"
    names[0xDC] = "be"
    names[JA] = "ja"
    for code, name in JMP_OPS.items():
        names[code | CLS_JMP] = name
        names[code | CLS_JMP | 0x08] = name
    names[CALL] = "call"
    names[CALLX] = "callx"
    names[EXIT] = "exit"
    v2 = {}
    for code, (name, widths) in PQR_OPS.items():
        for src in (0x00, 0x08):
            v2[code | CLS_PQR | src] = name + str(widths[0])
    return names, v2


OPCODE_NAMES, PQR_NAMES = _build_tables()
V1_OPCODES = frozenset(OPCODE_NAMES)
V2_OPCODES = V1_OPCODES | frozenset(PQR_NAMES)


def legal_opcodes(dialect: str = "v1") -> frozenset:
    return V2_OPCODES if dialect == "v2" else V1_OPCODES


def to_signed(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


@dataclass(frozen=True, slots=True)
class Instruction:
    opcode: int
    dst: int
    src: int
    offset: int
    imm: int
    address: int = 0

    @property
    def cls(self) -> int:
        return self.opcode & 0x07

    @property
    def size(self) -> int:
        return 2 * SLOT if self.opcode == LDDW else SLOT

    @property
    def mnemonic(self) -> str:
        return OPCODE_NAMES.get(self.opcode) or PQR_NAMES[self.opcode]

    @property
    def uses_reg_source(self) -> bool:
        return bool(self.opcode & 0x08)

    @property
    def is_cond_jump(self) -> bool:
        return self.cls == CLS_JMP and (self.opcode & 0xF0) in JMP_OPS

    @property
    def is_jump(self) -> bool:
        return self.opcode == JA or self.is_cond_jump

    @property
    def is_call(self) -> bool:
        return self.opcode in (CALL, CALLX)

    @property
    def is_exit(self) -> bool:
        return self.opcode == EXIT

    @property
    def is_load(self) -> bool:
        return self.cls == CLS_LDX

    @property
    def is_store(self) -> bool:
        return self.cls in (CLS_ST, CLS_STX)

    @property
    def mem_width(self) -> int:
        return SIZE_BYTES[self.opcode & 0x18]

    @property
    def is_relative_call(self) -> bool:
        return self.opcode == CALL and self.src == 1

    def jump_target(self) -> int:
        return self.address + (self.offset + 1) * SLOT

    def relative_call_target(self) -> int:
        return self.address + (self.imm + 1) * SLOT

    def next_address(self) -> int:
        return self.address + self.size

    def encode(self) -> bytes:
        return encode(self)

    def __str__(self) -> str:
        return format_instruction(self)


def decode(slot8: bytes, next8: bytes | None = None, address: int = 0,
           dialect: str = "v1") -> Instruction:
    """Decode one instruction from its slot (and the following slot for ``lddw``)."""
    if len(slot8) != SLOT:
        raise DecodeError(address, slot8[0] if slot8 else 0, "truncated slot for opcode")
    opcode, regs, off, imm = _SLOT_FMT.unpack(slot8)
    if opcode not in legal_opcodes(dialect):
        raise DecodeError(address, opcode)
    dst, src = regs & 0x0F, regs >> 4
    if dst > 10 or src > 10:
        raise DecodeError(address, opcode, "register index out of range for opcode")
    if opcode in (0xD4, 0xDC) and imm not in (16, 32, 64):
        raise DecodeError(address, opcode, f"byte-swap width {imm} invalid for opcode")
    if opcode == LDDW:
        if next8 is None or len(next8) != SLOT:
            raise DecodeError(address, opcode, "missing second slot for opcode")
        op2, regs2, off2, imm2 = _SLOT_FMT.unpack(next8)
        if op2 or regs2 or off2:
            raise DecodeError(address, opcode, "malformed second slot for opcode")
        imm = ((imm2 & 0xFFFFFFFF) << 32) | (imm & 0xFFFFFFFF)
    elif next8 is not None:
        raise DecodeError(address, opcode, "unexpected second slot for opcode")
    return Instruction(opcode, dst, src, off, imm, address)


def encode(ins: Instruction) -> bytes:
    regs = (ins.src << 4) | ins.dst
    if ins.opcode == LDDW:
        lo = to_signed(ins.imm, 32)
        hi = to_signed(ins.imm >> 32, 32)
        return _SLOT_FMT.pack(LDDW, regs, ins.offset, lo) + _SLOT_FMT.pack(0, 0, 0, hi)
    return _SLOT_FMT.pack(ins.opcode, regs, ins.offset, to_signed(ins.imm, 32))


def decode_text(text: bytes, dialect: str = "v1") -> list[Instruction]:
    if len(text) % SLOT:
        raise DecodeError(len(text) - len(text) % SLOT, 0, "text section not slot aligned at opcode")
    out = []
    pos = 0
    while pos < len(text):
        slot = text[pos:pos + SLOT]
        nxt = text[pos + SLOT:pos + 2 * SLOT] if slot[0] == LDDW else None
        if slot[0] == LDDW and len(nxt) < SLOT:
            raise DecodeError(pos, LDDW, "missing second slot for opcode")
        ins = decode(slot, nxt, pos, dialect)
        out.append(ins)
        pos += ins.size
    return out


def _off(off: int) -> str:
    return f"+{off}" if off >= 0 else str(off)


def _mem(reg: int, off: int) -> str:
    return f"[r{reg}{_off(off)}]"


def format_instruction(ins: Instruction, syscalls: dict | None = None) -> str:
    """Render as ``mnemonic operands`` in the syntax the assembler accepts."""
    name = ins.mnemonic
    op = ins.opcode
    cls = ins.cls
    if op == LDDW:
        return f"lddw r{ins.dst}, {ins.imm:#x}"
    if cls == CLS_LDX:
        return f"{name} r{ins.dst}, {_mem(ins.src, ins.offset)}"
    if cls == CLS_ST:
        return f"{name} {_mem(ins.dst, ins.offset)}, {ins.imm}"
    if cls == CLS_STX:
        return f"{name} {_mem(ins.dst, ins.offset)}, r{ins.src}"
    if op in (0xD4, 0xDC):
        return f"{name}{ins.imm} r{ins.dst}"
    if cls in (CLS_ALU32, CLS_ALU64, CLS_PQR):
        if name.startswith("neg"):
            return f"{name} r{ins.dst}"
        rhs = f"r{ins.src}" if ins.uses_reg_source else str(ins.imm)
        return f"{name} r{ins.dst}, {rhs}"
    if op == JA:
        return f"ja {_off(ins.offset)}"
    if ins.is_cond_jump:
        rhs = f"r{ins.src}" if ins.uses_reg_source else str(ins.imm)
        return f"{name} r{ins.dst}, {rhs}, {_off(ins.offset)}"
    if op == CALL:
        if ins.src == 1:
            return f"call {_off(ins.imm)}"
        key = ins.imm & 0xFFFFFFFF
        if syscalls and key in syscalls:
            return f"call {syscalls[key]}"
        return f"call {key:#x}"
    if op == CALLX:
        return f"callx r{ins.imm}"
    return name


def murmur3_32(data: bytes, seed: int = 0) -> int:
    """32-bit MurmurHash3 (x86 variant), used for syscall and function keys."""
    c1, c2 = 0xCC9E2D51, 0x1B873593
    mask = 0xFFFFFFFF
    h = seed & mask
    nblocks = len(data) // 4
    for i in range(nblocks):
        k = int.from_bytes(data[4 * i:4 * i + 4], "little")
        k = (k * c1) & mask
        k = ((k << 15) | (k >> 17)) & mask
        k = (k * c2) & mask
        h ^= k
        h = ((h << 13) | (h >> 19)) & mask
        h = (h * 5 + 0xE6546B64) & mask
    tail = data[4 * nblocks:]
    k = 0
    if len(tail) >= 3:
        k ^= tail[2] << 16
    if len(tail) >= 2:
        k ^= tail[1] << 8
    if tail:
        k ^= tail[0]
        k = (k * c1) & mask
        k = ((k << 15) | (k >> 17)) & mask
        k = (k * c2) & mask
        h ^= k
    h ^= len(data)
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & mask
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & mask
    h ^= h >> 16
    return h


def syscall_hash(name: str) -> int:
    return murmur3_32(name.encode())


def function_hash(pc_slot: int) -> int:
    return murmur3_32(pc_slot.to_bytes(8, "little"))
