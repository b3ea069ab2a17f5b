"""Plain concrete sBPF interpreter.

Kept deliberately separate from the symbolic engine so that the two can be
checked against each other, and used to replay synthesized exploits.
"""

from __future__ import annotations

import hashlib
import struct

from ..bytecode import isa

M64 = (1 << 64) - 1
M32 = (1 << 32) - 1

PROGRAM_START = 0x1_0000_0000
STACK_START = 0x2_0000_0000
HEAP_START = 0x3_0000_0000
INPUT_START = 0x4_0000_0000
FRAME = 4096
MAX_FRAMES = 64
HEAP_BYTES = 32 * 1024

LOG_CALLS = {"sol_log_", "sol_log_64_", "sol_log_pubkey", "sol_log_compute_units_",
             "sol_log_data", "sol_set_return_data", "sol_get_return_data"}


class VMFault(Exception):
    pass


def _s(v, bits=64):
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


class _Seg:
    __slots__ = ("base", "buf", "writable")

    def __init__(self, base, buf, writable):
        self.base, self.buf, self.writable = base, buf, writable


class ConcreteVM:
    def __init__(self, image, input_bytes: bytes, *, pda_table=None, cpi_effects=None,
                 skip_sites=frozenset()):
        self.image = image
        self.segs = [
            _Seg(PROGRAM_START + image.text_vaddr, bytearray(image.text), False),
            _Seg(PROGRAM_START + image.rodata_vaddr, bytearray(image.rodata), False),
            _Seg(STACK_START, bytearray(FRAME * MAX_FRAMES), True),
            _Seg(HEAP_START, bytearray(HEAP_BYTES), True),
            _Seg(INPUT_START, bytearray(input_bytes), True),
        ]
        self.regs = [0] * 11
        self.regs[1] = INPUT_START
        self.regs[10] = STACK_START + FRAME
        self.pc = image.entry
        self.frames = []
        self.status = "running"
        self.exit_code = None
        self.fault = None
        self.steps = 0
        self.visited = []
        self.cpi_log = []
        self.pda_table = dict(pda_table or {})
        self.cpi_effects = list(cpi_effects or [])
        self.skip_sites = skip_sites
        self.heap_used = 0

    # memory ------------------------------------------------------------
    def _seg(self, addr, n):
        for s in self.segs:
            if s.base <= addr and addr + n <= s.base + len(s.buf):
                return s
        raise VMFault(f"access violation at {addr:#x} ({n} bytes)")

    def load(self, addr, n):
        s = self._seg(addr, n)
        o = addr - s.base
        return bytes(s.buf[o:o + n])

    def store(self, addr, data):
        s = self._seg(addr, len(data))
        if not s.writable:
            raise VMFault(f"write to read-only memory at {addr:#x}")
        o = addr - s.base
        s.buf[o:o + len(data)] = data

    def u64(self, addr):
        return struct.unpack("<Q", self.load(addr, 8))[0]

    # execution ---------------------------------------------------------
    def run(self, limit=1_000_000):
        while self.status == "running" and self.steps < limit:
            self.step()
        if self.status == "running":
            self.status = "limit"
        return self

    def step(self):
        if self.status != "running":
            return
        try:
            self._step()
        except VMFault as exc:
            self.status = "fault"
            self.fault = str(exc)

    def _step(self):
        try:
            ins = self.image.at(self.pc)
        except KeyError:
            raise VMFault(f"pc {self.pc:#x} outside text") from None
        self.steps += 1
        self.visited.append(self.pc)
        op, r = ins.opcode, self.regs
        nxt = self.pc + ins.size
        cls = op & 7
        if op == isa.LDDW:
            r[ins.dst] = ins.imm & M64
        elif cls in (isa.CLS_ALU32, isa.CLS_ALU64):
            self._alu(ins)
        elif cls == isa.CLS_PQR:
            self._pqr(ins)
        elif cls == isa.CLS_LDX:
            w = isa.SIZE_BYTES[op & 0x18]
            r[ins.dst] = int.from_bytes(self.load((r[ins.src] + ins.offset) & M64, w), "little")
        elif cls == isa.CLS_ST:
            w = isa.SIZE_BYTES[op & 0x18]
            self.store((r[ins.dst] + ins.offset) & M64,
                       (ins.imm & ((1 << 8 * w) - 1)).to_bytes(w, "little"))
        elif cls == isa.CLS_STX:
            w = isa.SIZE_BYTES[op & 0x18]
            self.store((r[ins.dst] + ins.offset) & M64,
                       (r[ins.src] & ((1 << 8 * w) - 1)).to_bytes(w, "little"))
        elif op == isa.JA:
            nxt = self.pc + (ins.offset + 1) * 8
        elif cls == isa.CLS_JMP and (op & 0xF0) in isa.JMP_OPS:
            a = r[ins.dst]
            b = r[ins.src] if op & 8 else ins.imm & M64
            if self._cond(op & 0xF0, a, b):
                nxt = self.pc + (ins.offset + 1) * 8
        elif op == isa.CALL:
            nxt = self._call(ins, nxt)
        elif op == isa.CALLX:
            target = r[ins.imm] - PROGRAM_START - self.image.text_vaddr
            nxt = self._enter(target, nxt)
        elif op == isa.EXIT:
            if not self.frames:
                self.status = "exited"
                self.exit_code = r[0]
                return
            ret, saved, fp = self.frames.pop()
            r[6:10] = saved
            r[10] = fp
            nxt = ret
        else:
            raise VMFault(f"unsupported opcode {op:#x}")
        self.pc = nxt

    @staticmethod
    def _cond(code, a, b):
        if code == 0x10:
            return a == b
        if code == 0x50:
            return a != b
        if code == 0x20:
            return a > b
        if code == 0x30:
            return a >= b
        if code == 0xA0:
            return a < b
        if code == 0xB0:
            return a <= b
        if code == 0x40:
            return (a & b) != 0
        sa, sb = _s(a), _s(b)
        return {0x60: sa > sb, 0x70: sa >= sb, 0xC0: sa < sb, 0xD0: sa <= sb}[code]

    def _alu(self, ins):
        op, r = ins.opcode, self.regs
        code = op & 0xF0
        wide = (op & 7) == isa.CLS_ALU64
        if op in (0xD4, 0xDC):
            bits = ins.imm
            v = r[ins.dst] & ((1 << bits) - 1)
            if op == 0xDC:
                v = int.from_bytes(v.to_bytes(bits // 8, "little"), "big")
            r[ins.dst] = v
            return
        if op & 8:
            b = r[ins.src]
        else:
            b = ins.imm & (M64 if wide else M32)
        a = r[ins.dst]
        bits = 64 if wide else 32
        mask = M64 if wide else M32
        a &= mask
        b &= mask
        name = isa.ALU_OPS[code]
        if name == "add":
            v = a + b
        elif name == "sub":
            v = a - b
        elif name == "mul":
            v = a * b
        elif name in ("div", "mod"):
            if b == 0:
                raise VMFault("division by zero")
            v = a // b if name == "div" else a % b
        elif name == "or":
            v = a | b
        elif name == "and":
            v = a & b
        elif name == "xor":
            v = a ^ b
        elif name == "lsh":
            v = a << (b % bits)
        elif name == "rsh":
            v = a >> (b % bits)
        elif name == "arsh":
            v = _s(a, bits) >> (b % bits)
        elif name == "neg":
            v = -a
        else:
            v = b
        v &= mask
        if not wide and name in ("add", "sub", "mul"):
            v = _s(v, 32) & M64
        r[ins.dst] = v

    def _pqr(self, ins):
        r = self.regs
        name = isa.PQR_NAMES[ins.opcode]
        bits = int(name[-2:])
        base = name[:-2]
        mask = (1 << bits) - 1
        a = r[ins.dst] & mask
        b = (r[ins.src] if ins.opcode & 8 else ins.imm) & mask
        if base == "uhmul":
            v = (a * b) >> 64
        elif base == "shmul":
            v = (_s(a) * _s(b)) >> 64
        elif base == "lmul":
            v = a * b
        elif base in ("udiv", "urem"):
            if b == 0:
                raise VMFault("division by zero")
            v = a // b if base == "udiv" else a % b
        else:
            sa, sb = _s(a, bits), _s(b, bits)
            if sb == 0 or (sa == -(1 << (bits - 1)) and sb == -1):
                raise VMFault("division overflow")
            q = abs(sa) // abs(sb) * (1 if (sa < 0) == (sb < 0) else -1)
            v = q if base == "sdiv" else sa - q * sb
        r[ins.dst] = v & mask

    def _enter(self, target, ret):
        if target not in self.image.index:
            raise VMFault(f"call target {target:#x} outside text")
        if len(self.frames) >= MAX_FRAMES - 1:
            raise VMFault("call depth exceeded")
        self.frames.append((ret, list(self.regs[6:10]), self.regs[10]))
        self.regs[10] += FRAME
        return target

    def _call(self, ins, ret):
        kind, what = self.image.call_target(ins)
        if kind == "function":
            if ins.address in self.skip_sites:
                self.store(self.regs[1], bytes(24))
                self.regs[0] = 0
                return ret
            return self._enter(what, ret)
        if kind != "syscall":
            raise VMFault(f"unresolved call {what:#x}")
        self._syscall(what)
        return ret

    # syscalls ----------------------------------------------------------
    def _syscall(self, name):
        r = self.regs
        if name in ("abort", "sol_panic_"):
            raise VMFault(name)
        if name in LOG_CALLS:
            r[0] = 0
            return
        if name in ("sol_memcpy_", "sol_memmove_"):
            self.store(r[1], self.load(r[2], r[3]))
        elif name == "sol_memset_":
            self.store(r[1], bytes([r[2] & 0xFF]) * r[3])
        elif name == "sol_memcmp_":
            a, b = self.load(r[1], r[3]), self.load(r[2], r[3])
            res = 0
            for x, y in zip(a, b):
                if x != y:
                    res = (x - y) & M32
                    break
            self.store(r[4], res.to_bytes(4, "little"))
        elif name == "sol_alloc_free_":
            if r[2] != 0:
                r[0] = 0
                return
            start = (self.heap_used + 7) & ~7
            if start + r[1] > HEAP_BYTES:
                r[0] = 0
                return
            self.heap_used = start + r[1]
            r[0] = HEAP_START + start
            return
        elif name in ("sol_invoke_signed_c", "sol_invoke_signed_rust"):
            self._invoke(name)
        elif name in ("sol_create_program_address", "sol_try_find_program_address"):
            self._pda(name)
        elif name == "sol_sha256":
            data = b"".join(self.load(self.u64(r[1] + 16 * k), self.u64(r[1] + 16 * k + 8))
                            for k in range(r[2]))
            self.store(r[3], hashlib.sha256(data).digest())
        elif name in ("sol_get_clock_sysvar", "sol_get_rent_sysvar"):
            self.store(r[1], bytes(40 if name == "sol_get_clock_sysvar" else 17))
        else:
            raise VMFault(f"syscall {name} not available in concrete mode")
        r[0] = 0

    def _invoke(self, name):
        r = self.regs
        if name == "sol_invoke_signed_c":
            target = self.load(self.u64(r[1]), 32)
        else:
            target = self.load(r[1] + 48, 32)
        n = len(self.cpi_log)
        self.cpi_log.append((self.pc, target))
        if name != "sol_invoke_signed_c":
            return
        effects = self.cpi_effects[n] if n < len(self.cpi_effects) else {}
        for k in range(r[3]):
            info = r[2] + 56 * k
            if not self.load(info + 49, 1)[0]:
                continue
            key = self.load(self.u64(info), 32)
            eff = effects.get(key.hex())
            if not eff:
                continue
            if "lamports" in eff:
                self.store(self.u64(info + 8), (eff["lamports"] & M64).to_bytes(8, "little"))
            if "data" in eff:
                data = bytes.fromhex(eff["data"])
                dlen = self.u64(info + 16)
                self.store(self.u64(info + 24), data[:dlen])

    def _pda(self, name):
        r = self.regs
        seed = b""
        for k in range(r[2]):
            seed += self.load(self.u64(r[1] + 16 * k), self.u64(r[1] + 16 * k + 8))
        if name == "sol_try_find_program_address":
            seed += bytes([255])
        arg = seed + self.load(r[3], 32)
        addr = self.pda_table.get(arg.hex())
        if addr is None:
            addr = hashlib.sha256(arg + b"ProgramDerivedAddress").digest()
        else:
            addr = bytes.fromhex(addr)
        self.store(r[4], addr)
        if name == "sol_try_find_program_address":
            self.store(r[5], bytes([255]))


def replay(image, input_bytes, *, pda_table=None, cpi_effects=None, skip_sites=frozenset(),
           limit=1_000_000) -> ConcreteVM:
    return ConcreteVM(image, input_bytes, pda_table=pda_table, cpi_effects=cpi_effects,
                      skip_sites=skip_sites).run(limit)
