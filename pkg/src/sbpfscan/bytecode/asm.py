"""A small two-pass assembler for sBPF text, producing loadable ELF objects.

Syntax is the one printed by the disassembler, extended with labels and a
handful of directives::

    .text                     switch to code
    .rodata                   switch to read-only data
    .func name                mark ``name`` as a function symbol
    .entry name               entry label (defaults to ``entrypoint``)
    .byte / .quad / .ascii / .zero / .align   data directives
    label:
    lddw r1, label            rodata or text labels get a relative relocation
    call name                 internal label or syscall name
"""

from __future__ import annotations

import re
import struct

from ..errors import AssemblerError
from . import elf, isa

_MEM = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(\w+))?\s*\]$")
_REG = re.compile(r"^r(\d+)$")

_NAME_TO_OPS: dict = {}
for _op, _name in list(isa.OPCODE_NAMES.items()) + list(isa.PQR_NAMES.items()):
    _NAME_TO_OPS.setdefault(_name, []).append(_op)


def _int(tok, line_no):
    try:
        return int(tok, 0)
    except ValueError:
        raise AssemblerError(line_no, f"bad integer {tok!r}") from None


def _reg(tok, line_no):
    m = _REG.match(tok)
    if not m or int(m.group(1)) > 10:
        raise AssemblerError(line_no, f"bad register {tok!r}")
    return int(m.group(1))


def _split_operands(rest):
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _strip_comment(line):
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif not in_str and (ch in ";#" or line.startswith("//", i)):
            return line[:i]
    return line


class _Item:
    __slots__ = ("line_no", "mnemonic", "operands", "offset", "size")

    def __init__(self, line_no, mnemonic, operands, offset, size):
        self.line_no, self.mnemonic, self.operands = line_no, mnemonic, operands
        self.offset, self.size = offset, size


def assemble(source: str, dialect: str = "v1") -> bytes:
    """Assemble ``source`` into an ELF object."""
    text_items, rodata = [], bytearray()
    text_labels, ro_labels = {}, {}
    funcs = set()
    entry_name = "entrypoint"
    section = "text"
    text_size = 0

    for line_no, raw in enumerate(source.splitlines(), 1):
        line = _strip_comment(raw).strip()
        while line:
            m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", line)
            if not m:
                break
            label = m.group(1)
            table = text_labels if section == "text" else ro_labels
            if label in text_labels or label in ro_labels:
                raise AssemblerError(line_no, f"duplicate label {label}")
            table[label] = text_size if section == "text" else len(rodata)
            line = m.group(2).strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head.startswith("."):
            if head in (".text", ".section") and (head == ".text" or rest.startswith(".text")):
                section = "text"
            elif head in (".rodata", ".data", ".section"):
                section = "rodata"
            elif head in (".func", ".globl", ".global"):
                funcs.add(rest)
            elif head == ".entry":
                entry_name = rest
            elif section != "rodata":
                raise AssemblerError(line_no, f"data directive {head} outside .rodata")
            elif head == ".byte":
                rodata += bytes(_int(t, line_no) & 0xFF for t in _split_operands(rest))
            elif head == ".quad":
                for t in _split_operands(rest):
                    rodata += struct.pack("<Q", _int(t, line_no) & (2**64 - 1))
            elif head == ".ascii":
                if not (rest.startswith('"') and rest.endswith('"')):
                    raise AssemblerError(line_no, ".ascii expects a quoted string")
                rodata += rest[1:-1].encode().decode("unicode_escape").encode("latin-1")
            elif head == ".zero":
                rodata += bytes(_int(rest, line_no))
            elif head == ".align":
                a = _int(rest, line_no)
                rodata += bytes((-len(rodata)) % a)
            else:
                raise AssemblerError(line_no, f"unknown directive {head}")
            continue
        if section != "text":
            raise AssemblerError(line_no, "instruction outside .text")
        mnem = head.lower()
        size = 16 if mnem == "lddw" else 8
        text_items.append(_Item(line_no, mnem, _split_operands(rest), text_size, size))
        text_size += size

    if entry_name not in text_labels:
        raise AssemblerError(0, f"entry label {entry_name} not defined")
    text_vaddr, ro_vaddr = elf.layout(text_size)

    out = bytearray()
    relocs = []
    call_funcs = set()
    for item in text_items:
        ins, reloc = _encode_item(item, text_labels, ro_labels, text_vaddr, ro_vaddr, dialect)
        if reloc is not None:
            rtype, name = reloc
            relocs.append((text_vaddr + item.offset, rtype, name))
            if name in text_labels:
                call_funcs.add(name)
        if not -(1 << 15) <= ins.offset < (1 << 15):
            raise AssemblerError(item.line_no, f"offset {ins.offset} does not fit in 16 bits")
        out += isa.encode(ins)

    functions = {name: text_labels[name] for name in (funcs | call_funcs) if name in text_labels}
    missing = [f for f in funcs if f not in text_labels]
    if missing:
        raise AssemblerError(0, f"function symbol {missing[0]} not defined")
    functions[entry_name] = text_labels[entry_name]
    return elf.write_elf(bytes(out), bytes(rodata), entry=text_labels[entry_name],
                         functions=functions, relocations=relocs)


def _mem_operand(tok, line_no):
    m = _MEM.match(tok.replace(" ", ""))
    if not m:
        raise AssemblerError(line_no, f"bad memory operand {tok!r}")
    reg = int(m.group(1))
    if reg > 10:
        raise AssemblerError(line_no, f"bad register r{reg}")
    off = _int(m.group(3), line_no) if m.group(3) else 0
    if m.group(2) == "-":
        off = -off
    return reg, off


def _encode_item(item, text_labels, ro_labels, text_vaddr, ro_vaddr, dialect):
    ln, mnem, ops = item.line_no, item.mnemonic, item.operands
    addr = item.offset

    def branch_off(tok):
        if tok in text_labels:
            delta = text_labels[tok] - (addr + 8)
            if delta % 8:
                raise AssemblerError(ln, "misaligned branch target")
            return delta // 8
        return _int(tok, ln)

    def need(n):
        if len(ops) != n:
            raise AssemblerError(ln, f"{mnem} expects {n} operands")

    if mnem == "exit":
        need(0)
        return isa.Instruction(isa.EXIT, 0, 0, 0, 0, addr), None
    if mnem == "ja":
        need(1)
        return isa.Instruction(isa.JA, 0, 0, branch_off(ops[0]), 0, addr), None
    if mnem == "lddw":
        need(2)
        dst = _reg(ops[0], ln)
        if ops[1] in ro_labels:
            return isa.Instruction(isa.LDDW, dst, 0, 0, ro_vaddr + ro_labels[ops[1]], addr), \
                (elf.R_BPF_64_RELATIVE, None)
        if ops[1] in text_labels:
            return isa.Instruction(isa.LDDW, dst, 0, 0, text_vaddr + text_labels[ops[1]], addr), \
                (elf.R_BPF_64_RELATIVE, None)
        return isa.Instruction(isa.LDDW, dst, 0, 0, _int(ops[1], ln) & (2**64 - 1), addr), None
    if mnem == "call":
        need(1)
        target = ops[0]
        if target in text_labels:
            return isa.Instruction(isa.CALL, 0, 0, 0, -1, addr), (elf.R_BPF_64_32, target)
        if re.match(r"^[+-]?(0x)?[0-9a-fA-F]+$", target) and target[0] in "+-0123456789":
            return isa.Instruction(isa.CALL, 0, 0, 0, isa.to_signed(_int(target, ln), 32), addr), None
        return isa.Instruction(isa.CALL, 0, 0, 0, -1, addr), (elf.R_BPF_64_32, target)
    if mnem == "callx":
        need(1)
        return isa.Instruction(isa.CALLX, 0, 0, 0, _reg(ops[0], ln), addr), None
    m = re.match(r"^(le|be)(16|32|64)$", mnem)
    if m:
        need(1)
        op = 0xD4 if m.group(1) == "le" else 0xDC
        return isa.Instruction(op, _reg(ops[0], ln), 0, 0, int(m.group(2)), addr), None

    codes = _NAME_TO_OPS.get(mnem)
    if not codes:
        raise AssemblerError(ln, f"unknown mnemonic {mnem}")
    if any(c in isa.PQR_NAMES for c in codes) and dialect != "v2":
        raise AssemblerError(ln, f"{mnem} requires the v2 dialect")
    base = min(codes)
    cls = base & 0x07
    if cls == isa.CLS_LDX:
        need(2)
        src, off = _mem_operand(ops[1], ln)
        return isa.Instruction(base, _reg(ops[0], ln), src, off, 0, addr), None
    if cls == isa.CLS_ST:
        need(2)
        dst, off = _mem_operand(ops[0], ln)
        return isa.Instruction(base, dst, 0, off, isa.to_signed(_int(ops[1], ln), 32), addr), None
    if cls == isa.CLS_STX:
        need(2)
        dst, off = _mem_operand(ops[0], ln)
        return isa.Instruction(base, dst, _reg(ops[1], ln), off, 0, addr), None
    if mnem.startswith("neg"):
        need(1)
        return isa.Instruction(base, _reg(ops[0], ln), 0, 0, 0, addr), None
    if cls in (isa.CLS_ALU32, isa.CLS_ALU64, isa.CLS_PQR):
        need(2)
        dst = _reg(ops[0], ln)
        if _REG.match(ops[1]):
            return isa.Instruction(base | 0x08, dst, _reg(ops[1], ln), 0, 0, addr), None
        return isa.Instruction(base, dst, 0, 0, isa.to_signed(_int(ops[1], ln), 32), addr), None
    if cls == isa.CLS_JMP:
        need(3)
        dst = _reg(ops[0], ln)
        off = branch_off(ops[2])
        if _REG.match(ops[1]):
            return isa.Instruction(base | 0x08, dst, _reg(ops[1], ln), off, 0, addr), None
        return isa.Instruction(base, dst, 0, off, isa.to_signed(_int(ops[1], ln), 32), addr), None
    raise AssemblerError(ln, f"cannot encode {mnem}")
