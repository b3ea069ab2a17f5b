"""Loading sBPF ELF objects into a relocated ProgramImage, and writing small ones."""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile

from ..errors import DecodeError, LoadError, RelocationError, UnsupportedTargetError
from . import isa

EM_BPF = 247
MM_PROGRAM_START = 0x1_0000_0000

R_BPF_NONE = 0
R_BPF_64_64 = 1
R_BPF_64_ABS64 = 2
R_BPF_64_RELATIVE = 8
R_BPF_64_32 = 10

KNOWN_SYSCALLS = (
    "abort", "sol_panic_", "sol_log_", "sol_log_64_", "sol_log_pubkey",
    "sol_log_compute_units_", "sol_log_data", "sol_memcpy_", "sol_memmove_",
    "sol_memset_", "sol_memcmp_", "sol_invoke_signed_c", "sol_invoke_signed_rust",
    "sol_create_program_address", "sol_try_find_program_address", "sol_alloc_free_",
    "sol_sha256", "sol_keccak256", "sol_get_clock_sysvar", "sol_get_rent_sysvar",
    "sol_set_return_data", "sol_get_return_data",
)
SYSCALL_BY_HASH = {isa.syscall_hash(n): n for n in KNOWN_SYSCALLS}


@dataclass
class ProgramImage:
    instructions: list
    entry: int
    syscalls: dict
    functions: dict
    function_starts: frozenset
    text_vaddr: int
    text: bytes
    rodata_vaddr: int
    rodata: bytes
    symbols: dict = field(default_factory=dict)
    digest: str = ""
    dialect: str = "v1"

    def __post_init__(self):
        self.index = {ins.address: i for i, ins in enumerate(self.instructions)}

    def __len__(self):
        return len(self.instructions)

    def at(self, address: int) -> isa.Instruction:
        return self.instructions[self.index[address]]

    def call_target(self, ins: isa.Instruction):
        """Classify a call: ('function', address), ('syscall', name), ('unknown', key) or None."""
        if ins.opcode == isa.CALLX:
            return None
        if ins.src == 1:
            return ("function", ins.relative_call_target())
        key = ins.imm & 0xFFFFFFFF
        if key in self.syscalls:
            return ("syscall", self.syscalls[key])
        if key in self.functions:
            return ("function", self.functions[key])
        return ("unknown", key)

    def runtime_address(self, text_offset: int) -> int:
        return MM_PROGRAM_START + self.text_vaddr + text_offset

    def text_offset_of(self, runtime_address: int) -> int:
        return runtime_address - MM_PROGRAM_START - self.text_vaddr

    def symbol_name(self, address: int):
        return self.symbols.get(address)


def _symbols(elf, name):
    sec = elf.get_section_by_name(name)
    if sec is None:
        return []
    try:
        return list(sec.iter_symbols())
    except ELFError as exc:
        raise LoadError(name, str(exc)) from exc


def load_program(elf_bytes: bytes, dialect: str = "v1") -> ProgramImage:
    try:
        elf = ELFFile(io.BytesIO(elf_bytes))
        header = elf.header
    except (ELFError, struct.error, ValueError) as exc:
        raise LoadError("elf header", str(exc)) from exc
    if elf.elfclass != 64 or not elf.little_endian:
        raise UnsupportedTargetError("elf header", "expected 64-bit little-endian object")
    machine = header["e_machine"]
    if machine not in ("EM_BPF", EM_BPF):
        raise UnsupportedTargetError("e_machine", f"unsupported machine {machine}")

    try:
        sections = list(elf.iter_sections())
    except (ELFError, struct.error, ValueError) as exc:
        raise LoadError("section headers", str(exc)) from exc
    text_sec = elf.get_section_by_name(".text")
    if text_sec is None:
        raise LoadError(".text", "missing text section")
    text_vaddr = text_sec["sh_addr"]
    try:
        text = bytearray(text_sec.data())
    except (ELFError, struct.error, ValueError) as exc:
        raise LoadError(".text", str(exc)) from exc
    if not text:
        raise LoadError(".text", "empty text section")

    # every other allocated progbits section lands in one read-only image
    ro_parts = []
    for sec in sections:
        if sec.name == ".text" or not sec["sh_flags"] & 0x2 or sec["sh_type"] != "SHT_PROGBITS":
            continue
        try:
            ro_parts.append((sec["sh_addr"], bytes(sec.data())))
        except (ELFError, struct.error, ValueError) as exc:
            raise LoadError(sec.name, str(exc)) from exc
    if ro_parts:
        ro_base = min(a for a, _ in ro_parts)
        ro_end = max(a + len(d) for a, d in ro_parts)
        rodata = bytearray(ro_end - ro_base)
        for addr, data in ro_parts:
            rodata[addr - ro_base:addr - ro_base + len(data)] = data
    else:
        ro_base, rodata = text_vaddr + len(text), bytearray()

    syscalls: dict = {}
    functions: dict = {}
    symbols: dict = {}
    func_starts = set()

    for sym in _symbols(elf, ".symtab") + _symbols(elf, ".dynsym"):
        if sym["st_info"]["type"] == "STT_FUNC" and sym["st_shndx"] not in ("SHN_UNDEF", "SHN_ABS"):
            off = sym["st_value"] - text_vaddr
            if 0 <= off < len(text) and off % isa.SLOT == 0:
                func_starts.add(off)
                if sym.name:
                    symbols.setdefault(off, sym.name)

    def register_syscall(key, name):
        prev = syscalls.get(key)
        if prev is not None and prev != name:
            raise LoadError(".dynsym", f"syscall hash collision between {prev} and {name}")
        syscalls[key] = name

    for sec in sections:
        if sec["sh_type"] != "SHT_REL":
            if sec["sh_type"] == "SHT_RELA":
                raise LoadError(sec.name, "RELA relocations are not used by sBPF")
            continue
        try:
            symtab = elf.get_section(sec["sh_link"])
            relocs = list(sec.iter_relocations())
        except (ELFError, struct.error, ValueError) as exc:
            raise LoadError(sec.name, str(exc)) from exc
        for rel in relocs:
            _apply_relocation(rel, symtab, text, text_vaddr, rodata, ro_base,
                              functions, func_starts, symbols, register_syscall)

    try:
        instructions = isa.decode_text(bytes(text), dialect)
    except DecodeError:
        raise
    starts_ok = {ins.address for ins in instructions}

    entry_vaddr = header["e_entry"]
    entry = entry_vaddr - text_vaddr
    for sym in _symbols(elf, ".symtab") + _symbols(elf, ".dynsym"):
        if sym.name == "entrypoint" and sym["st_shndx"] != "SHN_UNDEF":
            sym_entry = sym["st_value"] - text_vaddr
            if sym_entry != entry:
                raise LoadError("e_entry", "entry address disagrees with the entrypoint symbol")
    if entry not in starts_ok:
        raise LoadError("e_entry", f"entry {entry_vaddr:#x} is not an instruction in .text")
    func_starts.add(entry)

    for ins in instructions:
        if ins.opcode != isa.CALL:
            continue
        if ins.src == 1:
            func_starts.add(ins.relative_call_target())
            continue
        key = ins.imm & 0xFFFFFFFF
        if key in syscalls or key in functions:
            continue
        if key in SYSCALL_BY_HASH:
            register_syscall(key, SYSCALL_BY_HASH[key])
    func_starts &= starts_ok
    symbols.setdefault(entry, "entrypoint")

    return ProgramImage(
        instructions=instructions, entry=entry, syscalls=syscalls, functions=functions,
        function_starts=frozenset(func_starts), text_vaddr=text_vaddr, text=bytes(text),
        rodata_vaddr=ro_base, rodata=bytes(rodata), symbols=symbols,
        digest=hashlib.sha256(elf_bytes).hexdigest(), dialect=dialect,
    )


def _apply_relocation(rel, symtab, text, text_vaddr, rodata, ro_base,
                      functions, func_starts, symbols, register_syscall):
    r_offset = rel["r_offset"]
    r_type = rel["r_info_type"]
    sym_idx = rel["r_info_sym"]
    sym = symtab.get_symbol(sym_idx) if sym_idx else None
    in_text = text_vaddr <= r_offset < text_vaddr + len(text)
    t_off = r_offset - text_vaddr

    if r_type == R_BPF_NONE:
        return
    if r_type == R_BPF_64_32:
        if not in_text or t_off % isa.SLOT or text[t_off] != isa.CALL:
            raise RelocationError(r_offset, "call relocation does not target a call instruction")
        if sym is None:
            raise RelocationError(r_offset, "call relocation without symbol")
        if sym["st_shndx"] == "SHN_UNDEF":
            key = isa.syscall_hash(sym.name)
            register_syscall(key, sym.name)
        else:
            target = sym["st_value"] - text_vaddr
            if target < 0 or target >= len(text) or target % isa.SLOT:
                raise RelocationError(r_offset, f"call target {sym.name or '?'} outside .text")
            key = isa.function_hash(target // isa.SLOT)
            functions[key] = target
            func_starts.add(target)
            if sym.name:
                symbols.setdefault(target, sym.name)
        struct.pack_into("<I", text, t_off + 4, key)
        return
    if r_type in (R_BPF_64_RELATIVE, R_BPF_64_64):
        if in_text:
            if t_off % isa.SLOT or text[t_off] != isa.LDDW or t_off + 16 > len(text):
                raise RelocationError(r_offset, "relocation does not target a wide load")
            lo = struct.unpack_from("<I", text, t_off + 4)[0]
            hi = struct.unpack_from("<I", text, t_off + 12)[0]
            value = (hi << 32) | lo
            if r_type == R_BPF_64_64:
                if sym is None:
                    raise RelocationError(r_offset, "absolute relocation without symbol")
                value = MM_PROGRAM_START + sym["st_value"] + lo
            elif value < MM_PROGRAM_START:
                value += MM_PROGRAM_START
            struct.pack_into("<I", text, t_off + 4, value & 0xFFFFFFFF)
            struct.pack_into("<I", text, t_off + 12, value >> 32)
            return
        _patch_data(rel, sym, rodata, ro_base, r_offset, r_type)
        return
    if r_type == R_BPF_64_ABS64:
        _patch_data(rel, sym, rodata, ro_base, r_offset, r_type)
        return
    raise RelocationError(r_offset, f"unsupported relocation type {r_type}")


def _patch_data(rel, sym, rodata, ro_base, r_offset, r_type):
    off = r_offset - ro_base
    if off < 0 or off + 8 > len(rodata):
        raise RelocationError(r_offset, "data relocation outside loaded sections")
    value = struct.unpack_from("<Q", rodata, off)[0]
    if r_type == R_BPF_64_RELATIVE:
        if value < MM_PROGRAM_START:
            value += MM_PROGRAM_START
    else:
        if sym is None:
            raise RelocationError(r_offset, "absolute relocation without symbol")
        value = MM_PROGRAM_START + sym["st_value"] + value
    struct.pack_into("<Q", rodata, off, value & 0xFFFFFFFFFFFFFFFF)


# --------------------------------------------------------------------------
# writer

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")
_REL = struct.Struct("<QQ")

TEXT_FILE_OFFSET = 0x120


def _align(n, a):
    return (n + a - 1) // a * a


def layout(text_len: int) -> tuple[int, int]:
    """Virtual addresses of .text and .rodata for a text section of ``text_len`` bytes."""
    return TEXT_FILE_OFFSET, _align(TEXT_FILE_OFFSET + text_len, 8)


class _StrTab:
    def __init__(self):
        self.data = bytearray(b"\0")
        self.index = {"": 0}

    def add(self, s):
        if s not in self.index:
            self.index[s] = len(self.data)
            self.data += s.encode() + b"\0"
        return self.index[s]


def write_elf(text: bytes, rodata: bytes = b"", *, entry: int = 0, functions=None,
              relocations=(), machine: int = EM_BPF) -> bytes:
    """Build a minimal shared object.

    ``functions`` maps symbol name to text offset.  ``relocations`` holds
    ``(text_or_rodata_vaddr, type, symbol_name_or_None)``; names not in
    ``functions`` become undefined dynamic symbols (syscalls).
    """
    functions = dict(functions or {})
    text_vaddr, ro_vaddr = layout(len(text))
    ro_vaddr = ro_vaddr if rodata else text_vaddr + len(text)

    dynstr, strtab, shstr = _StrTab(), _StrTab(), _StrTab()
    dyn_names = ["entrypoint"]
    for _, _, name in relocations:
        if name and name not in dyn_names:
            dyn_names.append(name)
    dynsym = bytearray(_SYM.size)
    dyn_index = {}
    for name in dyn_names:
        dyn_index[name] = len(dynsym) // _SYM.size
        if name == "entrypoint":
            dynsym += _SYM.pack(dynstr.add(name), 0x12, 0, 1, text_vaddr + entry, 0)
        elif name in functions:
            dynsym += _SYM.pack(dynstr.add(name), 0x12, 0, 1, text_vaddr + functions[name], 0)
        else:
            dynsym += _SYM.pack(dynstr.add(name), 0x10, 0, 0, 0, 0)
    rel = bytearray()
    for vaddr, rtype, name in relocations:
        idx = dyn_index[name] if name else 0
        rel += _REL.pack(vaddr, (idx << 32) | rtype)
    symtab = bytearray(_SYM.size)
    for name, off in sorted(functions.items(), key=lambda kv: (kv[1], kv[0])):
        symtab += _SYM.pack(strtab.add(name), 0x12, 0, 1, text_vaddr + off, 0)
    if "entrypoint" not in functions:
        symtab += _SYM.pack(strtab.add("entrypoint"), 0x12, 0, 1, text_vaddr + entry, 0)

    names = [".text", ".rodata", ".dynsym", ".dynstr", ".rel.dyn", ".symtab", ".strtab", ".shstrtab"]
    for n in names:
        shstr.add(n)
    body = bytearray(TEXT_FILE_OFFSET)
    body += text
    if rodata:
        body += bytes(ro_vaddr - len(body))
        body += rodata

    def place(blob, align=8):
        off = _align(len(body), align)
        body.extend(bytes(off - len(body)))
        body.extend(blob)
        return off

    dynsym_off = place(dynsym)
    dynstr_off = place(dynstr.data, 1)
    rel_off = place(rel)
    symtab_off = place(symtab)
    strtab_off = place(strtab.data, 1)
    shstr_off = place(shstr.data, 1)
    sh_off = _align(len(body), 8)
    body.extend(bytes(sh_off - len(body)))

    shdrs = [_SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)]
    shdrs.append(_SHDR.pack(shstr.index[".text"], 1, 0x6, text_vaddr, text_vaddr, len(text), 0, 0, 8, 0))
    shdrs.append(_SHDR.pack(shstr.index[".rodata"], 1, 0x2, ro_vaddr, ro_vaddr, len(rodata), 0, 0, 8, 0))
    shdrs.append(_SHDR.pack(shstr.index[".dynsym"], 11, 0x2, 0, dynsym_off, len(dynsym), 4, 1, 8, _SYM.size))
    shdrs.append(_SHDR.pack(shstr.index[".dynstr"], 3, 0x2, 0, dynstr_off, len(dynstr.data), 0, 0, 1, 0))
    shdrs.append(_SHDR.pack(shstr.index[".rel.dyn"], 9, 0x2, 0, rel_off, len(rel), 3, 0, 8, _REL.size))
    shdrs.append(_SHDR.pack(shstr.index[".symtab"], 2, 0, 0, symtab_off, len(symtab), 7, 1, 8, _SYM.size))
    shdrs.append(_SHDR.pack(shstr.index[".strtab"], 3, 0, 0, strtab_off, len(strtab.data), 0, 0, 1, 0))
    shdrs.append(_SHDR.pack(shstr.index[".shstrtab"], 3, 0, 0, shstr_off, len(shstr.data), 0, 0, 1, 0))
    for sh in shdrs:
        body += sh

    phdrs = _PHDR.pack(1, 5, text_vaddr, text_vaddr, text_vaddr, len(text), len(text), 0x1000)
    phdrs += _PHDR.pack(1, 4, ro_vaddr, ro_vaddr, ro_vaddr, len(rodata), len(rodata), 0x1000)
    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    ehdr = _EHDR.pack(ident, 3, machine, 1, text_vaddr + entry, 64, sh_off, 0,
                      64, _PHDR.size, 2, _SHDR.size, len(shdrs), len(shdrs) - 1)
    body[0:64] = ehdr
    body[64:64 + len(phdrs)] = phdrs
    return bytes(body)
