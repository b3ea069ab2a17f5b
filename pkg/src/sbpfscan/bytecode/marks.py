"""Static pre-analyses: merge point, dispatch leaves, CPI sites, skippable format calls."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import isa
from .cfg import FALL, TAKEN

CPI_SYSCALLS = frozenset({"sol_invoke_signed_c", "sol_invoke_signed_rust"})
LOG_SYSCALLS = frozenset({"sol_log_"})
FORMAT_SYMBOL_MARKERS = ("alloc3fmt6format", "alloc::fmt::format")
DEALLOC_SYMBOL_MARKERS = ("__rust_dealloc",)
STRING_SIZE = 24

_EQ, _NE = 0x10, 0x50
_RANGE_OPS = frozenset({0x20, 0x30, 0xA0, 0xB0, 0x60, 0x70, 0xC0, 0xD0})


@dataclass(frozen=True)
class StaticMarks:
    merge_point: int | None
    dispatch_leaves: frozenset
    cpi_sites: frozenset
    skip_sites: frozenset
    merge_loop: frozenset = frozenset()
    merge_function: int | None = None


def functions_within(cfg, root, depth):
    """Function starts reachable from ``root`` through at most ``depth`` call edges."""
    seen = {root: 0}
    queue = deque([root])
    while queue:
        f = queue.popleft()
        if seen[f] >= depth:
            continue
        for callee in cfg.callgraph.successors(f):
            if isinstance(callee, tuple) or callee in seen:
                continue
            seen[callee] = seen[f] + 1
            queue.append(callee)
    return seen


def find_merge_loop(image, cfg, depth: int = 3):
    """Locate the unique loop comparing a byte against 0xff; returns (loop, exit block) or None."""
    candidates = {}
    for f in functions_within(cfg, image.entry, depth):
        for b in cfg.functions.get(f, ()):
            last = image.at(cfg.blocks[b].last)
            if not last.is_cond_jump or last.uses_reg_source:
                continue
            if (last.opcode & 0xF0) not in (_EQ, _NE) or last.imm != 0xFF:
                continue
            loops = [lp for lp in cfg.loops_containing(b) if lp.function == f]
            if loops:
                candidates[(f, loops[0].header)] = loops[0]
    if len(candidates) != 1:
        return None
    loop = next(iter(candidates.values()))
    exiting = sorted(b for b in loop.body
                     if any(d not in loop.body for d in cfg.intra_succ(b)))
    if loop.header in exiting:
        return loop, loop.header
    if len(exiting) == 1:
        return loop, exiting[0]
    latches = [b for b in sorted(loop.latches) if b in exiting]
    if len(latches) == 1:
        return loop, latches[0]
    return None


def find_deserialization_merge_point(image, cfg, depth: int = 3):
    found = find_merge_loop(image, cfg, depth)
    return found[1] if found else None


# ---------------------------------------------------------------- dispatch


def _block_defs(image, block):
    """Map register -> defining instruction within the block (last definition wins)."""
    defs = {}
    for a in block.addresses:
        ins = image.at(a)
        if ins.cls in (isa.CLS_LDX, isa.CLS_ALU32, isa.CLS_ALU64, isa.CLS_PQR) or ins.opcode == isa.LDDW:
            defs[ins.dst] = ins
        elif ins.is_call:
            for r in range(6):
                defs[r] = ins
    return defs


def _compare_key(image, cfg, b):
    """Describe the comparison closing block ``b``: (register, load key, opcode) or None."""
    block = cfg.blocks[b]
    last = image.at(block.last)
    if not last.is_cond_jump:
        return None
    defs = _block_defs(image, block)
    if last.uses_reg_source:
        d = defs.get(last.src)
        if d is None or not (d.opcode == isa.LDDW or (d.opcode in (0xB7, 0xB4))):
            return None
    reg = last.dst
    d = defs.get(reg)
    load = None
    if d is not None:
        if not d.is_load:
            return None
        load = (d.src, d.offset, d.opcode)
    return reg, load, last.opcode & 0xF0, len(block.addresses)


def _same_tag(root, node):
    reg, load, _, _ = root
    nreg, nload, _, size = node
    if nload is None:
        return nreg == reg and size == 1
    return load is not None and nload == load


def _tree_leaves(image, cfg, root_block, exclude, depth=0):
    root = _compare_key(image, cfg, root_block)
    if root is None or root[1] is None:
        return set()
    leaves, seen, stack = set(), set(), [root_block]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        key = _compare_key(image, cfg, b)
        last = image.at(cfg.blocks[b].last)
        op = key[2]
        fall = next((d for d, k in cfg.succ[b] if k == FALL), None)
        taken = last.jump_target()
        if op == _EQ:
            eq_side, cont = [taken], [fall]
        elif op == _NE:
            eq_side, cont = [fall], [taken]
        elif op in _RANGE_OPS:
            eq_side, cont = [], [fall, taken]
        else:
            continue
        for d in cont:
            if d is None or d in exclude:
                continue
            k = _compare_key(image, cfg, d)
            if k is not None and _same_tag(root, k):
                stack.append(d)
        for d in eq_side:
            if d is None or d in exclude:
                continue
            k = _compare_key(image, cfg, d)
            if k is not None and _same_tag(root, k):
                stack.append(d)
                continue
            sub = _tree_leaves(image, cfg, d, exclude | seen, depth + 1) if depth < 4 else set()
            if len(sub) >= 2:
                leaves |= sub
            else:
                leaves.add(d)
    return leaves


def find_dispatch_leaves(image, cfg, exclude=frozenset()):
    best = set()
    for f in sorted(functions_within(cfg, image.entry, 1)):
        for b in sorted(cfg.functions.get(f, ())):
            if b in exclude:
                continue
            leaves = _tree_leaves(image, cfg, b, set(exclude))
            if len(leaves) > len(best):
                best = leaves
    return frozenset(best) if len(best) >= 2 else frozenset()


# ---------------------------------------------------------------- CPI


def find_cpi_sites(image, cfg):
    sites = set()
    for b, tgt in cfg.call_sites.items():
        if tgt and tgt[0] == "syscall" and tgt[1] in CPI_SYSCALLS:
            sites.add(cfg.blocks[b].last)
    return frozenset(sites)


# ---------------------------------------------------------------- format skip


def _symbol_addresses(image, markers):
    return {a for a, name in image.symbols.items() if any(m in name for m in markers)}


def _slot_overlap(off, width, slot):
    return off < slot + STRING_SIZE and slot < off + width


def _check_format_use(image, cfg, call_addr, slot, dealloc_fns):
    """Forward def-use walk from the format call; True when the result only feeds log then free."""
    f = cfg.function_of(cfg.block_of[call_addr])
    body = cfg.functions[f]
    call_block = cfg.block_of[call_addr]
    start = next((d for d, k in cfg.succ[call_block] if k == FALL), None)
    if start is None:
        return False
    # abstract register: ('fp', k) for r10 + k, 'T' for tainted, None otherwise
    carried = {r: v for r, v in _frame_pointers(image, cfg, call_addr).items() if r >= 6}
    init = ({**carried, 10: ("fp", 0)}, False, False)
    states = {start: init}
    work = deque([start])
    exits_ok = True
    visits = 0

    def join(a, b):
        regs = {r: v for r, v in a[0].items() if b[0].get(r) == v}
        for r in set(a[0]) | set(b[0]):
            if a[0].get(r) == "T" or b[0].get(r) == "T":
                regs[r] = "T"
        return regs, a[1] and b[1], a[2] and b[2]

    while work:
        visits += 1
        if visits > 10000:
            return False
        b = work.popleft()
        regs, logged, freed = states[b]
        regs = dict(regs)
        block = cfg.blocks[b]
        for a in block.addresses:
            ins = image.at(a)
            cls = ins.cls
            src_val = regs.get(ins.src) if ins.uses_reg_source else None
            if cls == isa.CLS_LDX:
                base = regs.get(ins.src)
                if base == "T":
                    return False
                if isinstance(base, tuple) and _slot_overlap(base[1] + ins.offset, ins.mem_width, slot):
                    regs[ins.dst] = "T"
                else:
                    regs[ins.dst] = None
            elif cls in (isa.CLS_ST, isa.CLS_STX):
                if cls == isa.CLS_STX and regs.get(ins.src) in ("T",):
                    return False
                if cls == isa.CLS_STX and isinstance(regs.get(ins.src), tuple):
                    v = regs[ins.src]
                    if _slot_overlap(v[1], 1, slot):
                        return False
                if regs.get(ins.dst) == "T":
                    return False
            elif ins.opcode == isa.LDDW:
                regs[ins.dst] = None
            elif cls in (isa.CLS_ALU32, isa.CLS_ALU64, isa.CLS_PQR):
                dst_val = regs.get(ins.dst)
                name = ins.mnemonic
                if dst_val == "T" or src_val == "T":
                    if name.startswith("mov") and ins.uses_reg_source and cls == isa.CLS_ALU64:
                        regs[ins.dst] = "T"
                        continue
                    return False
                if name == "mov64" and ins.uses_reg_source:
                    regs[ins.dst] = regs.get(ins.src)
                elif name == "add64" and not ins.uses_reg_source and isinstance(dst_val, tuple):
                    regs[ins.dst] = ("fp", dst_val[1] + ins.imm)
                else:
                    regs[ins.dst] = None
            elif ins.is_cond_jump:
                if regs.get(ins.dst) == "T" or src_val == "T":
                    return False
            elif ins.is_call:
                tgt = image.call_target(ins)
                args = {r: regs.get(r) for r in range(1, 6)}
                tainted = {r for r, v in args.items() if v == "T"}
                slot_ptrs = {r for r, v in args.items()
                             if isinstance(v, tuple) and _slot_overlap(v[1], STRING_SIZE, slot)}
                if tgt and tgt[0] == "syscall" and tgt[1] in LOG_SYSCALLS:
                    if tainted - {1, 2} or slot_ptrs:
                        return False
                    if tainted:
                        logged = True
                elif tgt and tgt[0] == "function" and tgt[1] in dealloc_fns:
                    if tainted - {1, 2} or slot_ptrs:
                        return False
                    if 1 in tainted:
                        if not logged:
                            return False
                        freed = True
                elif tainted or slot_ptrs:
                    return False
                for r in range(6):
                    regs[r] = None
            elif ins.is_exit:
                if regs.get(0) == "T":
                    return False
                if not freed:
                    exits_ok = False
        nxt_state = (regs, logged, freed)
        for d in cfg.intra_succ(b):
            if d not in body:
                continue
            if d in states:
                merged = join(states[d], nxt_state)
                if merged == states[d]:
                    continue
                states[d] = merged
            else:
                states[d] = nxt_state
            work.append(d)
    return exits_ok and any(s[2] for s in states.values())


def _frame_pointers(image, cfg, call_addr):
    """Registers holding r10 + k just before ``call_addr``, tracked within its block."""
    block = cfg.blocks[cfg.block_of[call_addr]]
    vals = {10: ("fp", 0)}
    for a in block.addresses[:-1]:
        ins = image.at(a)
        if ins.is_call:
            for r in range(6):
                vals.pop(r, None)
            continue
        if ins.is_store or ins.is_jump:
            continue
        cur = vals.get(ins.dst)
        if ins.opcode == 0xBF:
            if ins.src in vals:
                vals[ins.dst] = vals[ins.src]
            else:
                vals.pop(ins.dst, None)
        elif ins.opcode == 0x07 and cur is not None:
            vals[ins.dst] = ("fp", cur[1] + ins.imm)
        else:
            vals.pop(ins.dst, None)
    return vals


def _sret_slot(image, cfg, call_addr):
    """Stack offset (relative to r10) passed as r1 to the call, if statically evident."""
    v = _frame_pointers(image, cfg, call_addr).get(1)
    return v[1] if v else None


def find_format_skip_sites(image, cfg):
    fmt_fns = _symbol_addresses(image, FORMAT_SYMBOL_MARKERS)
    dealloc_fns = _symbol_addresses(image, DEALLOC_SYMBOL_MARKERS)
    if not fmt_fns:
        return frozenset()
    sites = set()
    for b, tgt in cfg.call_sites.items():
        if not tgt or tgt[0] != "function" or tgt[1] not in fmt_fns:
            continue
        call_addr = cfg.blocks[b].last
        slot = _sret_slot(image, cfg, call_addr)
        if slot is None:
            continue
        if _check_format_use(image, cfg, call_addr, slot, dealloc_fns):
            sites.add(call_addr)
    return frozenset(sites)


def compute_marks(image, cfg, merge_depth: int = 3) -> StaticMarks:
    found = find_merge_loop(image, cfg, merge_depth)
    merge_point, loop_body, loop_fn = None, frozenset(), None
    if found:
        loop, merge_point = found
        loop_body, loop_fn = loop.body, loop.function
    return StaticMarks(
        merge_point=merge_point,
        dispatch_leaves=find_dispatch_leaves(image, cfg, loop_body),
        cpi_sites=find_cpi_sites(image, cfg),
        skip_sites=find_format_skip_sites(image, cfg),
        merge_loop=loop_body,
        merge_function=loop_fn,
    )
