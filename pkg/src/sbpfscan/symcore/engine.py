"""Single-instruction symbolic stepping, forking and ite-based state merging."""

from __future__ import annotations

import z3

from ..bytecode import isa
from ..errors import ConcretizationTimeout, ContradictionError, MergeRefused
from ..runtime.ledger import WRITE_FIELDS, CriticalAction
from .memory import FRAME_SIZE, INPUT_START, MAX_CALL_DEPTH, PROGRAM_START
from .solver import NO, TIMEOUT, YES, to_smtlib
from .state import ABORTED, ACTIVE, EXITED, UNSAT, Frame, SymState
from .values import (MASK32, MASK64, DivisionByZero, alu, byte_to_z3, bytes_to_value, byteswap,
                     compare, fold, fold_bool, free_names, is_sym, same_byte, to_bv,
                     value_to_bytes)

_DIV_NAMES = frozenset({"div", "mod", "udiv", "urem", "sdiv", "srem"})


def is_sat(state: SymState, solver, extra=None) -> str:
    return solver.check(state.all_constraints(), extra)


def concretize(state: SymState, solver, exprs):
    return solver.concretize(state.all_constraints(), exprs)


def dump_smt(state: SymState, name="finding") -> str:
    return to_smtlib(state.all_constraints(), name)


# ----------------------------------------------------------------- helpers


def _alu_parts(ins):
    name = ins.mnemonic
    if name in ("le", "be"):
        return name, ins.imm
    return name[:-2], int(name[-2:])


def _operand(state, ins, bits):
    if ins.uses_reg_source:
        return state.regs[ins.src]
    if bits == 64:
        return ins.imm & MASK64
    return ins.imm & MASK32


def _fold_lengths(state, ctx, value):
    """Pin not-yet-hybridized length variables in pointer arithmetic to their maximum."""
    if not is_sym(value) or state.hybridized:
        return value
    if not (free_names(value) & ctx.length_names):
        return value
    v = fold(z3.substitute(value, *ctx.length_pairs))
    if isinstance(v, int) and v >= 1 << 32:
        return v
    return value


def _mark_input(state, ctx, region, off, width, kind, site):
    if region.name != "input" or state.ledger is None or not state.ledger.active:
        return
    if region.base != INPUT_START or region.size != ctx.layout.size:
        return
    seen = set()
    for o in range(off, off + width):
        acc, fld, _ = ctx.layout.field_at(o)
        if acc is None or (acc, fld) in seen:
            continue
        seen.add((acc, fld))
        if kind == "read":
            state.ledger.on_read(acc, fld)
        else:
            state.ledger.on_write(acc, fld, site)
            if fld in WRITE_FIELDS and site not in state.emitted:
                snap = state.copy()
                snap.post_deser = state.post_deser
                state.emitted = state.emitted | {site}
                state.new_actions.append(CriticalAction(
                    kind="account-write", site=site, account_index=acc, field=fld,
                    reads=state.ledger.read_accounts, state=snap, path_id=state.trace))


def resolve_address(state, ctx, addr, width):
    """Concrete addresses an access may hit: list of (state, address or None for a fault)."""
    if isinstance(addr, int):
        return [(state, addr)]
    addr = _fold_lengths(state, ctx, addr)
    if isinstance(addr, int):
        return [(state, addr)]
    solver = ctx.solver
    cons = state.all_constraints()
    try:
        first = solver.concretize(cons, [addr])[0]
    except ContradictionError:
        state.status = UNSAT
        return [(state, None)]
    except ConcretizationTimeout:
        state.degraded = True
        return [(state.abort("solver-timeout"), None)]
    region = state.memory.region_near(first)
    if region is None:
        return [(state.abort("memory-fault"), None)]
    lo = z3.BitVecVal(region.base, 64)
    hi = z3.BitVecVal(region.base + region.size - width, 64)
    out_cond = z3.Or(z3.ULT(addr, lo), z3.UGT(addr, hi))
    results = []
    if solver.check(cons, out_cond) != NO:
        fault = ctx.fork(state)
        fault.add_constraint(out_cond)
        results.append((fault.abort("memory-fault"), None))
    values = [first]
    cap = ctx.config.max_offset_fork
    exhausted = False
    while len(values) < cap:
        excl = z3.And(z3.Not(out_cond), *[addr != v for v in values])
        verdict = solver.check(cons, excl)
        if verdict == NO:
            exhausted = True
            break
        if verdict == TIMEOUT:
            break
        try:
            values.append(solver.concretize(cons, [addr], excl)[0])
        except (ContradictionError, ConcretizationTimeout):
            break
    degraded = not exhausted
    if len(values) == 1 and exhausted:
        if not results:
            return [(state, first)]
        state.add_constraint(addr == first)
        return results + [(state, first)]
    for i, v in enumerate(values):
        s = state if i == len(values) - 1 else ctx.fork(state)
        s.add_constraint(addr == v)
        s.degraded = s.degraded or degraded
        results.append((s, v))
    return results


# ------------------------------------------------------------------ stepping


def step(state: SymState, ctx) -> list:
    """Execute one instruction and return the successor states (terminal ones included)."""
    try:
        ins = ctx.image.at(state.pc)
    except KeyError:
        return [state.abort("pc-outside-text")]
    state.steps += 1
    if state.steps > ctx.config.instruction_limit:
        state.degraded = True
        return [state.abort("instruction-limit")]
    state.coverage.add(state.pc)
    if (not state.deser_done and state.loop_depth is None
            and state.pc in ctx.merge_loop_addrs):
        state.loop_depth = len(state.call_stack)
    cls = ins.cls
    if ins.opcode == isa.LDDW:
        state.regs[ins.dst] = ins.imm & MASK64
        state.pc = ins.next_address()
        return [state]
    if cls in (isa.CLS_ALU32, isa.CLS_ALU64, isa.CLS_PQR):
        return _step_alu(state, ctx, ins)
    if cls == isa.CLS_LDX:
        return _step_load(state, ctx, ins)
    if cls in (isa.CLS_ST, isa.CLS_STX):
        return _step_store(state, ctx, ins)
    if ins.opcode == isa.JA:
        state.pc = ins.jump_target()
        return [state]
    if ins.is_cond_jump:
        return _step_branch(state, ctx, ins)
    if ins.opcode == isa.CALL:
        return _step_call(state, ctx, ins)
    if ins.opcode == isa.CALLX:
        return _step_callx(state, ctx, ins)
    if ins.opcode == isa.EXIT:
        return _step_exit(state, ctx)
    return [state.abort("unsupported-instruction")]


def _step_alu(state, ctx, ins):
    name, bits = _alu_parts(ins)
    dst = state.regs[ins.dst]
    nxt = ins.next_address()
    if name in ("le", "be"):
        state.regs[ins.dst] = byteswap(dst, bits, name == "be")
        state.pc = nxt
        return [state]
    src = _operand(state, ins, bits if ins.cls != isa.CLS_PQR else 64)
    if ins.cls == isa.CLS_PQR and not ins.uses_reg_source:
        src = ins.imm & (MASK64 if bits == 64 else MASK32)
    if name == "mov":
        if bits == 64:
            state.regs[ins.dst] = src
        else:
            state.regs[ins.dst] = src & MASK32 if isinstance(src, int) else fold(
                z3.ZeroExt(32, z3.Extract(31, 0, to_bv(src))))
        state.pc = nxt
        return [state]
    out = [state]
    if name in _DIV_NAMES and is_sym(src):
        divisor = to_bv(src) if bits == 64 else z3.Extract(31, 0, to_bv(src))
        zero = divisor == 0
        cons = state.all_constraints()
        zv = ctx.solver.check(cons, zero)
        nzv = ctx.solver.check(cons, z3.Not(zero))
        if nzv == NO:
            return [state.abort("division-by-zero")]
        if zv != NO:
            bad = ctx.fork(state)
            bad.add_constraint(zero)
            state.add_constraint(z3.Not(zero))
            out = [state, bad.abort("division-by-zero")]
            if TIMEOUT in (zv, nzv):
                state.degraded = bad.degraded = True
    try:
        res = alu(name, bits, dst, src)
    except DivisionByZero:
        return [state.abort("division-by-zero")]
    if name in ("add", "sub") and bits == 64:
        res = _fold_lengths(state, ctx, res)
    state.regs[ins.dst] = res
    state.pc = nxt
    return out


def _step_load(state, ctx, ins):
    width = ins.mem_width
    base = state.regs[ins.src]
    addr = alu("add", 64, base, ins.offset & MASK64)
    out = []
    for s, a in resolve_address(state, ctx, addr, width):
        if a is None:
            out.append(s)
            continue
        region = s.memory.find(a, width)
        if region is None:
            out.append(s.abort("memory-fault"))
            continue
        off = a - region.base
        val = bytes_to_value(s.memory.read(region, off, width))
        _mark_input(s, ctx, region, off, width, "read", ins.address)
        s.regs[ins.dst] = val
        s.pc = ins.next_address()
        out.append(s)
    return out


def _step_store(state, ctx, ins):
    width = ins.mem_width
    if ins.cls == isa.CLS_STX:
        value = state.regs[ins.src]
    else:
        value = ins.imm & MASK64
    addr = alu("add", 64, state.regs[ins.dst], ins.offset & MASK64)
    out = []
    for s, a in resolve_address(state, ctx, addr, width):
        if a is None:
            out.append(s)
            continue
        region = s.memory.find(a, width)
        if region is None or not region.writable:
            out.append(s.abort("memory-fault"))
            continue
        off = a - region.base
        _mark_input(s, ctx, region, off, width, "write", ins.address)
        s.memory.write(region, off, value_to_bytes(value, width))
        s.pc = ins.next_address()
        out.append(s)
    return out


def branch(state, ctx, cond, taken_pc, fall_pc, site):
    """Fork on a boolean condition; the fall-through successor comes first."""
    cond = fold_bool(cond)
    if cond is True or cond is False:
        state.pc = taken_pc if cond else fall_pc
        return [state]
    if state.ledger is not None:
        state.ledger.on_branch(free_names(cond))
    cons = state.all_constraints()
    t = ctx.solver.check(cons, cond)
    f = ctx.solver.check(cons, z3.Not(cond))
    if t == NO and f == NO:
        state.status = UNSAT
        return [state]
    if t == NO:
        state.pc = fall_pc
        return [state]
    if f == NO:
        state.pc = taken_pc
        return [state]
    taken = ctx.fork(state)
    state.add_constraint(z3.Not(cond))
    state.trace = state.trace + ((site, False),)
    state.pc = fall_pc
    taken.add_constraint(cond)
    taken.trace = taken.trace + ((site, True),)
    taken.pc = taken_pc
    if TIMEOUT in (t, f):
        state.degraded = taken.degraded = True
    return [state, taken]


def _step_branch(state, ctx, ins):
    a = state.regs[ins.dst]
    b = state.regs[ins.src] if ins.uses_reg_source else ins.imm & MASK64
    cond = compare(ins.opcode & 0xF0, a, b)
    return branch(state, ctx, cond, ins.jump_target(), ins.next_address(), ins.address)


def _push_frame(state, ctx, target, ret):
    if len(state.call_stack) >= MAX_CALL_DEPTH - 1:
        return [state.abort("call-depth-exceeded")]
    state.call_stack = state.call_stack + (
        Frame(ret, tuple(state.regs[6:10]), state.regs[10]),)
    fp = state.regs[10]
    state.regs[10] = fp + FRAME_SIZE if isinstance(fp, int) else fold(to_bv(fp) + FRAME_SIZE)
    state.pc = target
    return [state]


def _maybe_complete_on_call(state, ctx):
    if (not state.deser_done and state.loop_depth == 0
            and state.pc not in ctx.merge_loop_addrs and not state.call_stack):
        ctx.complete_deserialization(state)


def _step_call(state, ctx, ins):
    _maybe_complete_on_call(state, ctx)
    tgt = ctx.image.call_target(ins)
    ret = ins.next_address()
    if tgt[0] == "function":
        if ins.address in ctx.skip_sites:
            return _skip_format(state, ctx, ins)
        if tgt[1] not in ctx.image.index:
            return [state.abort("call-target-outside-text")]
        return _push_frame(state, ctx, tgt[1], ret)
    if tgt[0] == "syscall":
        succ = ctx.handle_syscall(state, tgt[1])
        for s in succ:
            if s.status == ACTIVE:
                s.pc = ret
        return succ
    return [state.abort(f"unresolved-call-{tgt[1]:#x}")]


def _skip_format(state, ctx, ins):
    """Replace a logging-only format call by an empty string result."""
    dst = state.regs[1]
    pairs = resolve_address(state, ctx, dst, 24)
    out = []
    for s, a in pairs:
        if a is None:
            out.append(s)
            continue
        region = s.memory.find(a, 24)
        if region is None or not region.writable:
            out.append(s.abort("memory-fault"))
            continue
        s.memory.write(region, a - region.base, [0] * 24)
        s.regs[0] = 0
        s.pc = ins.next_address()
        out.append(s)
    return out


def _step_callx(state, ctx, ins):
    _maybe_complete_on_call(state, ctx)
    if not 0 <= ins.imm <= 10:
        return [state.abort("callx-register")]
    v = state.regs[ins.imm]
    if is_sym(v):
        try:
            c = ctx.solver.concretize(state.all_constraints(), [v])[0]
        except (ContradictionError, ConcretizationTimeout):
            return [state.abort("callx-target")]
        state.add_constraint(v == c)
        state.degraded = True
        v = c
    target = v - PROGRAM_START - ctx.image.text_vaddr
    if target not in ctx.image.index:
        target = v if v in ctx.image.index else None
    if target is None:
        return [state.abort("callx-target")]
    return _push_frame(state, ctx, target, ins.next_address())


def _step_exit(state, ctx):
    if not state.call_stack:
        state.status = EXITED
        state.exit_code = state.regs[0]
        return [state]
    frame = state.call_stack[-1]
    state.call_stack = state.call_stack[:-1]
    state.regs[6:10] = list(frame.saved)
    state.regs[10] = frame.frame_ptr
    state.pc = frame.return_pc
    if (not state.deser_done and state.loop_depth is not None
            and len(state.call_stack) < state.loop_depth):
        ctx.complete_deserialization(state)
    return [state]


def exited_gracefully(state, solver) -> bool:
    """Exit code 0 is feasible; the constraint r0 == 0 is added when symbolic."""
    if state.status != EXITED:
        return False
    code = state.exit_code
    if isinstance(code, int):
        return code == 0
    cond = to_bv(code) == 0
    if solver.check(state.all_constraints(), cond) == NO:
        return False
    state.add_constraint(cond)
    return True


# ------------------------------------------------------------------- merging


def _guards(states):
    """Per-state guard formulas relative to the shared constraint prefix."""
    cons = [s.constraints for s in states]
    n = min(len(c) for c in cons)
    prefix = 0
    while prefix < n and all(c[prefix].eq(cons[0][prefix]) for c in cons):
        prefix += 1
    suffixes = [c[prefix:] for c in cons]
    return cons[0][:prefix], [z3.And(*s) if s else z3.BoolVal(True) for s in suffixes]


def _merge_value(guards, values, width):
    first = values[0]
    if all(same_byte(first, v) if width == 8 else _same_reg(first, v) for v in values[1:]):
        return first
    acc = _as_bv(values[-1], width)
    for g, v in zip(reversed(guards[:-1]), reversed(values[:-1])):
        acc = z3.If(g, _as_bv(v, width), acc)
    res = z3.simplify(acc)
    if z3.is_bv_value(res):
        return res.as_long()
    return res


def _as_bv(v, width):
    if width == 8:
        return byte_to_z3(v)
    return to_bv(v, 64)


def _same_reg(a, b):
    if isinstance(a, int) or isinstance(b, int):
        return type(a) is type(b) and a == b
    return a.eq(b)


def merge(states, ctx=None) -> SymState:
    """Fold states sharing pc and call stack into one state with ite-guarded contents."""
    if not states:
        raise MergeRefused("nothing to merge")
    if len(states) == 1:
        return states[0]
    head = states[0]
    for s in states[1:]:
        if s.pc != head.pc:
            raise MergeRefused(f"program counters differ ({head.pc:#x} vs {s.pc:#x})")
        if [f.return_pc for f in s.call_stack] != [f.return_pc for f in head.call_stack]:
            raise MergeRefused("call stacks differ")
        if s.memory.regions != head.memory.regions:
            raise MergeRefused("region layouts differ")
    prefix, guards = _guards(states)
    merged = head.copy()
    if ctx is not None:
        merged.id = ctx.next_id()
        merged.fork_time = ctx.tick()
    suffix_disj = fold_bool(z3.Or(*guards))
    merged.constraints = tuple(prefix)
    if suffix_disj is not True and not _tautology(suffix_disj, ctx):
        merged.constraints = merged.constraints + (suffix_disj,)
    merged.regs = [_merge_value(guards, [s.regs[r] for s in states], 64) for r in range(11)]
    for region in head.memory.regions:
        offsets = set()
        for s in states:
            offsets.update(s.memory.written_offsets(region.name))
        ov = merged.memory.overlays[region.name]
        for off in offsets:
            vals = [s.memory.get(region, off) for s in states]
            ov[off] = _merge_value(guards, vals, 8)
    merged.call_stack = tuple(
        Frame(f.return_pc,
              tuple(_merge_value(guards, [s.call_stack[i].saved[k] for s in states], 64)
                    for k in range(4)),
              _merge_value(guards, [s.call_stack[i].frame_ptr for s in states], 64))
        for i, f in enumerate(head.call_stack))
    merged.coverage = set().union(*(s.coverage for s in states))
    merged.degraded = any(s.degraded for s in states)
    merged.steps = max(s.steps for s in states)
    merged.heap_ptr = max(s.heap_ptr for s in states)
    merged.emitted = frozenset().union(*(s.emitted for s in states))
    merged.trace = _common_prefix([s.trace for s in states])
    depths = [s.loop_depth for s in states if s.loop_depth is not None]
    merged.loop_depth = min(depths) if depths else None
    for s in states[1:]:
        _merge_ledger(merged.ledger, s.ledger)
    return merged


def _tautology(cond, ctx):
    if ctx is None:
        return False
    return ctx.solver.check([], z3.Not(cond)) == NO


def _common_prefix(seqs):
    first = seqs[0]
    n = min(len(s) for s in seqs)
    i = 0
    while i < n and all(s[i] == first[i] for s in seqs):
        i += 1
    return first[:i]


def _merge_ledger(into, other):
    if into is None or other is None:
        return
    for acc, f in other.reads.items():
        into.reads[acc] = into.reads.get(acc, frozenset()) | f
    into.owner_compared |= other.owner_compared
    for acc, src in other.key_sources.items():
        into.key_sources[acc] = into.key_sources.get(acc, frozenset()) | src
    into.signer_seen |= other.signer_seen
    into.written |= other.written
    into.writes = into.writes + tuple(w for w in other.writes if w not in into.writes)


def merge_tree(states, ctx=None) -> list:
    """Merge complementary-suffix pairs bottom-up; falls back to a single disjunctive merge."""
    groups = {}
    for s in states:
        groups.setdefault((s.pc, tuple(f.return_pc for f in s.call_stack)), []).append(s)
    out = []
    for members in groups.values():
        out.append(_merge_group(members, ctx))
    return out


def _merge_group(states, ctx):
    work = list(states)
    changed = True
    while len(work) > 1 and changed:
        changed = False
        used = [False] * len(work)
        nxt = []
        for i, a in enumerate(work):
            if used[i]:
                continue
            partner = None
            for j in range(i + 1, len(work)):
                if not used[j] and _complementary(a, work[j]):
                    partner = j
                    break
            if partner is None:
                nxt.append(a)
                continue
            used[i] = used[partner] = True
            b = work[partner]
            nxt.append(_merge_complementary(a, b, ctx))
            changed = True
        work = nxt
    if len(work) == 1:
        return work[0]
    return merge(work, ctx)


def _complementary(a, b):
    ca, cb = a.constraints, b.constraints
    if len(ca) != len(cb) or not ca:
        return False
    if any(not x.eq(y) for x, y in zip(ca[:-1], cb[:-1])):
        return False
    x, y = ca[-1], cb[-1]
    return (z3.is_not(x) and x.arg(0).eq(y)) or (z3.is_not(y) and y.arg(0).eq(x))


def _merge_complementary(a, b, ctx):
    # guards come out as (c, not c): the disjunction is dropped as a tautology
    m = merge([a, b], None)
    if ctx is not None:
        m.id = ctx.next_id()
        m.fork_time = ctx.tick()
    return m


__all__ = [
    "step", "merge", "merge_tree", "branch", "is_sat", "concretize", "dump_smt",
    "resolve_address", "exited_gracefully", "ACTIVE", "ABORTED", "EXITED", "UNSAT", "YES",
]
