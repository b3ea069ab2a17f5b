"""Symbolic models of the runtime syscalls."""

from __future__ import annotations

import hashlib

import z3

from ..errors import ConcretizationTimeout, ConfigurationError, ContradictionError
from ..symcore.engine import _mark_input
from ..symcore.memory import HEAP_SIZE, HEAP_START
from ..symcore.values import SymByte, byte_to_z3, bytes_to_value, fold, to_bv, value_to_bytes
from .ledger import CriticalAction

LOG = frozenset({"sol_log_", "sol_log_64_", "sol_log_pubkey", "sol_log_compute_units_",
                 "sol_log_data", "sol_set_return_data"})
ABORTS = frozenset({"abort", "sol_panic_"})
MEMORY = frozenset({"sol_memcpy_", "sol_memmove_", "sol_memset_", "sol_memcmp_"})
CPI = frozenset({"sol_invoke_signed_c", "sol_invoke_signed_rust"})
PDA = frozenset({"sol_create_program_address", "sol_try_find_program_address"})

INSTRUCTION_SIZE = 40       # SolInstruction
ACCOUNT_META_SIZE = 16      # SolAccountMeta
ACCOUNT_INFO_SIZE = 56      # SolAccountInfo
RUST_PROGRAM_ID_OFFSET = 48
SIGNER_SEED_SIZE = 16
MAX_SEEDS = 16
MAX_SEED_BYTES = 32
PDA_BUMP = 255
CLOCK_SIZE = 40
RENT_SIZE = 17
MAX_MEMOP = 1 << 16


class _Fault(Exception):
    def __init__(self, state):
        self.state = state


def _concrete(state, ctx, v, what):
    """Pin a syscall argument to one value (syscall arguments are expected concrete)."""
    if isinstance(v, int):
        return v
    v = fold(v)
    if isinstance(v, int):
        return v
    try:
        c = ctx.solver.concretize(state.all_constraints(), [v])[0]
    except (ContradictionError, ConcretizationTimeout):
        raise _Fault(state.abort(f"unresolvable-{what}")) from None
    state.add_constraint(v == c)
    state.degraded = True
    return c


def _region(state, addr, n, write=False):
    if n == 0:
        return None, 0
    region = state.memory.find(addr, n)
    if region is None or (write and not region.writable):
        raise _Fault(state.abort("memory-fault"))
    return region, addr - region.base


def read_bytes(state, ctx, addr, n, site=None):
    region, off = _region(state, addr, n)
    if region is None:
        return []
    _mark_input(state, ctx, region, off, n, "read", site)
    return state.memory.read(region, off, n)


def write_bytes(state, ctx, addr, data, site):
    region, off = _region(state, addr, len(data), write=True)
    if region is None:
        return
    _mark_input(state, ctx, region, off, len(data), "write", site)
    state.memory.write(region, off, data)


def read_u64(state, ctx, addr, site=None):
    return bytes_to_value(read_bytes(state, ctx, addr, 8, site))


def handle(state, ctx, name):
    site = state.pc
    try:
        if name in ABORTS:
            return [state.abort(name)]
        if name in LOG or name == "sol_get_return_data":
            state.regs[0] = 0
            return [state]
        if name in MEMORY:
            return _memory_op(state, ctx, name, site)
        if name == "sol_alloc_free_":
            return _alloc(state, ctx)
        if name in CPI:
            return _invoke(state, ctx, name, site)
        if name in PDA:
            return _pda(state, ctx, name, site)
        if name in ("sol_sha256", "sol_keccak256"):
            return _hash(state, ctx, name, site)
        if name in ("sol_get_clock_sysvar", "sol_get_rent_sysvar"):
            size = CLOCK_SIZE if name == "sol_get_clock_sysvar" else RENT_SIZE
            n = next(ctx.havoc_counter)
            dst = _concrete(state, ctx, state.regs[1], "sysvar-pointer")
            data = []
            for w in range((size + 7) // 8):
                data += value_to_bytes(z3.BitVec(f"sysvar{n}_{w}", 64), 8)
            write_bytes(state, ctx, dst, data[:size], site)
            state.regs[0] = 0
            return [state]
    except _Fault as f:
        return [f.state]
    raise ConfigurationError(f"unmodeled syscall: {name}")


def _memory_op(state, ctx, name, site):
    r = state.regs
    n = _concrete(state, ctx, r[3], "length")
    if n > MAX_MEMOP:
        return [state.abort("memory-op-too-large")]
    if name == "sol_memset_":
        dst = _concrete(state, ctx, r[1], "pointer")
        byte = r[2] & 0xFF if isinstance(r[2], int) else SymByte(to_bv(r[2]), 0)
        write_bytes(state, ctx, dst, [byte] * n, site)
    elif name in ("sol_memcpy_", "sol_memmove_"):
        dst = _concrete(state, ctx, r[1], "pointer")
        src = _concrete(state, ctx, r[2], "pointer")
        data = read_bytes(state, ctx, src, n, site)
        write_bytes(state, ctx, dst, data, site)
    else:
        a = _concrete(state, ctx, r[1], "pointer")
        b = _concrete(state, ctx, r[2], "pointer")
        out = _concrete(state, ctx, r[4], "pointer")
        xs = read_bytes(state, ctx, a, n, site)
        ys = read_bytes(state, ctx, b, n, site)
        write_bytes(state, ctx, out, value_to_bytes(_memcmp_value(xs, ys), 4), site)
    state.regs[0] = 0
    return [state]


def _memcmp_value(xs, ys):
    if all(isinstance(v, int) for v in xs + ys):
        for x, y in zip(xs, ys):
            if x != y:
                return (x - y) & 0xFFFFFFFF
        return 0
    acc = z3.BitVecVal(0, 32)
    for x, y in reversed(list(zip(xs, ys))):
        zx, zy = byte_to_z3(x), byte_to_z3(y)
        acc = z3.If(zx == zy, acc, z3.ZeroExt(24, zx) - z3.ZeroExt(24, zy))
    return fold(acc)


def _alloc(state, ctx):
    size = _concrete(state, ctx, state.regs[1], "size")
    free_ptr = state.regs[2]
    if not (isinstance(free_ptr, int) and free_ptr == 0):
        state.regs[0] = 0
        return [state]
    start = (state.heap_ptr + 7) & ~7
    if start + size > HEAP_SIZE:
        state.regs[0] = 0
    else:
        state.regs[0] = HEAP_START + start
        state.heap_ptr = start + size
    return [state]


def account_of(ctx, addr):
    """Account index owning an input-region address in the analysis layout, if any."""
    from ..symcore.memory import INPUT_START
    off = addr - INPUT_START
    if not 0 <= off < ctx.layout.size:
        return None, None
    acc, fld, _ = ctx.layout.field_at(off)
    return acc, fld


def _words(data):
    return tuple(bytes_to_value(data[8 * w:8 * w + 8]) for w in range(len(data) // 8))


def _invoke(state, ctx, name, site):
    r = state.regs
    ix = _concrete(state, ctx, r[1], "instruction")
    handed = []
    havoc_plan = []
    if name == "sol_invoke_signed_c":
        pid_ptr = _concrete(state, ctx, read_u64(state, ctx, ix), "program-id")
        target = _words(read_bytes(state, ctx, pid_ptr, 32, site))
        infos = _concrete(state, ctx, r[2], "account-infos")
        n_infos = _concrete(state, ctx, r[3], "account-infos-len")
        if n_infos > 64:
            return [state.abort("too-many-accounts")]
        for k in range(n_infos):
            base = infos + ACCOUNT_INFO_SIZE * k
            key_ptr = _concrete(state, ctx, read_u64(state, ctx, base), "key")
            acc, _ = account_of(ctx, key_ptr)
            handed.append(acc)
            writable = read_bytes(state, ctx, base + 49, 1)[0]
            lam_ptr = _concrete(state, ctx, read_u64(state, ctx, base + 8), "lamports")
            data_ptr = _concrete(state, ctx, read_u64(state, ctx, base + 24), "data")
            if acc is not None:
                havoc_plan.append((acc, writable, lam_ptr, data_ptr))
    else:
        target = _words(read_bytes(state, ctx, ix + RUST_PROGRAM_ID_OFFSET, 32, site))
    action = CriticalAction(kind="cpi", site=site, target_key=target,
                            handed_accounts=tuple(a for a in handed if a is not None),
                            reads=state.ledger.read_accounts if state.ledger else frozenset(),
                            path_id=state.trace)
    snap = state.copy()
    snap.post_deser = state.post_deser
    action.state = snap
    state.new_actions.append(action)
    n = state.cpi_count
    state.cpi_count += 1
    for acc, writable, lam_ptr, data_ptr in havoc_plan:
        _havoc_account(state, ctx, n, acc, writable, lam_ptr, data_ptr)
    state.regs[0] = 0
    return [state]


def _havoc_account(state, ctx, n, acc, writable, lam_ptr, data_ptr):
    """Writable accounts handed to a callee may come back with new lamports and data."""
    w = byte_to_z3(writable)
    cond = w != 0
    if isinstance(writable, int):
        if writable == 0:
            return
        cond = True
    entries = [(lam_ptr, [z3.BitVec(f"cpi{n}_acc{acc}_lamports", 64)])]
    words = (ctx.layout.max_data + 7) // 8
    entries.append((data_ptr, [z3.BitVec(f"cpi{n}_acc{acc}_data_{k}", 64) for k in range(words)]))
    for ptr, fresh in entries:
        size = 8 * len(fresh)
        if ptr == data_ptr:
            size = ctx.layout.max_data
        region = state.memory.find(ptr, size) if size else None
        if region is None:
            continue
        off = ptr - region.base
        old = state.memory.read(region, off, size)
        new = []
        for v in fresh:
            new += value_to_bytes(v, 8)
        new = new[:size]
        out = []
        for o, f in zip(old, new):
            if cond is True:
                out.append(f)
            else:
                out.append(fold(z3.If(cond, byte_to_z3(f), byte_to_z3(o))))
        state.memory.write(region, off, out)
    state.havoc = state.havoc + ((n, acc),)


def _seed_bytes(state, ctx, seeds_ptr, n_seeds, site):
    out = []
    for k in range(n_seeds):
        p = _concrete(state, ctx, read_u64(state, ctx, seeds_ptr + SIGNER_SEED_SIZE * k), "seed")
        ln = _concrete(state, ctx, read_u64(state, ctx, seeds_ptr + SIGNER_SEED_SIZE * k + 8),
                       "seed-length")
        if ln > MAX_SEED_BYTES:
            raise _Fault(state.abort("seed-too-long"))
        out += read_bytes(state, ctx, p, ln, site)
    return out


def pda_function(ctx, nbytes):
    f = ctx.pda_functions.get(nbytes)
    if f is None:
        f = z3.Function(f"pda_{nbytes}", z3.BitVecSort(8 * nbytes), z3.BitVecSort(256))
        ctx.pda_functions[nbytes] = f
    return f


def derive_concrete(seed: bytes, program_id: bytes) -> bytes:
    """Fallback concrete derivation used when no recorded table entry exists."""
    return hashlib.sha256(seed + program_id + b"ProgramDerivedAddress").digest()


def _pda(state, ctx, name, site):
    r = state.regs
    seeds_ptr = _concrete(state, ctx, r[1], "seeds")
    n_seeds = _concrete(state, ctx, r[2], "seeds-len")
    if n_seeds > MAX_SEEDS:
        return [state.abort("too-many-seeds")]
    pid_ptr = _concrete(state, ctx, r[3], "program-id")
    out = _concrete(state, ctx, r[4], "address")
    seed = _seed_bytes(state, ctx, seeds_ptr, n_seeds, site)
    if name == "sol_try_find_program_address":
        seed = seed + [PDA_BUMP]
    pid = read_bytes(state, ctx, pid_ptr, 32, site)
    arg = seed + pid
    parts = [byte_to_z3(b) for b in reversed(arg)]
    arg_expr = parts[0] if len(parts) == 1 else z3.Concat(*parts)
    result = pda_function(ctx, len(arg))(arg_expr)
    write_bytes(state, ctx, out, [SymByte(result, k) for k in range(32)], site)
    state.pda = state.pda + ((len(arg), arg_expr, result),)
    if name == "sol_try_find_program_address":
        bump_ptr = _concrete(state, ctx, r[5], "bump")
        write_bytes(state, ctx, bump_ptr, [PDA_BUMP], site)
    state.regs[0] = 0
    return [state]


def _hash(state, ctx, name, site):
    r = state.regs
    vals = _concrete(state, ctx, r[1], "slices")
    n = _concrete(state, ctx, r[2], "slices-len")
    out = _concrete(state, ctx, r[3], "result")
    data = []
    for k in range(n):
        p = _concrete(state, ctx, read_u64(state, ctx, vals + 16 * k), "slice")
        ln = _concrete(state, ctx, read_u64(state, ctx, vals + 16 * k + 8), "slice-length")
        if ln > MAX_MEMOP:
            return [state.abort("memory-op-too-large")]
        data += read_bytes(state, ctx, p, ln, site)
    if name == "sol_sha256" and all(isinstance(b, int) for b in data):
        write_bytes(state, ctx, out, list(hashlib.sha256(bytes(data)).digest()), site)
    else:
        parts = [byte_to_z3(b) for b in reversed(data)]
        arg = parts[0] if len(parts) == 1 else z3.Concat(*parts)
        f = z3.Function(f"{name}_{len(data)}", z3.BitVecSort(8 * len(data)), z3.BitVecSort(256))
        write_bytes(state, ctx, out, [SymByte(f(arg), k) for k in range(32)], site)
    state.regs[0] = 0
    return [state]

