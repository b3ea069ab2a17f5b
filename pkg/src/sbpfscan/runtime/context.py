"""Transaction context: symbolic accounts, the input region and per-analysis shared state."""

from __future__ import annotations

import itertools
import struct

import z3

from ..bytecode.cfg import build_cfg
from ..bytecode.marks import compute_marks
from ..errors import SequencingError
from ..symcore.memory import (FRAME_SIZE, HEAP_SIZE, HEAP_START, INPUT_START, PROGRAM_START,
                              STACK_SIZE, STACK_START, MemRegion, Memory)
from ..symcore.solver import SolverHandle
from ..symcore.state import SymState
from ..symcore.values import SymByte
from .layout import FLAG_FIELDS, NON_DUP_MARKER, InputLayout
from .ledger import Ledger


class AccountModel:
    """Symbolic fields of one serialized account; variables are created on first use."""

    def __init__(self, tx: "TxContext", index: int):
        self._tx = tx
        self.index = index
        self.duplicate_of = None

    def _words(self, fld, n):
        return [self._tx.var(f"acc{self.index}_{fld}_{w}", 64) for w in range(n)]

    @property
    def key(self):
        return self._words("key", 4)

    @property
    def owner(self):
        return self._words("owner", 4)

    @property
    def is_signer(self):
        return self._tx.var(f"acc{self.index}_is_signer", 8)

    @property
    def is_writable(self):
        return self._tx.var(f"acc{self.index}_is_writable", 8)

    @property
    def executable(self):
        return self._tx.var(f"acc{self.index}_executable", 8)

    @property
    def lamports(self):
        return self._tx.var(f"acc{self.index}_lamports", 64)

    @property
    def data_len(self):
        return self._tx.var(f"acc{self.index}_data_len", 64)

    @property
    def data(self):
        return self._words("data", (self._tx.layout.max_data + 7) // 8)


class TxContext:
    def __init__(self, layout: InputLayout, program_id: bytes):
        self.layout = layout
        self.program_id = program_id
        self.n_accounts = layout.n_accounts
        self._vars = {}
        self.accounts = [AccountModel(self, i) for i in range(layout.n_accounts)]

    def var(self, name: str, bits: int):
        v = self._vars.get(name)
        if v is None:
            v = z3.BitVec(name, bits)
            self._vars[name] = v
        return v

    @property
    def ix_len(self):
        return self.var("ix_len", 64)

    @property
    def instruction_data(self):
        return [self.var(f"ix_{w}", 64) for w in range((self.layout.max_ix + 7) // 8)]

    def initial_byte(self, off: int):
        acc, fld, rel = self.layout.field_at(off)
        if fld == "count":
            return (self.n_accounts >> (8 * rel)) & 0xFF
        if fld == "marker":
            return NON_DUP_MARKER
        if fld in FLAG_FIELDS:
            return self.var(f"acc{acc}_{fld}", 8)
        if fld in ("key", "owner", "data"):
            return SymByte(self.var(f"acc{acc}_{fld}_{rel // 8}", 64), rel % 8)
        if fld in ("lamports", "data_len"):
            return SymByte(self.var(f"acc{acc}_{fld}", 64), rel)
        if fld == "ix_len":
            return SymByte(self.ix_len, rel)
        if fld == "ix":
            return SymByte(self.var(f"ix_{rel // 8}", 64), rel % 8)
        if fld == "program_id":
            return self.program_id[rel]
        return 0

    def length_pairs(self):
        pairs = [(a.data_len, z3.BitVecVal(self.layout.max_data, 64)) for a in self.accounts]
        pairs.append((self.ix_len, z3.BitVecVal(self.layout.max_ix, 64)))
        return pairs

    def flag_assumptions(self):
        out = []
        for a in self.accounts:
            for v in (a.is_signer, a.is_writable, a.executable):
                out.append(z3.ULE(v, 1))
        return out

    def fixed_length_assumptions(self):
        return [v == c for v, c in self.length_pairs()]

    def relaxed_length_assumptions(self):
        return [z3.ULE(v, c) for v, c in self.length_pairs()]

    def signer_vars(self):
        return [a.is_signer for a in self.accounts]

    def input_region(self) -> MemRegion:
        return MemRegion("input", INPUT_START, self.layout.size, True, self.initial_byte)


def build_input(n_accounts: int, max_data: int, max_ix: int = 1024,
                program_id: bytes = bytes(32)) -> TxContext:
    return TxContext(InputLayout(n_accounts, max_data, max_ix), program_id)


def hybridize_lengths(state: SymState, ctx: "AnalysisContext") -> SymState:
    """Swap the fixed-length assumptions for upper bounds once deserialization is over."""
    if not state.deser_done:
        raise SequencingError("lengths can only be relaxed after deserialization completes")
    if state.hybridized:
        return state
    fixed = {c.get_id() for c in ctx.fixed_lengths}
    kept = tuple(c for c in state.assumptions if c.get_id() not in fixed)
    state.assumptions = kept + tuple(ctx.relaxed_lengths)
    state.hybridized = True
    return state


class AnalysisContext:
    """Everything shared by the states of one analysis run."""

    def __init__(self, image, config, cfg=None, marks=None, program_id: bytes | None = None):
        self.image = image
        self.config = config
        self.cfg = cfg if cfg is not None else build_cfg(image)
        self.marks = marks if marks is not None else compute_marks(image, self.cfg, config.merge_depth)
        if program_id is None:
            program_id = bytes.fromhex(config.program_id) if config.program_id else bytes.fromhex(image.digest)
        self.program_id = program_id
        self.tx = build_input(config.max_accounts, config.max_data, config.max_ix, program_id)
        self.layout = self.tx.layout
        self.solver = SolverHandle(config.solver_timeout_ms, config.seed)
        self.length_pairs = self.tx.length_pairs()
        self.length_names = frozenset(str(v) for v, _ in self.length_pairs)
        self.fixed_lengths = self.tx.fixed_length_assumptions()
        self.relaxed_lengths = self.tx.relaxed_length_assumptions()
        self.flag_bounds = self.tx.flag_assumptions()
        self.merge_loop_addrs = frozenset(
            a for b in self.marks.merge_loop for a in self.cfg.blocks[b].addresses)
        self.skip_sites = self.marks.skip_sites if config.format_skip else frozenset()
        self._ids = itertools.count(1)
        self._clock = itertools.count(1)
        self.pda_functions = {}
        self.havoc_counter = itertools.count()
        self.program_regions = (
            MemRegion("text", PROGRAM_START + image.text_vaddr, len(image.text), False, image.text),
            MemRegion("rodata", PROGRAM_START + image.rodata_vaddr, max(len(image.rodata), 1), False,
                      image.rodata),
        )
        self.states_created = 0

    def next_id(self) -> int:
        self.states_created += 1
        return next(self._ids)

    def tick(self) -> int:
        return next(self._clock)

    def fork(self, state: SymState) -> SymState:
        child = state.copy()
        child.id = self.next_id()
        child.fork_parent = state.id
        child.fork_time = self.tick()
        return child

    def _base_regions(self, input_region):
        return self.program_regions + (
            MemRegion("stack", STACK_START, STACK_SIZE, True),
            MemRegion("heap", HEAP_START, HEAP_SIZE, True),
            input_region,
        )

    def initial_state(self) -> SymState:
        s = SymState()
        s.id = self.next_id()
        s.memory = Memory(self._base_regions(self.tx.input_region()))
        s.regs[1] = INPUT_START
        s.regs[10] = STACK_START + FRAME_SIZE
        s.pc = self.image.entry
        s.assumptions = tuple(self.flag_bounds) + tuple(self.fixed_lengths)
        s.ledger = Ledger()
        s.rng_seed = self.config.seed
        if self.marks.merge_point is None:
            s.deser_done = True
            s.ledger.active = True
        return s

    def concrete_state(self, blob: bytes) -> SymState:
        """A state whose input region holds the given bytes; nothing is symbolic."""
        s = SymState()
        s.id = self.next_id()
        region = MemRegion("input", INPUT_START, len(blob), True, bytes(blob))
        s.memory = Memory(self._base_regions(region))
        s.regs[1] = INPUT_START
        s.regs[10] = STACK_START + FRAME_SIZE
        s.pc = self.image.entry
        s.ledger = Ledger()
        s.deser_done = True
        s.hybridized = True
        s.rng_seed = self.config.seed
        return s

    def handle_syscall(self, state, name):
        from . import syscalls
        return syscalls.handle(state, self, name)

    def complete_deserialization(self, state: SymState) -> None:
        state.deser_done = True
        state.ledger.active = True
        hybridize_lengths(state, self)
        snap = state.copy()
        snap.post_deser = None
        state.post_deser = snap


def u64(v: int) -> bytes:
    return struct.pack("<Q", v & (2**64 - 1))
