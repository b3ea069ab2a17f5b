"""Symbolic machine state."""

from __future__ import annotations

import z3

from .values import subst_value

ACTIVE = "active"
EXITED = "exited"
ABORTED = "aborted"
UNSAT = "unsat-pruned"
PRUNED = "pruned"

TERMINAL = frozenset({EXITED, ABORTED, UNSAT, PRUNED})


class Frame:
    __slots__ = ("return_pc", "saved", "frame_ptr")

    def __init__(self, return_pc, saved, frame_ptr):
        self.return_pc = return_pc
        self.saved = saved
        self.frame_ptr = frame_ptr

    def key(self):
        return self.return_pc


class SymState:
    __slots__ = (
        "id", "regs", "pc", "memory", "constraints", "assumptions", "ledger", "call_stack",
        "coverage", "status", "exit_code", "abort_reason", "fork_parent", "fork_time",
        "rng_seed", "trace", "steps", "degraded", "deser_done", "loop_depth", "hybridized",
        "heap_ptr", "pending", "emitted", "new_actions", "post_deser", "havoc", "pda",
        "reached_target", "cpi_count", "skip_once",
    )

    def __init__(self):
        self.id = 0
        self.regs = [0] * 11
        self.pc = 0
        self.memory = None
        self.constraints = ()
        self.assumptions = ()
        self.ledger = None
        self.call_stack = ()
        self.coverage = set()
        self.status = ACTIVE
        self.exit_code = None
        self.abort_reason = None
        self.fork_parent = None
        self.fork_time = 0
        self.rng_seed = 0
        self.trace = ()
        self.steps = 0
        self.degraded = False
        self.deser_done = False
        self.loop_depth = None
        self.hybridized = False
        self.heap_ptr = 0
        self.pending = ()
        self.emitted = frozenset()
        self.new_actions = []
        self.post_deser = None
        self.havoc = ()
        self.pda = ()
        self.reached_target = False
        self.cpi_count = 0
        self.skip_once = False

    @property
    def active(self) -> bool:
        return self.status == ACTIVE

    @property
    def depth(self) -> int:
        return len(self.call_stack)

    def copy(self) -> "SymState":
        s = SymState.__new__(SymState)
        for name in SymState.__slots__:
            setattr(s, name, getattr(self, name))
        s.regs = list(self.regs)
        s.memory = self.memory.copy()
        s.ledger = self.ledger.copy() if self.ledger is not None else None
        s.coverage = set(self.coverage)
        s.new_actions = []
        return s

    def add_constraint(self, c) -> None:
        if c is True:
            return
        self.constraints = self.constraints + (c,)

    def all_constraints(self):
        return self.assumptions + self.constraints

    def abort(self, reason: str) -> "SymState":
        self.status = ABORTED
        self.abort_reason = reason
        return self

    def substitute(self, pairs) -> None:
        """Replace free variables everywhere in the state (used to pin signer flags)."""
        self.regs = [subst_value(v, pairs) for v in self.regs]
        self.memory.apply_substitution(pairs)
        self.constraints = tuple(z3.simplify(z3.substitute(c, *pairs)) for c in self.constraints)
        self.assumptions = tuple(z3.simplify(z3.substitute(c, *pairs)) for c in self.assumptions)
        self.call_stack = tuple(
            Frame(f.return_pc, tuple(subst_value(v, pairs) for v in f.saved), f.frame_ptr)
            for f in self.call_stack)


def snapshot(state: SymState) -> SymState:
    return state.copy()


def restore(snap: SymState) -> SymState:
    return snap.copy()
