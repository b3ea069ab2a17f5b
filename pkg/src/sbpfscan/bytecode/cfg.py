"""Control-flow graph, call graph, dominators and natural loops."""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx

from ..errors import MalformedTargetError
from . import isa

FALL = "fall-through"
TAKEN = "branch-taken"
CALL_EDGE = "call"
RETURN = "return"

NORETURN_SYSCALLS = frozenset({"abort", "sol_panic_"})
_VEXIT = -1


@dataclass(frozen=True)
class Block:
    start: int
    end: int          # address of the last instruction
    addresses: tuple

    @property
    def last(self) -> int:
        return self.addresses[-1]


@dataclass(frozen=True)
class Loop:
    function: int
    header: int
    body: frozenset
    latches: frozenset


@dataclass
class Cfg:
    blocks: dict
    block_of: dict
    succ: dict
    pred: dict
    call_sites: dict
    callgraph: nx.DiGraph
    functions: dict
    idom: dict = field(default_factory=dict)
    ipdom: dict = field(default_factory=dict)
    loops: list = field(default_factory=list)

    def edges(self):
        for src, outs in self.succ.items():
            for dst, kind in outs:
                yield src, dst, kind

    def intra_succ(self, block: int):
        return [d for d, k in self.succ.get(block, ()) if k in (FALL, TAKEN)]

    def function_of(self, block: int):
        for f in sorted(self.functions):
            if block in self.functions[f]:
                return f
        return None

    def dominates(self, function: int, a: int, b: int) -> bool:
        dom = self.idom[function]
        while True:
            if a == b:
                return True
            nxt = dom.get(b)
            if nxt is None or nxt == b:
                return False
            b = nxt

    def post_dominates(self, function: int, a: int, b: int) -> bool:
        pdom = self.ipdom[function]
        while True:
            if a == b:
                return True
            nxt = pdom.get(b)
            if nxt is None or nxt == b or nxt == _VEXIT:
                return False
            b = nxt

    def loops_containing(self, block: int):
        return sorted((lp for lp in self.loops if block in lp.body), key=lambda lp: len(lp.body))


def _check_target(image, ins, target):
    if target not in image.index:
        raise MalformedTargetError(ins.address, target)


def build_cfg(image) -> Cfg:
    instrs = image.instructions
    leaders = set(image.function_starts) | {image.entry}
    call_info = {}
    for i, ins in enumerate(instrs):
        nxt = instrs[i + 1].address if i + 1 < len(instrs) else None
        if ins.is_jump:
            target = ins.jump_target()
            _check_target(image, ins, target)
            leaders.add(target)
            if nxt is not None:
                leaders.add(nxt)
        elif ins.is_exit or ins.is_call:
            if nxt is not None:
                leaders.add(nxt)
        if ins.is_call:
            tgt = image.call_target(ins)
            call_info[ins.address] = tgt
            if tgt and tgt[0] == "function":
                _check_target(image, ins, tgt[1])
                leaders.add(tgt[1])

    # carve blocks from each leader
    raw_blocks = {}
    for i, ins in enumerate(instrs):
        if ins.address not in leaders:
            continue
        addrs = [ins.address]
        j = i
        while True:
            cur = instrs[j]
            if cur.is_jump or cur.is_exit or cur.is_call:
                break
            if j + 1 >= len(instrs) or instrs[j + 1].address in leaders:
                break
            j += 1
            addrs.append(instrs[j].address)
        raw_blocks[ins.address] = addrs

    def successors(start):
        addrs = raw_blocks[start]
        last = image.at(addrs[-1])
        nxt = last.next_address()
        has_next = nxt in image.index
        out = []
        if last.is_cond_jump:
            if has_next:
                out.append((nxt, FALL))
            out.append((last.jump_target(), TAKEN))
        elif last.opcode == isa.JA:
            out.append((last.jump_target(), TAKEN))
        elif last.is_exit:
            pass
        elif last.is_call:
            tgt = call_info.get(last.address)
            if tgt and tgt[0] == "function":
                out.append((tgt[1], CALL_EDGE))
            noreturn = tgt is not None and tgt[0] == "syscall" and tgt[1] in NORETURN_SYSCALLS
            if has_next and not noreturn:
                out.append((nxt, FALL))
        elif has_next:
            out.append((nxt, FALL))
        return out

    # keep only blocks reachable from some function start
    roots = sorted(leaders & set(image.function_starts) | {image.entry})
    reachable, stack = set(), list(roots)
    while stack:
        b = stack.pop()
        if b in reachable or b not in raw_blocks:
            continue
        reachable.add(b)
        for d, _ in successors(b):
            stack.append(d)

    blocks, succ, pred, block_of, call_sites = {}, {}, {}, {}, {}
    for start in sorted(reachable):
        addrs = raw_blocks[start]
        blocks[start] = Block(start, addrs[-1], tuple(addrs))
        for a in addrs:
            block_of[a] = start
        succ[start] = successors(start)
        last = addrs[-1]
        if last in call_info:
            call_sites[start] = call_info[last]
    for start in blocks:
        pred.setdefault(start, [])
    for s, outs in succ.items():
        for d, k in outs:
            pred.setdefault(d, []).append((s, k))

    # functions: intraprocedural closure from each start
    functions = {}
    fstarts = sorted(s for s in (set(image.function_starts) | {image.entry}) if s in blocks)
    for f in fstarts:
        body, stack = set(), [f]
        while stack:
            b = stack.pop()
            if b in body:
                continue
            body.add(b)
            for d, k in succ[b]:
                if k in (FALL, TAKEN) and (d not in fstarts or d == f):
                    stack.append(d)
        functions[f] = frozenset(body)

    cg = nx.DiGraph()
    cg.add_nodes_from(fstarts)
    for f, body in functions.items():
        for b in body:
            tgt = call_sites.get(b)
            if tgt is None:
                continue
            if tgt[0] == "function":
                cg.add_edge(f, tgt[1])
            elif tgt[0] == "syscall":
                cg.add_edge(f, ("syscall", tgt[1]))

    # return edges: callee exits back to each return site
    for b, tgt in call_sites.items():
        if tgt and tgt[0] == "function" and tgt[1] in functions:
            ret = [d for d, k in succ[b] if k == FALL]
            for eb in functions[tgt[1]]:
                if image.at(blocks[eb].last).is_exit:
                    for r in ret:
                        succ[eb].append((r, RETURN))
                        pred[r].append((eb, RETURN))

    cfg = Cfg(blocks, block_of, succ, pred, call_sites, cg, functions)
    _analyze_functions(cfg)
    return cfg


def _analyze_functions(cfg: Cfg):
    for f, body in cfg.functions.items():
        g = nx.DiGraph()
        g.add_nodes_from(body)
        for b in body:
            for d in cfg.intra_succ(b):
                if d in body:
                    g.add_edge(b, d)
        cfg.idom[f] = nx.immediate_dominators(g, f)

        rg = g.reverse(copy=True)
        rg.add_node(_VEXIT)
        for b in body:
            if not any(d in body for d in cfg.intra_succ(b)):
                rg.add_edge(_VEXIT, b)
        ipdom = nx.immediate_dominators(rg, _VEXIT) if rg.out_degree(_VEXIT) else {}
        cfg.ipdom[f] = ipdom

        by_header = {}
        dom = cfg.idom[f]
        for u, h in g.edges():
            if u in dom and h in dom and cfg.dominates(f, h, u):
                loop_body, stack = {h}, [u]
                while stack:
                    n = stack.pop()
                    if n in loop_body:
                        continue
                    loop_body.add(n)
                    stack.extend(p for p in g.predecessors(n))
                entry = by_header.setdefault(h, (set(), set()))
                entry[0].update(loop_body)
                entry[1].add(u)
        for h, (lb, latches) in sorted(by_header.items()):
            cfg.loops.append(Loop(f, h, frozenset(lb), frozenset(latches)))


def basic_block_count(cfg: Cfg) -> int:
    return len(cfg.blocks)
