"""Static reachability of target sites, used to reject states that cannot get there."""

from __future__ import annotations

from collections import deque

from ..bytecode.cfg import FALL, TAKEN


class ReachabilityIndex:
    """Per-block and per-function over-approximation of "a target is still ahead"."""

    def __init__(self, cfg, targets):
        self.cfg = cfg
        self.targets = frozenset(targets)
        target_blocks = {cfg.block_of[t] for t in self.targets if t in cfg.block_of}
        self.target_blocks = frozenset(target_blocks)

        # functions whose body holds a target, then everything that calls into them
        holders = {f for f, body in cfg.functions.items() if body & target_blocks}
        good_fns = set(holders)
        queue = deque(holders)
        while queue:
            f = queue.popleft()
            if f not in cfg.callgraph:
                continue
            for caller in cfg.callgraph.predecessors(f):
                if caller not in good_fns and not isinstance(caller, tuple):
                    good_fns.add(caller)
                    queue.append(caller)
        self.functions = frozenset(good_fns)

        seeds = set(target_blocks)
        for b, tgt in cfg.call_sites.items():
            if tgt and tgt[0] == "function" and tgt[1] in good_fns:
                seeds.add(b)
        reach = set(seeds)
        queue = deque(seeds)
        while queue:
            b = queue.popleft()
            for p, kind in cfg.pred.get(b, ()):
                if kind in (FALL, TAKEN) and p not in reach:
                    reach.add(p)
                    queue.append(p)
        self.blocks = frozenset(reach)

    def block_reaches(self, addr: int) -> bool:
        b = self.cfg.block_of.get(addr)
        return b is not None and b in self.blocks

    def still_reachable(self, state) -> bool:
        if not self.targets:
            return False
        if self.block_reaches(state.pc):
            return True
        return any(self.block_reaches(f.return_pc) for f in state.call_stack)


def still_reachable(state, targets, index: ReachabilityIndex) -> bool:
    if frozenset(targets) != index.targets:
        index = ReachabilityIndex(index.cfg, targets)
    return index.still_reachable(state)
