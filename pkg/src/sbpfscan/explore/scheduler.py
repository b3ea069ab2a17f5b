"""State selection for one exploration pool."""

from __future__ import annotations

import random

from ..symcore.state import ACTIVE

STRATEGIES = ("cpi", "main", "random")


class ExplorationComplete(Exception):
    pass


def compute_targets(strategy: str, marks) -> frozenset:
    if strategy == "cpi":
        return frozenset(marks.cpi_sites)
    if strategy == "main":
        return frozenset(marks.dispatch_leaves)
    return frozenset()


class Scheduler:
    def __init__(self, seed: int = 0, deferred_cap: int = 10_000):
        self.current = None
        self.deferred = []
        self.covered = set()
        self.strategy = "random"
        self.targets = frozenset()
        self.rng = random.Random(seed)
        self.deferred_cap = deferred_cap
        self.evicted = 0

    def __len__(self):
        return len(self.deferred) + (1 if self.current is not None else 0)

    def add(self, states) -> None:
        for s in states:
            if s.status == ACTIVE:
                self.deferred.append(s)
        if len(self.deferred) > self.deferred_cap:
            self._evict()

    def _evict(self):
        # drop the states with the deepest constraint sets first
        over = len(self.deferred) - self.deferred_cap
        order = sorted(range(len(self.deferred)),
                       key=lambda i: (-len(self.deferred[i].constraints), -self.deferred[i].id))
        drop = set(order[:over])
        self.deferred = [s for i, s in enumerate(self.deferred) if i not in drop]
        self.evicted += over

    def all_states(self):
        out = list(self.deferred)
        if self.current is not None:
            out.append(self.current)
        return out

    def _uncovered(self, s):
        return s.pc not in self.covered

    def select_next(self, eligible=None):
        """Apply the five selection rules; ``eligible`` filters states for the current strategy."""
        cur = self.current
        ok = eligible or (lambda s: True)
        cur_live = cur is not None and cur.status == ACTIVE and ok(cur)
        if cur_live and self._uncovered(cur):
            return cur
        pool = [i for i, s in enumerate(self.deferred) if s.status == ACTIVE and ok(s)]
        fresh = [i for i in pool if self._uncovered(self.deferred[i])]
        if fresh:
            return self._take(max(fresh, key=lambda i: self.deferred[i].fork_time))
        if cur_live:
            return cur
        if not pool:
            raise ExplorationComplete
        if self.strategy == "random":
            return self._take(self.rng.choice(pool))
        return self._take(max(pool, key=lambda i: self.deferred[i].fork_time))

    def _take(self, i):
        s = self.deferred.pop(i)
        cur = self.current
        if cur is not None and cur.status == ACTIVE:
            self.deferred.append(cur)
        self.current = s
        return s

    def drop_terminal(self):
        if self.current is not None and self.current.status != ACTIVE:
            self.current = None
        self.deferred = [s for s in self.deferred if s.status == ACTIVE]
