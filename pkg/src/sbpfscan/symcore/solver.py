"""Incremental bit-vector solver session with slicing and a query cache."""

from __future__ import annotations

import z3

from ..errors import ConcretizationTimeout, ContradictionError, SolverFailure
from .values import free_names

YES, NO, TIMEOUT = "yes", "no", "timeout"


def slice_constraints(constraints, extra):
    """Constraints transitively sharing variables with ``extra`` (all when extra is None)."""
    if extra is None:
        return list(constraints)
    want = set(free_names(extra))
    if not want:
        return []
    pending = [(c, free_names(c)) for c in constraints]
    chosen = [False] * len(pending)
    changed = True
    while changed:
        changed = False
        for i, (c, names) in enumerate(pending):
            if not chosen[i] and names & want:
                chosen[i] = True
                want |= names
                changed = True
    return [c for i, (c, _) in enumerate(pending) if chosen[i]]


class SolverHandle:
    def __init__(self, timeout_ms: int = 5000, seed: int = 0):
        self.timeout_ms = timeout_ms
        self.seed = seed & 0xFFFFFFFF
        self._solver = z3.Solver()
        self._solver.set("timeout", timeout_ms)
        self._solver.set("random_seed", self.seed)
        self._cache: dict = {}
        self.queries = 0
        self.timeouts = 0

    def _key(self, items):
        return tuple(sorted(c.get_id() for c in items))

    def check(self, constraints, extra=None) -> str:
        """Verdict for constraints ∧ extra: 'yes', 'no' or 'timeout'."""
        if extra is not None:
            if z3.is_false(extra):
                return NO
        items = slice_constraints(constraints, extra)
        if extra is not None and not z3.is_true(extra):
            items.append(extra)
        items = [c for c in items if not z3.is_true(c)]
        if any(z3.is_false(c) for c in items):
            return NO
        if not items:
            return YES
        key = self._key(items)
        hit = self._cache.get(key)
        if hit is not None:
            return hit[0]
        self.queries += 1
        s = self._solver
        s.push()
        try:
            s.add(*items)
            r = s.check()
        except z3.Z3Exception as exc:
            raise SolverFailure(str(exc)) from exc
        finally:
            s.pop()
        if r == z3.sat:
            verdict = YES
        elif r == z3.unsat:
            verdict = NO
        else:
            verdict = TIMEOUT
            self.timeouts += 1
        if verdict != TIMEOUT:
            self._cache[key] = (verdict, items)
        return verdict

    def model(self, constraints, extra=None):
        """A model of constraints ∧ extra over every involved variable."""
        items = [c for c in constraints if not z3.is_true(c)]
        if extra is not None:
            items.append(extra)
        self.queries += 1
        s = self._solver
        s.push()
        try:
            s.add(*items)
            r = s.check()
            if r == z3.sat:
                return s.model()
        except z3.Z3Exception as exc:
            raise SolverFailure(str(exc)) from exc
        finally:
            s.pop()
        if r == z3.unsat:
            raise ContradictionError("constraints are unsatisfiable")
        self.timeouts += 1
        raise ConcretizationTimeout("solver timed out while building a model")

    def concretize(self, constraints, exprs, extra=None):
        m = self.model(constraints, extra)
        out = []
        for e in exprs:
            if isinstance(e, int):
                out.append(e)
                continue
            v = m.eval(e, model_completion=True)
            out.append(v.as_long())
        return out


def to_smtlib(constraints, name="finding") -> str:
    s = z3.Solver()
    s.add(*[c for c in constraints if not z3.is_true(c)])
    return f"; {name}\n" + s.to_smt2()
