"""Analysis driver: deserialization merging, strategy rotation, oracle dispatch."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .. import oracles
from ..bytecode.cfg import build_cfg
from ..bytecode.marks import compute_marks
from ..config import AnalysisConfig
from ..runtime.context import AnalysisContext
from ..symcore.engine import exited_gracefully, merge_tree, step
from ..symcore.state import ABORTED, ACTIVE, EXITED, PRUNED
from .reach import ReachabilityIndex
from .scheduler import STRATEGIES, ExplorationComplete, Scheduler, compute_targets

log = logging.getLogger("sbpfscan.explore")

EXPLORATION_COMPLETE = "exploration-complete"
GLOBAL_TIMEOUT = "global-timeout"
FINDING_LIMIT = "finding-limit"


@dataclass
class MergeStats:
    arrivals: list = field(default_factory=list)
    merged: list = field(default_factory=list)


@dataclass
class AnalysisResult:
    findings: list
    notes: list
    actions: list
    termination_reason: str
    coverage: set
    coverage_series: list
    strategy_time: dict
    merge_stats: MergeStats
    stats: dict
    context: AnalysisContext = None

    @property
    def kinds(self) -> set:
        return {f.kind for f in self.findings}


def coverage_ratio(covered, image, cfg=None):
    total = len(image.instructions)
    ratio = len(covered) / total if total else 0.0
    if cfg is None:
        return ratio
    blocks = {cfg.block_of[a] for a in covered if a in cfg.block_of}
    return ratio, (len(blocks) / len(cfg.blocks) if cfg.blocks else 0.0)


class _Clock:
    def __init__(self, now=time.monotonic):
        self.now = now
        self.start = now()

    def elapsed(self):
        return self.now() - self.start


class Explorer:
    def __init__(self, image, config: AnalysisConfig, cfg=None, marks=None, now=time.monotonic):
        self.image = image
        self.config = config
        self.cfg = cfg if cfg is not None else build_cfg(image)
        self.marks = marks if marks is not None else compute_marks(image, self.cfg, config.merge_depth)
        self.ctx = AnalysisContext(image, config, self.cfg, self.marks)
        self.clock = _Clock(now)
        self.covered = set()
        self.coverage_series = [(0.0, 0)]
        self.findings = {}
        self.notes = []
        self.actions = []
        self.merge_stats = MergeStats()
        self.visited = set()
        self.pruned = 0
        self.reexec_cache = {}
        self.stop_reason = None
        self.strategy_time = {s: 0.0 for s in STRATEGIES}
        self.targets = {s: compute_targets(s, self.marks) for s in STRATEGIES}
        self.index = {s: ReachabilityIndex(self.cfg, t) for s, t in self.targets.items() if t}
        self.strategies = [s for s in STRATEGIES if s == "random" or self.targets[s]]

    # ------------------------------------------------------------ bookkeeping
    def _note_coverage(self, state):
        before = len(self.covered)
        self.covered |= state.coverage
        if len(self.covered) != before:
            self.coverage_series.append((round(self.clock.elapsed(), 3), len(self.covered)))

    def _out_of_time(self):
        if self.clock.elapsed() > self.config.global_timeout:
            self.stop_reason = GLOBAL_TIMEOUT
            return True
        return False

    def _limit_hit(self):
        lim = self.config.finding_limit
        if lim and len(self.findings) >= lim:
            self.stop_reason = FINDING_LIMIT
            return True
        return False

    def _record(self, finding):
        if finding.key in self.findings:
            return
        lim = self.config.finding_limit
        if lim and len(self.findings) >= lim:
            return
        ex = oracles.synthesize_exploit(finding.state, self.ctx, finding.site)
        finding.exploit = ex
        finding.synthesized = ex is not None
        self.findings[finding.key] = finding

    # --------------------------------------------------------- oracle plumbing
    def _handle_actions(self, state) -> bool:
        """Queue writes on the path, classify CPIs now; True when an oracle ran."""
        ran = False
        for act in state.new_actions:
            self.actions.append(act)
            if act.kind == "account-write":
                state.pending = state.pending + (act,)
            else:
                kind, payload = oracles.classify_cpi(act, self.ctx, self.reexec_cache)
                ran = True
                if kind == "finding":
                    self._record(payload)
                elif kind == "note":
                    if payload not in self.notes:
                        self.notes.append(payload)
        state.new_actions = []
        return ran

    def _finish(self, state) -> bool:
        if state.status == EXITED and state.pending:
            if not exited_gracefully(state, self.ctx.solver):
                return False
            for act in state.pending:
                f = oracles.classify_write(act, state, self.ctx, self.reexec_cache)
                if f is not None:
                    self._record(f)
            return True
        return False

    # ------------------------------------------------------------ deserialization
    def deserialize(self, merge=True, states=None):
        """Run every state through the account loop in lockstep, merging at the merge point."""
        mp = self.marks.merge_point
        runnable = list(states) if states is not None else [self.ctx.initial_state()]
        done, parked = [], []
        while runnable or parked:
            if self._out_of_time():
                break
            if not runnable:
                self.merge_stats.arrivals.append(len(parked))
                group = merge_tree(parked, self.ctx) if merge else parked
                self.merge_stats.merged.append(len(group))
                for s in group:
                    s.skip_once = True
                runnable, parked = list(group), []
                continue
            s = runnable.pop()
            if s.deser_done:
                done.append(s)
                continue
            if s.pc == mp and not s.skip_once:
                parked.append(s)
                continue
            s.skip_once = False
            self.visited.add(s.id)
            succ = step(s, self.ctx)
            for n in reversed(succ):
                self._note_coverage(n)
                if n.new_actions:
                    self._handle_actions(n)
                if n.status == ACTIVE:
                    runnable.append(n)
                else:
                    self._finish(n)
        return done

    # ---------------------------------------------------------------- main loop
    def _eligible(self, strategy):
        if strategy == "random" or not self.config.prune:
            return None
        idx = self.index[strategy]
        return lambda s: s.reached_target or idx.still_reachable(s)

    def _prune(self, state) -> bool:
        if not self.config.prune or not self.index or state.reached_target:
            return False
        if any(idx.still_reachable(state) for idx in self.index.values()):
            return False
        state.status = PRUNED
        self.pruned += 1
        return True

    def _mark_target(self, state):
        if not state.reached_target:
            for s in self.strategies:
                if state.pc in self.targets[s]:
                    state.reached_target = True
                    return

    def run(self) -> AnalysisResult:
        if self.marks.merge_point is not None and self.config.merge:
            start = self.deserialize(merge=True)
        else:
            start = [self.ctx.initial_state()]
        sched = Scheduler(self.config.seed, self.config.deferred_cap)
        sched.covered = self.covered
        sched.add(start)
        turn = 0
        exhausted = set()
        while self.stop_reason is None:
            if not len(sched):
                self.stop_reason = EXPLORATION_COMPLETE
                break
            strategy = self.strategies[turn % len(self.strategies)]
            sched.strategy = strategy
            sched.targets = self.targets[strategy]
            slice_start = self.clock.elapsed()
            advance = self._run_slice(sched, strategy, slice_start)
            self.strategy_time[strategy] += self.clock.elapsed() - slice_start
            if advance == "exhausted":
                exhausted.add(strategy)
                if exhausted >= set(self.strategies):
                    sched.drop_terminal()
                    if not len(sched):
                        self.stop_reason = EXPLORATION_COMPLETE
                        break
                    exhausted = set()
            else:
                exhausted = set()
            turn += 1
        return self._result()

    def _run_slice(self, sched, strategy, slice_start):
        eligible = self._eligible(strategy)
        budget = self.config.strategy_budget
        while True:
            if self._out_of_time() or self._limit_hit():
                return "stop"
            if self.clock.elapsed() - slice_start > budget:
                return "budget"
            try:
                s = sched.select_next(eligible)
            except ExplorationComplete:
                return "exhausted"
            if self._prune(s):
                sched.drop_terminal()
                continue
            self._mark_target(s)
            self.visited.add(s.id)
            succ = step(s, self.ctx)
            ran = False
            live = []
            for n in succ:
                self._note_coverage(n)
                if n.new_actions:
                    ran = self._handle_actions(n) or ran
                if n.status == ACTIVE:
                    live.append(n)
                else:
                    ran = self._finish(n) or ran
            # the fall-through successor stays current, siblings are deferred
            if live and live[0] is s:
                sched.add(live[1:])
            else:
                sched.current = None
                if live:
                    sched.current = live[0]
                    sched.add(live[1:])
            sched.drop_terminal()
            if ran:
                return "oracle"

    def _result(self) -> AnalysisResult:
        findings = sorted(self.findings.values(), key=lambda f: (f.site, f.kind, f.unchecked_accounts))
        ratio, block_ratio = coverage_ratio(self.covered, self.image, self.cfg)
        stats = {
            "states_created": self.ctx.states_created,
            "states_visited": len(self.visited),
            "states_pruned": self.pruned,
            "solver_queries": self.ctx.solver.queries,
            "solver_timeouts": self.ctx.solver.timeouts,
            "instruction_coverage": ratio,
            "block_coverage": block_ratio,
        }
        return AnalysisResult(
            findings=findings,
            notes=sorted(self.notes, key=lambda n: (n["site"], n["kind"])),
            actions=self.actions,
            termination_reason=self.stop_reason or EXPLORATION_COMPLETE,
            coverage=set(self.covered),
            coverage_series=list(self.coverage_series),
            strategy_time=dict(self.strategy_time),
            merge_stats=self.merge_stats,
            stats=stats,
            context=self.ctx,
        )


def run_analysis(image, config: AnalysisConfig | None = None, marks=None, cfg=None,
                 now=time.monotonic) -> AnalysisResult:
    config = (config or AnalysisConfig()).validate()
    return Explorer(image, config, cfg=cfg, marks=marks, now=now).run()


def count_deserialization_states(image, config: AnalysisConfig | None = None, merge=True):
    """Arrivals at and survivors of the merge point per loop round (no oracles involved)."""
    config = (config or AnalysisConfig()).validate()
    ex = Explorer(image, config)
    if ex.marks.merge_point is None:
        return ex.merge_stats
    ex.deserialize(merge=merge)
    return ex.merge_stats


__all__ = ["run_analysis", "count_deserialization_states", "coverage_ratio", "AnalysisResult",
           "Explorer", "ABORTED"]
