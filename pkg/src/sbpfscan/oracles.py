"""Vulnerability oracles: trust marks, authority, signer re-execution, classification, exploits."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import z3

from .errors import ConcretizationTimeout, ContradictionError
from .explore.reach import ReachabilityIndex
from .runtime.layout import ConcreteAccount, serialize
from .runtime.ledger import classify_name
from .symcore.concrete import ConcreteVM
from .symcore.engine import step
from .symcore.solver import NO, YES
from .symcore.state import ACTIVE
from .symcore.values import free_names

MOC, MSC, MOC_MSC, ACPI = "moc", "msc", "moc-msc", "acpi"


@dataclass
class Exploit:
    input_bytes: bytes
    sidecar: dict
    replay_reached: bool


@dataclass
class Finding:
    kind: str
    site: int
    unchecked_accounts: tuple
    evidence: dict
    confidence: str = "high"
    path_id: tuple = ()
    exploit: Exploit | None = None
    synthesized: bool = False
    state: object = field(default=None, repr=False)

    @property
    def key(self):
        return (self.kind, self.site, tuple(sorted(self.unchecked_accounts)))


# ------------------------------------------------------------------ trust marks


def _key_trusted_sources(sources, owner_compared):
    if "const" in sources:
        return True
    return any(isinstance(s, tuple) and s[0] == "data" and s[1] in owner_compared
               for s in sources)


def checked_accounts(ledger) -> frozenset:
    """Accounts carrying any trust mark: owner compared, key vs constant/PDA/owner data, written."""
    out = set(ledger.owner_compared) | set(ledger.written)
    for acc, sources in ledger.key_sources.items():
        if "pda" in sources or _key_trusted_sources(sources, ledger.owner_compared):
            out.add(acc)
    return frozenset(out)


def trusted_accounts(ledger) -> frozenset:
    return frozenset(acc for acc, sources in ledger.key_sources.items()
                     if _key_trusted_sources(sources, ledger.owner_compared))


def weak_key_checks(ledger) -> list:
    """Keys compared only against data of accounts whose owner is never checked."""
    out = []
    for acc, sources in sorted(ledger.key_sources.items()):
        if _key_trusted_sources(sources, ledger.owner_compared) or "pda" in sources:
            continue
        for s in sources:
            if isinstance(s, tuple) and s[0] == "data":
                out.append({"account": acc, "compared_to_data_of": s[1]})
    return sorted(out, key=lambda d: (d["account"], d["compared_to_data_of"]))


def signer_constrained_true(state, acc, ctx) -> bool:
    s = ctx.tx.accounts[acc].is_signer
    return ctx.solver.check(state.all_constraints(), s == 0) == NO


def has_authority(state, ledger, ctx) -> bool:
    return any(signer_constrained_true(state, a, ctx)
               for a in sorted(trusted_accounts(ledger)) if a < ctx.tx.n_accounts)


# --------------------------------------------------------------- re-execution


@dataclass
class SignerVerdict:
    has_check: bool
    witness: object = None
    degraded: bool = False
    outcome: str = ""


def has_signer_check(action, ctx, cache=None) -> SignerVerdict:
    """Re-run toward the action site with every signer flag pinned to 0."""
    snap = action.state
    signer_vars = ctx.tx.signer_vars()
    names = frozenset(str(v) for v in signer_vars)
    kept = tuple(c for c in snap.constraints if not (free_names(c) & names))
    key = (action.site, tuple(sorted(c.get_id() for c in kept)))
    if cache is not None and key in cache:
        return cache[key]
    pairs = [(v, z3.BitVecVal(0, 8)) for v in signer_vars]
    if ctx.config.merge and snap.post_deser is not None:
        start = snap.post_deser.copy()
        start.id = ctx.next_id()
    else:
        start = ctx.initial_state()
    start.substitute(pairs)
    start.constraints = kept
    start.pending = ()
    start.emitted = frozenset()
    start.new_actions = []
    verdict = _directed_search(start, action.site, ctx)
    if cache is not None:
        cache[key] = verdict
    return verdict


def _directed_search(start, site, ctx) -> SignerVerdict:
    if ctx.solver.check(start.all_constraints()) == NO:
        return SignerVerdict(True, outcome="infeasible-without-signers")
    index = ReachabilityIndex(ctx.cfg, {site})
    deadline = time.monotonic() + ctx.config.reexec_budget
    cap = ctx.config.reexec_state_cap
    stack = [start]
    seen = 0
    degraded = False
    while stack:
        if time.monotonic() > deadline or seen > cap:
            return SignerVerdict(True, degraded=True, outcome="budget-exhausted")
        s = stack.pop()
        seen += 1
        if s.pc == site and s.status == ACTIVE:
            return SignerVerdict(False, witness=s, outcome="reached")
        if not index.still_reachable(s):
            continue
        succ = step(s, ctx)
        for n in reversed(succ):
            n.new_actions = []
            degraded = degraded or n.degraded
            if n.status == ACTIVE:
                stack.append(n)
    return SignerVerdict(True, degraded=degraded, outcome="blocked")


# -------------------------------------------------------------- classification


def _evidence(ledger, reads, checked, authority, verdict):
    return {
        "read_accounts": sorted(reads),
        "checked_accounts": sorted(checked),
        "owner_compared": sorted(ledger.owner_compared),
        "written_accounts": sorted(ledger.written),
        "signer_branches": sorted(ledger.signer_seen),
        "authority": authority,
        "signer_check": verdict.has_check if verdict else None,
        "reexecution": verdict.outcome if verdict else None,
        "weak_key_checks": weak_key_checks(ledger),
    }


def classify_write(action, final_state, ctx, cache=None):
    """MOC / MSC / MOC-MSC verdict for an account write whose path exited gracefully."""
    ledger = final_state.ledger
    checked = checked_accounts(ledger)
    unchecked = frozenset(action.reads) - checked
    authority = has_authority(final_state, ledger, ctx)
    moc = bool(unchecked) and not authority
    verdict = has_signer_check(action, ctx, cache)
    msc = not verdict.has_check
    if moc and msc:
        kind = MOC_MSC
    elif moc:
        kind = MOC
    elif msc:
        kind = MSC
    else:
        return None
    evidence = _evidence(ledger, action.reads, checked, authority, verdict)
    evidence["account"] = action.account_index
    evidence["field"] = action.field
    witness = final_state
    if msc and verdict.witness is not None:
        witness = verdict.witness
    return Finding(kind=kind, site=action.site,
                   unchecked_accounts=tuple(sorted(unchecked)) if moc else (),
                   evidence=evidence,
                   confidence="degraded" if (verdict.degraded or final_state.degraded) else "high",
                   path_id=action.path_id, state=witness)


def target_is_constant(words, state, ctx) -> bool:
    if all(isinstance(w, int) for w in words):
        return True
    cons = state.all_constraints()
    try:
        vals = ctx.solver.concretize(cons, list(words))
    except (ContradictionError, ConcretizationTimeout):
        return False
    diff = z3.Or(*[z3.BitVecVal(v, 64) != (w if not isinstance(w, int) else z3.BitVecVal(w, 64))
                   for w, v in zip(words, vals)])
    return ctx.solver.check(cons, diff) == NO


def target_owner_sourced(words, ledger) -> bool:
    names = set()
    for w in words:
        names |= free_names(w)
    if not names:
        return False
    infos = [classify_name(n) for n in names]
    if all(i is not None and isinstance(i[0], int) and i[1] == "data"
           and i[0] in ledger.owner_compared for i in infos):
        return True
    key_accs = {i[0] for i in infos if i is not None and isinstance(i[0], int) and i[1] == "key"}
    if len(key_accs) == 1 and all(i is not None and i[1] == "key" for i in infos):
        return next(iter(key_accs)) in trusted_accounts(ledger)
    return False


def _target_accounts(words):
    accs = set()
    for w in words:
        for n in free_names(w):
            info = classify_name(n)
            if info is not None and isinstance(info[0], int):
                accs.add(info[0])
    return tuple(sorted(accs))


def classify_cpi(action, ctx, cache=None):
    """Returns ('finding', Finding), ('note', dict) or ('benign', dict)."""
    st = action.state
    ledger = st.ledger
    words = action.target_key
    if target_is_constant(words, st, ctx):
        return "benign", {"site": action.site, "reason": "constant-target"}
    owner_sourced = target_owner_sourced(words, ledger)
    verdict = has_signer_check(action, ctx, cache)
    checked = checked_accounts(ledger)
    evidence = _evidence(ledger, action.reads, checked, None, verdict)
    evidence["target_accounts"] = list(_target_accounts(words))
    evidence["target_owner_sourced"] = owner_sourced
    evidence["handed_accounts"] = sorted(action.handed_accounts)
    if owner_sourced and verdict.has_check:
        return "benign", {"site": action.site, "reason": "owner-sourced-target-with-signer"}
    if owner_sourced or verdict.has_check:
        return "note", {
            "site": action.site,
            "kind": "cpi-partially-guarded",
            "guard": "owner-sourced-target" if owner_sourced else "signer-check",
            "confidence": "low",
        }
    witness = verdict.witness if verdict.witness is not None else st
    return "finding", Finding(
        kind=ACPI, site=action.site,
        unchecked_accounts=tuple(a for a in _target_accounts(words) if a not in checked),
        evidence=evidence, confidence="degraded" if verdict.degraded else "high",
        path_id=action.path_id, state=witness)


# ------------------------------------------------------------------ exploits


def _le_bytes(v, n):
    return int(v).to_bytes(n, "little")


def synthesize_exploit(state, ctx, site) -> Exploit | None:
    """Concrete input for the state's path, checked by replay in the concrete interpreter."""
    tx = ctx.tx
    cons = state.all_constraints()
    prefer = z3.And(*[v == c for v, c in ctx.length_pairs])
    try:
        try:
            model = ctx.solver.model(cons, prefer)
        except ContradictionError:
            model = ctx.solver.model(cons)
    except (ContradictionError, ConcretizationTimeout):
        return None

    def ev(e):
        return model.eval(e, model_completion=True).as_long()

    lay = ctx.layout
    accounts, acc_json = [], []
    for a in tx.accounts:
        key = b"".join(_le_bytes(ev(w), 8) for w in a.key)
        owner = b"".join(_le_bytes(ev(w), 8) for w in a.owner)
        dlen = min(ev(a.data_len), lay.max_data)
        data = b"".join(_le_bytes(ev(w), 8) for w in a.data)[:dlen]
        acc = ConcreteAccount(key=key, owner=owner, lamports=ev(a.lamports), data=data,
                              is_signer=ev(a.is_signer), is_writable=ev(a.is_writable),
                              executable=ev(a.executable))
        accounts.append(acc)
        acc_json.append({
            "key": key.hex(), "owner": owner.hex(), "lamports": acc.lamports,
            "is_signer": acc.is_signer, "is_writable": acc.is_writable,
            "executable": acc.executable, "data": data.hex(),
        })
    ix_len = min(ev(tx.ix_len), lay.max_ix)
    ix = b"".join(_le_bytes(ev(w), 8) for w in tx.instruction_data)[:ix_len]
    pda_table = {}
    for nbytes, arg, result in state.pda:
        arg_b = _le_bytes(ev(arg), nbytes)
        pda_table[arg_b.hex()] = _le_bytes(ev(result), 32).hex()
    cpi_effects = []
    for n, acc in state.havoc:
        while len(cpi_effects) <= n:
            cpi_effects.append({})
        words = (lay.max_data + 7) // 8
        data = b"".join(_le_bytes(ev(z3.BitVec(f"cpi{n}_acc{acc}_data_{k}", 64)), 8)
                        for k in range(words))
        cpi_effects[n][accounts[acc].key.hex()] = {
            "lamports": ev(z3.BitVec(f"cpi{n}_acc{acc}_lamports", 64)),
            "data": data[:lay.max_data].hex(),
        }
    blob = serialize(accounts, ix, ctx.program_id)
    vm = ConcreteVM(ctx.image, blob, pda_table=pda_table, cpi_effects=cpi_effects)
    vm.run(limit=max(ctx.config.instruction_limit, 1_000_000))
    reached = site in set(vm.visited)
    sidecar = {
        "site": site,
        "accounts": acc_json,
        "instruction_data": ix.hex(),
        "program_id": ctx.program_id.hex(),
        "pda_table": dict(sorted(pda_table.items())),
        "cpi_effects": cpi_effects,
        "replay": {"reached_site": reached, "status": vm.status,
                   "exit_code": vm.exit_code, "fault": vm.fault},
    }
    return Exploit(blob, sidecar, reached)


__all__ = [
    "Finding", "Exploit", "SignerVerdict", "checked_accounts", "trusted_accounts",
    "has_authority", "has_signer_check", "classify_write", "classify_cpi",
    "synthesize_exploit", "signer_constrained_true", "MOC", "MSC", "MOC_MSC", "ACPI", "YES",
]
