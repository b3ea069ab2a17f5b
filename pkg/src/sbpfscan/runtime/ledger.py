"""Per-path account trust ledger and critical-action records."""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field

_VAR = re.compile(
    r"^acc(\d+)_(key|owner|data_len|data|lamports|is_signer|is_writable|executable)(?:_(\d+))?$")

READ_FIELDS = frozenset({"data", "lamports"})
WRITE_FIELDS = frozenset({"data", "lamports", "data_len"})

_name_cache: dict = {}


def classify_name(name: str):
    """(account index, field) for input variables; ('ix', None), ('pda', None) or None otherwise."""
    hit = _name_cache.get(name)
    if hit is not None or name in _name_cache:
        return hit
    m = _VAR.match(name)
    if m:
        res = (int(m.group(1)), m.group(2))
    elif name == "ix_len" or name.startswith("ix_"):
        res = ("ix", None)
    elif name.startswith("pda_"):
        res = ("pda", None)
    else:
        res = None
    _name_cache[name] = res
    return res


class Ledger:
    __slots__ = ("active", "reads", "owner_compared", "key_sources", "signer_seen",
                 "writes", "written")

    def __init__(self):
        self.active = False
        self.reads = {}
        self.owner_compared = frozenset()
        self.key_sources = {}
        self.signer_seen = frozenset()
        self.writes = ()
        self.written = frozenset()

    def copy(self) -> "Ledger":
        c = Ledger.__new__(Ledger)
        c.active = self.active
        c.reads = dict(self.reads)
        c.owner_compared = self.owner_compared
        c.key_sources = dict(self.key_sources)
        c.signer_seen = self.signer_seen
        c.writes = self.writes
        c.written = self.written
        return c

    def on_read(self, acc: int, fld: str) -> None:
        if not self.active:
            return
        cur = self.reads.get(acc, frozenset())
        if fld not in cur:
            self.reads[acc] = cur | {fld}

    def on_write(self, acc: int, fld: str, site: int) -> None:
        if not self.active:
            return
        self.writes = self.writes + ((acc, fld, site),)
        if fld in WRITE_FIELDS:
            self.written = self.written | {acc}

    def on_branch(self, names) -> None:
        """Record which account fields a branch condition depends on."""
        if not self.active or not names:
            return
        parsed = [(n, classify_name(n)) for n in names]
        for _, info in parsed:
            if info is None or not isinstance(info[0], int):
                continue
            acc, fld = info
            if fld == "owner":
                self.owner_compared = self.owner_compared | {acc}
            elif fld == "is_signer":
                self.signer_seen = self.signer_seen | {acc}
        key_accs = {info[0] for _, info in parsed
                    if info and isinstance(info[0], int) and info[1] == "key"}
        for acc in key_accs:
            sources = set()
            for _, info in parsed:
                if info is None:
                    continue
                if info[0] == acc and info[1] == "key":
                    continue
                if info[0] == "pda":
                    sources.add("pda")
                elif info[0] == "ix":
                    sources.add("ix")
                elif info[1] in ("data", "key", "owner"):
                    sources.add((info[1], info[0]))
                elif info[1] not in ("is_signer", "is_writable", "executable"):
                    sources.add(("other", info[0]))
            if not sources:
                sources.add("const")
            self.key_sources[acc] = self.key_sources.get(acc, frozenset()) | frozenset(sources)

    @property
    def read_accounts(self) -> frozenset:
        return frozenset(a for a, f in self.reads.items() if f & READ_FIELDS)

    def summary(self) -> dict:
        accs = sorted(set(self.reads) | set(self.key_sources) | self.owner_compared |
                      self.signer_seen | self.written)
        out = {}
        for a in accs:
            out[str(a)] = {
                "read": sorted(self.reads.get(a, ())),
                "owner_compared": a in self.owner_compared,
                "key_sources": sorted(_fmt_source(s) for s in self.key_sources.get(a, ())),
                "signer_branch": a in self.signer_seen,
                "written": a in self.written,
            }
        return out


def _fmt_source(s):
    if isinstance(s, tuple):
        return f"{s[0]}:{s[1]}"
    return s


@dataclass
class CriticalAction:
    kind: str                 # "account-write" or "cpi"
    site: int
    account_index: int | None = None
    field: str | None = None
    target_key: object = None
    handed_accounts: tuple = ()
    reads: frozenset = frozenset()
    state: object = dc_field(default=None, repr=False)
    path_id: tuple = ()
