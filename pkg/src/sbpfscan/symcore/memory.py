"""Region-based byte memory with copy-on-fork overlays."""

from __future__ import annotations

from dataclasses import dataclass

from .values import SymByte, subst_value

PROGRAM_START = 0x1_0000_0000
STACK_START = 0x2_0000_0000
HEAP_START = 0x3_0000_0000
INPUT_START = 0x4_0000_0000
FRAME_SIZE = 4096
MAX_CALL_DEPTH = 64
STACK_SIZE = FRAME_SIZE * MAX_CALL_DEPTH
HEAP_SIZE = 32 * 1024


@dataclass(frozen=True)
class MemRegion:
    name: str
    base: int
    size: int
    writable: bool
    initial: object = None      # bytes, a callable offset -> byte, or None for zeros

    def contains(self, addr: int, width: int = 1) -> bool:
        return self.base <= addr and addr + width <= self.base + self.size

    def default(self, off: int):
        init = self.initial
        if init is None:
            return 0
        if isinstance(init, (bytes, bytearray)):
            return init[off] if off < len(init) else 0
        return init(off)


class Memory:
    __slots__ = ("regions", "overlays", "subst")

    def __init__(self, regions, overlays=None, subst=()):
        self.regions = regions
        self.overlays = overlays if overlays is not None else {r.name: {} for r in regions}
        self.subst = subst

    def copy(self) -> "Memory":
        return Memory(self.regions, {k: dict(v) for k, v in self.overlays.items()}, self.subst)

    def region(self, name: str) -> MemRegion:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def find(self, addr: int, width: int = 1):
        for r in self.regions:
            if r.base <= addr < r.base + r.size:
                return r if addr + width <= r.base + r.size else None
        return None

    def region_near(self, addr: int):
        for r in self.regions:
            if r.base <= addr < r.base + r.size:
                return r
        return None

    def get(self, region: MemRegion, off: int):
        ov = self.overlays[region.name]
        b = ov.get(off)
        if b is not None:
            return b
        b = region.default(off)
        if self.subst and not isinstance(b, int):
            b = subst_value(b, self.subst)
        return b

    def read(self, region: MemRegion, off: int, n: int) -> list:
        ov = self.overlays[region.name]
        out = []
        for i in range(off, off + n):
            b = ov.get(i)
            if b is None:
                b = region.default(i)
                if self.subst and not isinstance(b, int):
                    b = subst_value(b, self.subst)
            out.append(b)
        return out

    def write(self, region: MemRegion, off: int, data) -> None:
        ov = self.overlays[region.name]
        for i, b in enumerate(data):
            ov[off + i] = b

    def written_offsets(self, name: str):
        return self.overlays[name].keys()

    def apply_substitution(self, pairs) -> None:
        """Rewrite every stored byte under ``pairs`` and remember them for lazily read bytes."""
        for ov in self.overlays.values():
            for k, b in list(ov.items()):
                if not isinstance(b, int):
                    ov[k] = subst_value(b, pairs)
        self.subst = tuple(self.subst) + tuple(pairs)


def make_symbyte(expr, k):
    return SymByte(expr, k)
