"""Byte layout of the serialized program input.

Per non-duplicate account::

    0   marker (0xff)          1  is_signer      2  is_writable   3  executable
    4   padding (4)            8  key (32)       40 owner (32)    72 lamports (8)
    80  data_len (8)           88 data (data_len) + realloc padding, 8-aligned
        rent_epoch (8)

The region starts with an 8-byte account count and ends with the instruction
data length, the instruction bytes and the 32-byte program id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import ConfigurationError

REALLOC_PADDING = 10240
NON_DUP_MARKER = 0xFF
INPUT_REGION_CAP = 16 * 1024 * 1024

OFF_MARKER = 0
OFF_IS_SIGNER = 1
OFF_IS_WRITABLE = 2
OFF_EXECUTABLE = 3
OFF_KEY = 8
OFF_OWNER = 40
OFF_LAMPORTS = 72
OFF_DATA_LEN = 80
OFF_DATA = 88

FLAG_FIELDS = ("is_signer", "is_writable", "executable")
_FIXED_FIELDS = (
    (OFF_MARKER, 1, "marker"), (OFF_IS_SIGNER, 1, "is_signer"),
    (OFF_IS_WRITABLE, 1, "is_writable"), (OFF_EXECUTABLE, 1, "executable"),
    (4, 4, "padding"), (OFF_KEY, 32, "key"), (OFF_OWNER, 32, "owner"),
    (OFF_LAMPORTS, 8, "lamports"), (OFF_DATA_LEN, 8, "data_len"),
)


def align8(n: int) -> int:
    return (n + 7) & ~7


def account_footprint(data_len: int) -> int:
    return align8(OFF_DATA + data_len + REALLOC_PADDING) + 8


@dataclass(frozen=True)
class InputLayout:
    """Analysis layout: every variable-length field reserves its full capacity."""

    n_accounts: int
    max_data: int
    max_ix: int = 1024

    def __post_init__(self):
        if self.n_accounts < 1:
            raise ConfigurationError("at least one account is required")
        if self.max_data < 0 or self.max_ix < 0:
            raise ConfigurationError("capacities must be non-negative")
        if self.size > INPUT_REGION_CAP:
            raise ConfigurationError(
                f"input region of {self.size} bytes exceeds the {INPUT_REGION_CAP}-byte cap")

    @property
    def footprint(self) -> int:
        return account_footprint(self.max_data)

    def account_base(self, i: int) -> int:
        return 8 + i * self.footprint

    @property
    def ix_len_offset(self) -> int:
        return 8 + self.n_accounts * self.footprint

    @property
    def ix_offset(self) -> int:
        return self.ix_len_offset + 8

    @property
    def program_id_offset(self) -> int:
        return self.ix_offset + self.max_ix

    @property
    def size(self) -> int:
        return self.program_id_offset + 32

    def field_at(self, off: int):
        """Classify an input offset: (account index or None, field name, offset within field)."""
        if off < 8:
            return None, "count", off
        if off >= self.ix_len_offset:
            if off < self.ix_offset:
                return None, "ix_len", off - self.ix_len_offset
            if off < self.program_id_offset:
                return None, "ix", off - self.ix_offset
            return None, "program_id", off - self.program_id_offset
        i, rel = divmod(off - 8, self.footprint)
        for start, width, name in _FIXED_FIELDS:
            if start <= rel < start + width:
                return i, name, rel - start
        if rel < OFF_DATA + self.max_data:
            return i, "data", rel - OFF_DATA
        if rel >= self.footprint - 8:
            return i, "rent_epoch", rel - (self.footprint - 8)
        return i, "realloc", rel - OFF_DATA - self.max_data

    def field_offset(self, i: int, name: str) -> int:
        base = self.account_base(i)
        for start, _, fname in _FIXED_FIELDS:
            if fname == name:
                return base + start
        if name == "data":
            return base + OFF_DATA
        if name == "rent_epoch":
            return base + self.footprint - 8
        raise KeyError(name)


@dataclass
class ConcreteAccount:
    key: bytes
    owner: bytes
    lamports: int
    data: bytes
    is_signer: int = 0
    is_writable: int = 0
    executable: int = 0
    rent_epoch: int = 0


def serialize(accounts, ix_data: bytes, program_id: bytes) -> bytes:
    """Real loader layout: data occupies exactly its length, program id follows the ix bytes."""
    out = bytearray(struct.pack("<Q", len(accounts)))
    for acc in accounts:
        out += bytes([NON_DUP_MARKER, acc.is_signer & 0xFF, acc.is_writable & 0xFF,
                      acc.executable & 0xFF]) + bytes(4)
        out += acc.key.ljust(32, b"\0")[:32] + acc.owner.ljust(32, b"\0")[:32]
        out += struct.pack("<QQ", acc.lamports & (2**64 - 1), len(acc.data))
        out += acc.data + bytes(REALLOC_PADDING)
        out += bytes(align8(len(out)) - len(out))
        out += struct.pack("<Q", acc.rent_epoch)
    out += struct.pack("<Q", len(ix_data)) + ix_data + program_id
    return bytes(out)


def deserialize(blob: bytes):
    """Inverse of ``serialize`` for non-duplicate inputs: (accounts, ix_data, program_id)."""
    pos = 0
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    accounts = []
    for _ in range(n):
        if blob[pos] != NON_DUP_MARKER:
            raise ValueError("duplicate accounts are not supported")
        flags = blob[pos + 1:pos + 4]
        pos += 8
        key, owner = blob[pos:pos + 32], blob[pos + 32:pos + 64]
        pos += 64
        lamports, dlen = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        data = blob[pos:pos + dlen]
        pos = align8(pos + dlen + REALLOC_PADDING)
        (rent,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        accounts.append(ConcreteAccount(bytes(key), bytes(owner), lamports, bytes(data),
                                        flags[0], flags[1], flags[2], rent))
    (ix_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    ix = blob[pos:pos + ix_len]
    program_id = blob[pos + ix_len:pos + ix_len + 32]
    return accounts, bytes(ix), bytes(program_id)
