"""Hybrid concrete/symbolic values.

A register value is either a Python ``int`` in ``[0, 2**64)`` or a 64-bit z3
bit-vector.  Memory bytes are ints, 8-bit z3 terms, or ``SymByte`` slices of a
wider term, which lets a load of a whole field return the original variable
instead of rebuilding it from extracts.
"""

from __future__ import annotations

import z3

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1


class SymByte:
    __slots__ = ("expr", "k")

    def __init__(self, expr, k):
        self.expr = expr
        self.k = k

    def to_z3(self):
        return z3.Extract(8 * self.k + 7, 8 * self.k, self.expr)

    def __eq__(self, other):
        return isinstance(other, SymByte) and self.k == other.k and self.expr.eq(other.expr)

    def __hash__(self):
        return hash((self.expr.hash(), self.k))

    def __repr__(self):
        return f"SymByte({self.expr}, {self.k})"


def is_sym(v) -> bool:
    return isinstance(v, z3.ExprRef)


def byte_to_z3(b):
    if isinstance(b, int):
        return z3.BitVecVal(b, 8)
    if isinstance(b, SymByte):
        return b.to_z3()
    return b


def same_byte(a, b) -> bool:
    if isinstance(a, int) or isinstance(b, int):
        return type(a) is type(b) and a == b
    if isinstance(a, SymByte) or isinstance(b, SymByte):
        return a == b
    return a.eq(b)


def to_bv(v, width: int = 64):
    if isinstance(v, int):
        return z3.BitVecVal(v & ((1 << width) - 1), width)
    w = v.size()
    if w == width:
        return v
    if w < width:
        return z3.ZeroExt(width - w, v)
    return z3.Extract(width - 1, 0, v)


def fold(e):
    """Simplify a bit-vector term; return an int when it is constant."""
    if isinstance(e, int):
        return e
    s = z3.simplify(e)
    if z3.is_bv_value(s):
        return s.as_long()
    return s


def fold_bool(c):
    if isinstance(c, bool):
        return c
    s = z3.simplify(c)
    if z3.is_true(s):
        return True
    if z3.is_false(s):
        return False
    return s


def subst_value(v, pairs):
    if isinstance(v, int) or not pairs:
        return v
    if isinstance(v, SymByte):
        e = z3.substitute(v.expr, *pairs)
        s = z3.simplify(e)
        if z3.is_bv_value(s):
            return (s.as_long() >> (8 * v.k)) & 0xFF
        return SymByte(s, v.k)
    return fold(z3.substitute(v, *pairs))


def bytes_to_value(bs):
    """Combine little-endian bytes into an int or a 64-bit term."""
    if all(isinstance(b, int) for b in bs):
        return int.from_bytes(bytes(bs), "little")
    first = bs[0]
    if isinstance(first, SymByte) and all(
            isinstance(b, SymByte) and b.expr is first.expr or
            (isinstance(b, SymByte) and b.expr.eq(first.expr))
            for b in bs):
        ks = [b.k for b in bs]
        if ks == list(range(ks[0], ks[0] + len(ks))):
            e = first.expr
            if ks[0] == 0 and len(ks) * 8 == e.size():
                part = e
            else:
                part = z3.Extract(8 * (ks[-1] + 1) - 1, 8 * ks[0], e)
            return fold(to_bv(part, 64))
    parts = [byte_to_z3(b) for b in reversed(bs)]
    e = parts[0] if len(parts) == 1 else z3.Concat(*parts)
    return fold(to_bv(e, 64))


def value_to_bytes(v, width):
    if isinstance(v, int):
        return list((v & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))
    if v.size() < 8 * width:
        v = to_bv(v, 8 * width)
    return [SymByte(v, k) for k in range(width)]


def ite(cond, a, b, width=64):
    if cond is True:
        return a
    if cond is False:
        return b
    if isinstance(a, int) and isinstance(b, int) and a == b:
        return a
    return fold(z3.If(cond, to_bv(a, width), to_bv(b, width)))


def sext(v, from_bits, to_bits=64):
    if isinstance(v, int):
        v &= (1 << from_bits) - 1
        if v >> (from_bits - 1):
            v |= ((1 << to_bits) - 1) ^ ((1 << from_bits) - 1)
        return v
    return fold(z3.SignExt(to_bits - from_bits, z3.Extract(from_bits - 1, 0, v)))


def low(v, bits):
    if isinstance(v, int):
        return v & ((1 << bits) - 1)
    return z3.Extract(bits - 1, 0, to_bv(v))


def _signed(v, bits):
    return v - (1 << bits) if v >> (bits - 1) else v


class DivisionByZero(Exception):
    pass


def _int_op(name, a, b, bits):
    mask = (1 << bits) - 1
    a &= mask
    b &= mask
    if name == "add":
        return (a + b) & mask
    if name == "sub":
        return (a - b) & mask
    if name in ("mul", "lmul"):
        return (a * b) & mask
    if name in ("div", "udiv"):
        if b == 0:
            raise DivisionByZero
        return a // b
    if name in ("mod", "urem"):
        if b == 0:
            raise DivisionByZero
        return a % b
    if name == "or":
        return a | b
    if name == "and":
        return a & b
    if name == "xor":
        return a ^ b
    if name == "lsh":
        return (a << (b & (bits - 1))) & mask
    if name == "rsh":
        return a >> (b & (bits - 1))
    if name == "arsh":
        return (_signed(a, bits) >> (b & (bits - 1))) & mask
    if name == "mov":
        return b
    if name == "neg":
        return (-a) & mask
    if name == "uhmul":
        return (a * b) >> 64
    if name == "shmul":
        return ((_signed(a, 64) * _signed(b, 64)) >> 64) & mask
    if name in ("sdiv", "srem"):
        sa, sb = _signed(a, bits), _signed(b, bits)
        if sb == 0 or (sa == -(1 << (bits - 1)) and sb == -1):
            raise DivisionByZero
        q = abs(sa) // abs(sb)
        if (sa < 0) != (sb < 0):
            q = -q
        if name == "sdiv":
            return q & mask
        return (sa - q * sb) & mask
    raise ValueError(name)


def _z3_op(name, a, b, bits):
    if name == "add":
        return a + b
    if name == "sub":
        return a - b
    if name in ("mul", "lmul"):
        return a * b
    if name in ("div", "udiv"):
        return z3.UDiv(a, b)
    if name in ("mod", "urem"):
        return z3.URem(a, b)
    if name == "or":
        return a | b
    if name == "and":
        return a & b
    if name == "xor":
        return a ^ b
    if name == "lsh":
        return a << (b & (bits - 1))
    if name == "rsh":
        return z3.LShR(a, b & (bits - 1))
    if name == "arsh":
        return a >> (b & (bits - 1))
    if name == "mov":
        return b
    if name == "neg":
        return -a
    if name == "uhmul":
        return z3.Extract(127, 64, z3.ZeroExt(64, a) * z3.ZeroExt(64, b))
    if name == "shmul":
        return z3.Extract(127, 64, z3.SignExt(64, a) * z3.SignExt(64, b))
    if name == "sdiv":
        return a / b
    if name == "srem":
        return z3.SRem(a, b)
    raise ValueError(name)


# 32-bit results of these operations are sign-extended to 64 bits
SIGN_EXTENDING_32 = frozenset({"add", "sub", "mul"})
DIVIDING = frozenset({"div", "mod", "udiv", "urem", "sdiv", "srem"})


def alu(name: str, bits: int, a, b):
    """Apply an ALU operation; 32-bit forms operate on the low words."""
    if isinstance(a, int) and isinstance(b, int):
        r = _int_op(name, a, b, bits)
        if bits == 32:
            return sext(r, 32) if name in SIGN_EXTENDING_32 else r
        return r
    za, zb = to_bv(a, 64), to_bv(b, 64)
    if bits == 32:
        za, zb = z3.Extract(31, 0, za), z3.Extract(31, 0, zb)
    r = _z3_op(name, za, zb, bits)
    if bits == 32:
        r = z3.SignExt(32, r) if name in SIGN_EXTENDING_32 else z3.ZeroExt(32, r)
    return fold(r)


def byteswap(v, bits, big_endian):
    if not big_endian:
        return low(v, bits) if isinstance(v, int) else fold(to_bv(low(v, bits), 64))
    nbytes = bits // 8
    if isinstance(v, int):
        return int.from_bytes((v & ((1 << bits) - 1)).to_bytes(nbytes, "little"), "big")
    parts = [z3.Extract(8 * k + 7, 8 * k, to_bv(v)) for k in range(nbytes)]
    return fold(to_bv(z3.Concat(*parts) if nbytes > 1 else parts[0], 64))


_CMP = {
    0x10: "eq", 0x50: "ne", 0x20: "ugt", 0x30: "uge", 0xA0: "ult", 0xB0: "ule",
    0x60: "sgt", 0x70: "sge", 0xC0: "slt", 0xD0: "sle", 0x40: "set",
}


def compare(code: int, a, b):
    """Branch condition for jump class ``code``: a Python bool or a z3 Bool."""
    name = _CMP[code]
    if isinstance(a, int) and isinstance(b, int):
        sa, sb = _signed(a, 64), _signed(b, 64)
        return {
            "eq": a == b, "ne": a != b, "ugt": a > b, "uge": a >= b, "ult": a < b,
            "ule": a <= b, "sgt": sa > sb, "sge": sa >= sb, "slt": sa < sb,
            "sle": sa <= sb, "set": (a & b) != 0,
        }[name]
    za, zb = to_bv(a), to_bv(b)
    c = {
        "eq": lambda: za == zb, "ne": lambda: za != zb, "ugt": lambda: z3.UGT(za, zb),
        "uge": lambda: z3.UGE(za, zb), "ult": lambda: z3.ULT(za, zb),
        "ule": lambda: z3.ULE(za, zb), "sgt": lambda: za > zb, "sge": lambda: za >= zb,
        "slt": lambda: za < zb, "sle": lambda: za <= zb,
        "set": lambda: (za & zb) != 0,
    }[name]()
    return fold_bool(c)


_vars_cache: dict = {}


def free_names(e) -> frozenset:
    """Names of free constants and uninterpreted function symbols occurring in ``e``."""
    if isinstance(e, (int, bool)):
        return frozenset()
    if isinstance(e, SymByte):
        e = e.expr
    key = e.get_id()
    hit = _vars_cache.get(key)
    if hit is not None and hit[0] is not None:
        return hit[1]
    out = set()
    seen = set()
    stack = [e]
    while stack:
        n = stack.pop()
        nid = n.get_id()
        if nid in seen:
            continue
        seen.add(nid)
        cached = _vars_cache.get(nid)
        if cached is not None:
            out |= cached[1]
            continue
        if z3.is_app(n):
            d = n.decl()
            if d.kind() == z3.Z3_OP_UNINTERPRETED:
                out.add(d.name())
            stack.extend(n.children())
    res = frozenset(out)
    if len(_vars_cache) > 500_000:
        _vars_cache.clear()
    _vars_cache[key] = (e, res)
    return res
