#!/usr/bin/env python3
"""Reference model for the PA primitives, written from the algorithm
descriptions rather than from the C++ sources.

Writes three fixture files:
  pac_kat.txt       key_lo key_hi data modifier width tag
  function_ids.txt  name id
  keyset_kat.txt    seed ia.lo ia.hi ib.lo ib.hi da.lo da.hi db.lo db.hi
                    ga.lo ga.hi reference pacda(ptr, mod) pacga(sp, mod)
                    for a fixed ptr/sp/mod at W=16
"""

import struct
import sys
from pathlib import Path

M64 = (1 << 64) - 1


def rotl(x, b):
    return ((x << b) | (x >> (64 - b))) & M64


def siphash24(k0, k1, msg):
    v0 = k0 ^ 0x736F6D6570736575
    v1 = k1 ^ 0x646F72616E646F6D
    v2 = k0 ^ 0x6C7967656E657261
    v3 = k1 ^ 0x7465646279746573

    def rnd():
        nonlocal v0, v1, v2, v3
        v0 = (v0 + v1) & M64; v1 = rotl(v1, 13); v1 ^= v0; v0 = rotl(v0, 32)
        v2 = (v2 + v3) & M64; v3 = rotl(v3, 16); v3 ^= v2
        v0 = (v0 + v3) & M64; v3 = rotl(v3, 21); v3 ^= v0
        v2 = (v2 + v1) & M64; v1 = rotl(v1, 17); v1 ^= v2; v2 = rotl(v2, 32)

    tail = len(msg) % 8
    padded = msg[: len(msg) - tail]
    for i in range(0, len(padded), 8):
        m = struct.unpack("<Q", padded[i:i + 8])[0]
        v3 ^= m; rnd(); rnd(); v0 ^= m
    last = bytearray(msg[len(msg) - tail:]) + bytes(7 - tail)
    m = struct.unpack("<Q", bytes(last) + bytes([len(msg) & 0xFF]))[0]
    v3 ^= m; rnd(); rnd(); v0 ^= m
    v2 ^= 0xFF
    for _ in range(4):
        rnd()
    return v0 ^ v1 ^ v2 ^ v3


def pac(k0, k1, data, mod, width):
    msg = struct.pack("<QQ", data, mod)
    return siphash24(k0, k1, msg) & ((1 << width) - 1)


def fnv_fold(name):
    h = 0x811C9DC5
    for c in name.encode():
        h ^= c
        h = (h * 0x01000193) & 0xFFFFFFFF
    return (h >> 16) ^ (h & 0xFFFF)


class MT19937_64:
    N, M = 312, 156

    def __init__(self, seed):
        self.mt = [0] * self.N
        self.mt[0] = seed & M64
        for i in range(1, self.N):
            prev = self.mt[i - 1]
            self.mt[i] = (6364136223846793005 * (prev ^ (prev >> 62)) + i) & M64
        self.idx = self.N

    def _twist(self):
        upper, lower = 0xFFFFFFFF80000000, 0x7FFFFFFF
        for i in range(self.N):
            x = (self.mt[i] & upper) | (self.mt[(i + 1) % self.N] & lower)
            xa = x >> 1
            if x & 1:
                xa ^= 0xB5026F5AA96619E9
            self.mt[i] = self.mt[(i + self.M) % self.N] ^ xa
        self.idx = 0

    def __call__(self):
        if self.idx >= self.N:
            self._twist()
        y = self.mt[self.idx]
        self.idx += 1
        y ^= (y >> 29) & 0x5555555555555555
        y ^= (y << 17) & 0x71D67FFFEDA60000
        y ^= (y << 37) & 0xFFF7EEE000000000
        y ^= y >> 43
        return y & M64


def self_check():
    # Published SipHash-2-4 vectors (key 00..0f).
    k0 = struct.unpack("<Q", bytes(range(8)))[0]
    k1 = struct.unpack("<Q", bytes(range(8, 16)))[0]
    assert siphash24(k0, k1, b"") == 0x726FDB47DD0E0E31
    assert siphash24(k0, k1, bytes(range(15))) == 0xA129CA6149BE45E5
    # 10000th output of mt19937_64 with the default seed.
    g = MT19937_64(5489)
    for _ in range(9999):
        g()
    assert g() == 9981545732273789042


def main(out_dir):
    self_check()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    g = MT19937_64(20240601)
    rows = []
    widths = [1, 4, 7, 8, 12, 16, 24, 32]
    for i in range(32):
        k0, k1, data, mod = g(), g(), g(), g()
        if i % 4 == 0:
            data &= (1 << 48) - 1
        w = widths[i % len(widths)]
        rows.append(f"{k0:016x} {k1:016x} {data:016x} {mod:016x} {w} "
                    f"{pac(k0, k1, data, mod, w):08x}")
    (out / "pac_kat.txt").write_text("\n".join(rows) + "\n")

    names = ["main", "handle", "other", "relay", "f", "parse_header",
             "a", "leaf_scalar", "three_bufs", "x" * 40]
    (out / "function_ids.txt").write_text(
        "".join(f"{n} {fnv_fold(n)}\n" for n in names))

    ptr = 0x00007FFFFFFFEED0
    sp = 0x00007FFFFFFFEEA0
    mod = ((sp & ((1 << 48) - 1)) << 16) + fnv_fold("handle")
    rows = []
    for seed in [0, 1, 7, 42, 0xDEADBEEF, M64]:
        r = MT19937_64(seed)
        words = [r() for _ in range(10)]
        ref = r()
        da_lo, da_hi = words[4], words[5]
        ga_lo, ga_hi = words[8], words[9]
        signed = ptr | (pac(da_lo, da_hi, ptr, mod, 16) << 48)
        anchor = pac(ga_lo, ga_hi, sp, mod, 32) << 32
        rows.append(" ".join([str(seed)] + [f"{w:016x}" for w in words] +
                             [f"{ref:016x}", f"{signed:016x}",
                              f"{anchor:016x}"]))
    (out / "keyset_kat.txt").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else
         Path(__file__).resolve().parent.parent / "fixtures")
