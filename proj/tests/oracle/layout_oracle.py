#!/usr/bin/env python3
"""Frame layout and instrumentation-cost model, kept independent of the
C++ pass. Reads a program file and writes, for every mode and both local
orderings, one line per function:

  mode rearrange function frame_size slots pro_counts epi_counts

slots is label@offset+size joined by ';' (padding omitted, trailing frame
padding never listed). Counts are pac/load/store/cmp per invocation.
"""

import json
import sys
from pathlib import Path

MODES = ["none", "stackguard", "terminator", "strong_heuristic",
         "pcan_standalone", "pcan_combined"]
THRESHOLD = 8


def is_protected(fn, mode):
    locals_ = fn["locals"]
    if mode == "none":
        return False
    if mode in ("stackguard", "terminator"):
        return any(l["kind"] == "buffer" and l["size"] > THRESHOLD
                   for l in locals_)
    if mode == "strong_heuristic":
        return any(l["kind"] == "buffer" or l.get("address_taken")
                   or l.get("register_local") for l in locals_)
    return True


def layout(fn, mode, rearrange):
    prot = is_protected(fn, mode)
    pcan = mode.startswith("pcan")
    locals_ = fn["locals"]
    if rearrange:
        locals_ = ([l for l in locals_ if l["kind"] == "scalar"] +
                   [l for l in locals_ if l["kind"] == "buffer"])
    slots = []
    off = 0
    n = 0
    for l in locals_:
        if l["kind"] == "scalar":
            slots.append((l["name"], off, 8))
            off += 8
            continue
        off += -l["size"] % 8
        slots.append((l["name"], off, l["size"]))
        off += l["size"]
        if prot and pcan:
            n += 1
            slots.append((f"C{n}", off, 8))
            off += 8
    if prot and mode != "pcan_combined":
        slots.append(("C0", off, 8))
        off += 8
    slots.append(("return", off, 8))
    off += 8
    frame = (off + 15) // 16 * 16
    return frame, slots, prot, n


def counts(mode, prot, n):
    zero = (0, 0, 0, 0)
    if not prot:
        return zero, zero
    if mode == "pcan_standalone":
        return (n + 1, 0, n + 1, 0), (n + 1, n + 1, 0, 1)
    if mode == "pcan_combined":
        return (n + 1, 0, n + 1, 0), (n + 1, n + 1, 0, 0)
    if mode == "terminator":
        return (0, 0, 1, 0), (0, 1, 0, 1)
    return (0, 1, 1, 0), (0, 2, 0, 1)


def fmt(c):
    return "/".join(map(str, c))


def main(program, out):
    prog = json.loads(Path(program).read_text())
    lines = []
    for rearrange in (1, 0):
        for mode in MODES:
            for fn in sorted(prog["functions"], key=lambda f: f["name"]):
                frame, slots, prot, n = layout(fn, mode, rearrange)
                pro, epi = counts(mode, prot, n)
                s = ";".join(f"{a}@{b}+{c}" for a, b, c in slots)
                lines.append(f"{mode} {rearrange} {fn['name']} {frame} {s} "
                             f"{fmt(pro)} {fmt(epi)}")
    Path(out).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    here = Path(__file__).resolve().parent.parent
    main(sys.argv[1] if len(sys.argv) > 1 else here.parent / "corpus" /
         "suite.json",
         sys.argv[2] if len(sys.argv) > 2 else here / "fixtures" /
         "layouts.txt")
