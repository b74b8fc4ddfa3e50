"""Regenerate the reference bitstreams under tests/golden/.

The inputs are integer CDFs and integer symbols, so the output is exact on
any platform.  Run from the repository root:

    python3 tools/make_golden.py
"""

import pathlib

import numpy as np

from easn.entropy import (
    CDF_TOTAL,
    BitstreamHeader,
    SymbolTable,
    pack_bitstream,
    range_encode,
)

GOLDEN_DIR = pathlib.Path(__file__).resolve().parent.parent / "tests" / "golden"


def case_tables():
    t1 = SymbolTable(0, -2, 2, np.array([0, 655, 6553, 52428, 58981, 65080,
                                         CDF_TOTAL]))
    t2 = SymbolTable(1, 0, 1, np.array([0, 60000, 65000, CDF_TOTAL]))
    return t1, t2


def main():
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    t1, t2 = case_tables()

    syms = np.array([0, 1, -1, 2, -2, 0, 0, 1])
    (GOLDEN_DIR / "payload_small.bin").write_bytes(
        range_encode(syms, [t1] * syms.size))

    tables = [t1, t2, t1, t2, t1]
    syms = np.array([2, 1, -900, 0, 0])
    (GOLDEN_DIR / "payload_escape.bin").write_bytes(range_encode(syms, tables))

    syms = np.array([(i * 7 + 3) % 5 - 2 for i in range(512)])
    tables = [t1 if i % 3 else t2 for i in range(512)]
    syms = np.array([s if t.symbol_min <= s <= t.symbol_max else s % 2
                     for s, t in zip(syms, tables)])
    (GOLDEN_DIR / "payload_long.bin").write_bytes(range_encode(syms, tables))

    t1, _ = case_tables()
    syms = np.array([1, 0, -2, 2, 0, 0])
    payload = range_encode(syms, [t1] * 6)
    header = BitstreamHeader(bytes(range(8)), 32, 48, 1, ((-2, 2),))
    (GOLDEN_DIR / "container.bin").write_bytes(pack_bitstream(header, payload))

    for name in ("payload_small.bin", "payload_escape.bin", "payload_long.bin",
                 "container.bin"):
        size = (GOLDEN_DIR / name).stat().st_size
        print(f"{name}: {size} bytes")


if __name__ == "__main__":
    main()
