"""CSV helpers shared by the run traces (fixed header, round-trip floats)."""
from __future__ import annotations

import csv
import math
from typing import Iterable, Sequence

__all__ = ["fmt_float", "write_rows", "read_rows"]


def fmt_float(v: float) -> str:
    """Shortest string that parses back to the same double."""
    return repr(float(v))


def _open(f, mode):
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        return open(f, mode, newline=""), True
    return f, False


def write_rows(f, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    fh, own = _open(f, "w")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if own:
            fh.close()


def read_rows(f, header: Sequence[str]) -> list:
    """Rows after a header that must equal ``header``; empty cells become ``nan``."""
    fh, own = _open(f, "r")
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"CSV must start with header {','.join(header)}")
    return [[float(c) if c else math.nan for c in r] for r in rows[1:]]
