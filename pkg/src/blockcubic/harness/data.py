"""Datasets: LIBSVM text I/O and seeded synthetic instances."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, TextIO, Union

import numpy as np
import scipy.sparse as sp

from ..blocks import BlockPartition
from ..losses import cubed_abs
from ..problem import BlockLoss, CompositeProblem, LeastSquaresG, QuadraticG

__all__ = [
    "Dataset",
    "ParseError",
    "parse_libsvm",
    "write_libsvm",
    "gen_synthetic_cubic",
    "gen_synthetic_poisson",
    "gen_synthetic_logistic",
]


class ParseError(ValueError):
    """Malformed LIBSVM input; ``line`` is 1-based."""

    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(eq=False)
class Dataset:
    """Design matrix ``B`` (m x d, dense or CSR) with one label or count per row."""

    B: Union[np.ndarray, sp.csr_matrix]
    labels: np.ndarray
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        if self.B.ndim != 2 or self.B.shape[0] != self.labels.size:
            raise ValueError("B must be m x d with one label per row")
        data = self.B.data if sp.issparse(self.B) else self.B
        if not np.all(np.isfinite(data)) or not np.all(np.isfinite(self.labels)):
            raise ValueError("dataset entries must be finite")

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    def dense(self) -> np.ndarray:
        return self.B.toarray() if sp.issparse(self.B) else np.asarray(self.B, dtype=float)


def _number(tok: str, line: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"non-numeric {what} {tok!r}", line) from None


def parse_libsvm(stream: Union[str, TextIO], d: Optional[int] = None, name: str = "libsvm") -> Dataset:
    """Read ``<label> <index>:<value> ...`` lines with 1-based indices into CSR form.

    Blank lines and ``#`` comments are skipped. ``d`` overrides the column
    count, which otherwise is the largest index seen.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    labels, rows, cols, vals = [], [], [], []
    for lineno, raw in enumerate(stream, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        toks = text.split()
        labels.append(_number(toks[0], lineno, "label"))
        r = len(labels) - 1
        for tok in toks[1:]:
            idx, sep, val = tok.partition(":")
            if not sep:
                raise ParseError(f"expected index:value, got {tok!r}", lineno)
            try:
                j = int(idx)
            except ValueError:
                raise ParseError(f"non-integer index {idx!r}", lineno) from None
            if j < 1:
                raise ParseError(f"indices are 1-based, got {j}", lineno)
            rows.append(r)
            cols.append(j - 1)
            vals.append(_number(val, lineno, "value"))
    if not labels:
        raise ValueError("no data rows in LIBSVM input")
    width = max(cols, default=-1) + 1
    if d is not None:
        if d < width:
            raise ValueError(f"d={d} is smaller than the largest index {width}")
        width = d
    B = sp.csr_matrix((vals, (rows, cols)), shape=(len(labels), max(width, 1)))
    B.sum_duplicates()
    return Dataset(B, np.array(labels), name=name)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else repr(float(v))


def write_libsvm(ds: Dataset, stream: TextIO) -> None:
    """Write nonzeros with 1-based indices; values use round-trip float formatting."""
    B = sp.csr_matrix(ds.B)
    B.sort_indices()
    for r in range(B.shape[0]):
        lo, hi = B.indptr[r], B.indptr[r + 1]
        items = [f"{j + 1}:{_fmt(v)}" for j, v in zip(B.indices[lo:hi], B.data[lo:hi]) if v != 0]
        stream.write(" ".join([_fmt(ds.labels[r])] + items) + "\n")


def gen_synthetic_cubic(N: int, seed: int, form: str = "residual") -> CompositeProblem:
    """Cubically regularized regression over unit blocks.

    ``U`` (10 x N), ``xi`` (10) and ``v`` (N) are drawn in that order from a
    standard normal stream; ``A = U^T U``, ``b = -U^T xi``, ``c = 1 + |v|``.
    Each cubic term ``(c_i/6) |x_i|^3`` has Hessian-Lipschitz constant ``c_i``.

    Parameters
    ----------
    form : {"residual", "quadratic"}
        ``"residual"`` gives ``1/2 ||A x - b||^2 + sum_i (c_i/6) |x_i|^3``.
        ``"quadratic"`` uses ``1/2 x^T A x + b^T x`` as the smooth part, which
        has curvature ``A`` instead of ``A^2`` and is far better conditioned.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if form not in ("residual", "quadratic"):
        raise ValueError("form must be 'residual' or 'quadratic'")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((10, N))
    xi = rng.standard_normal(10)
    v = rng.standard_normal(N)
    A = U.T @ U
    b = -U.T @ xi
    c = 1.0 + np.abs(v)
    phi = [BlockLoss(cubed_abs(c=ci / 2.0)) for ci in c]
    g = LeastSquaresG(A, b) if form == "residual" else QuadraticG(A, b)
    return CompositeProblem(BlockPartition.uniform(N), g=g, phi=phi)


def gen_synthetic_poisson(m: int, d: int, seed: int) -> Dataset:
    """Standard normal ``B`` (m x d) and Poisson(1) counts."""
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((m, d))
    y = rng.poisson(1.0, size=m).astype(float)
    return Dataset(B, y, name=f"poisson_synthetic_{m}x{d}_s{seed}")


def gen_synthetic_logistic(m: int, d: int, seed: int, noise: float = 0.5) -> Dataset:
    """Standard normal ``B`` with labels ``sign(B w + noise * e)`` for a random ``w``.

    A small stand-in for high-dimensional binary classification data.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((m, d))
    w = rng.standard_normal(d) / np.sqrt(d)
    y = np.where(B @ w + noise * rng.standard_normal(m) >= 0, 1.0, -1.0)
    return Dataset(B, y, name=f"logistic_synthetic_{m}x{d}_s{seed}")
