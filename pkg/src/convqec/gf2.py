"""Bit-packed linear algebra over GF(2).

Rows are stored as little-endian uint64 words; row reduction XORs whole
words at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD = 64


def _n_words(cols: int) -> int:
    return max(1, (cols + WORD - 1) // WORD)


def pack_rows(dense: np.ndarray) -> np.ndarray:
    """Pack a (rows, cols) 0/1 array into (rows, words) uint64."""
    dense = np.asarray(dense, dtype=np.uint8) & 1
    if dense.ndim != 2:
        raise ValueError("expected a 2-D array")
    rows, cols = dense.shape
    words = _n_words(cols)
    padded = np.zeros((rows, words * WORD), dtype=np.uint8)
    padded[:, :cols] = dense
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").reshape(rows, words).astype(np.uint64)


def unpack_rows(packed: np.ndarray, cols: int) -> np.ndarray:
    packed = np.ascontiguousarray(packed, dtype="<u8")
    rows = packed.shape[0]
    bits = np.unpackbits(packed.view(np.uint8).reshape(rows, -1), axis=1, bitorder="little")
    return bits[:, :cols].astype(np.uint8)


@dataclass(frozen=True, eq=False)
class BinaryMatrix:
    """Matrix over GF(2) with bit-packed rows."""

    rows: int
    cols: int
    bits: np.ndarray

    @classmethod
    def from_dense(cls, dense) -> "BinaryMatrix":
        dense = np.asarray(dense, dtype=np.uint8)
        if dense.ndim == 1:
            dense = dense.reshape(1, -1)
        if dense.size == 0:
            r = dense.shape[0] if dense.ndim == 2 else 0
            c = dense.shape[1] if dense.ndim == 2 else 0
            return cls(r, c, np.zeros((r, _n_words(c)), dtype=np.uint64))
        return cls(dense.shape[0], dense.shape[1], pack_rows(dense))

    @classmethod
    def from_supports(cls, supports, cols: int) -> "BinaryMatrix":
        dense = np.zeros((len(supports), cols), dtype=np.uint8)
        for i, sup in enumerate(supports):
            for j in sup:
                dense[i, j] ^= 1
        return cls.from_dense(dense)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "BinaryMatrix":
        return cls(rows, cols, np.zeros((rows, _n_words(cols)), dtype=np.uint64))

    def to_dense(self) -> np.ndarray:
        if self.rows == 0:
            return np.zeros((0, self.cols), dtype=np.uint8)
        return unpack_rows(self.bits, self.cols)

    def supports(self) -> list[list[int]]:
        return [[int(j) for j in np.flatnonzero(row)] for row in self.to_dense()]

    @property
    def T(self) -> "BinaryMatrix":
        return BinaryMatrix.from_dense(self.to_dense().T)

    def __matmul__(self, other: "BinaryMatrix") -> "BinaryMatrix":
        if self.cols != other.rows:
            raise ValueError(f"shape mismatch {self.shape} @ {other.shape}")
        a = self.to_dense().astype(np.int64)
        b = other.to_dense().astype(np.int64)
        return BinaryMatrix.from_dense((a @ b) & 1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def is_zero(self) -> bool:
        return not self.bits.any()

    def hstack(self, other: "BinaryMatrix") -> "BinaryMatrix":
        return BinaryMatrix.from_dense(np.hstack([self.to_dense(), other.to_dense()]))

    def vstack(self, other: "BinaryMatrix") -> "BinaryMatrix":
        return BinaryMatrix.from_dense(np.vstack([self.to_dense(), other.to_dense()]))

    def rank(self) -> int:
        return len(rref(self.bits, self.cols)[1])

    def weight(self) -> np.ndarray:
        return self.to_dense().sum(axis=1)


def _bit(words: np.ndarray, col: int) -> np.ndarray:
    return (words[..., col // WORD] >> np.uint64(col % WORD)) & np.uint64(1)


def rref(bits: np.ndarray, cols: int) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form of packed rows.

    Pivots are chosen in increasing column order, and within a column the
    lowest-index remaining row wins. Returns (reduced rows, pivot columns);
    rows beyond the rank are zero.
    """
    work = np.array(bits, dtype=np.uint64, copy=True)
    n_rows = work.shape[0]
    pivots: list[int] = []
    r = 0
    for c in range(cols):
        if r == n_rows:
            break
        col_bits = _bit(work[r:], c).astype(bool)
        hits = np.flatnonzero(col_bits)
        if hits.size == 0:
            continue
        p = r + hits[0]
        if p != r:
            work[[r, p]] = work[[p, r]]
        mask = _bit(work, c).astype(bool)
        mask[r] = False
        work[mask] ^= work[r]
        pivots.append(c)
        r += 1
    return work, pivots


def rank(dense) -> int:
    return BinaryMatrix.from_dense(dense).rank()


def nullspace(m: BinaryMatrix) -> BinaryMatrix:
    """Basis of {v : m v = 0}, one vector per free column (ascending)."""
    red, pivots = rref(m.bits, m.cols)
    dense = unpack_rows(red[: len(pivots)], m.cols) if pivots else np.zeros((0, m.cols), np.uint8)
    free = [c for c in range(m.cols) if c not in set(pivots)]
    basis = np.zeros((len(free), m.cols), dtype=np.uint8)
    for i, f in enumerate(free):
        basis[i, f] = 1
        for row, pc in zip(dense, pivots):
            if row[f]:
                basis[i, pc] = 1
    return BinaryMatrix.from_dense(basis) if free else BinaryMatrix.zeros(0, m.cols)


def in_rowspace(vec, m: BinaryMatrix) -> bool:
    base = m.rank()
    return BinaryMatrix.from_dense(np.vstack([m.to_dense(), np.asarray(vec, np.uint8).reshape(1, -1)])).rank() == base


def extend_basis(base: BinaryMatrix, candidates: BinaryMatrix, count: int | None = None) -> np.ndarray:
    """Greedily pick candidate rows (lowest index first) independent of base.

    Returns the indices of chosen candidates.
    """
    cols = base.cols
    # incremental echelon form: keep pivot -> row
    red, pivots = rref(base.bits, cols)
    rows = [red[i].copy() for i in range(len(pivots))]
    piv = list(pivots)
    chosen = []
    for i in range(candidates.rows):
        v = candidates.bits[i].copy()
        for pr, pc in zip(rows, piv):
            if _bit(v, pc):
                v ^= pr
        nz = np.flatnonzero(unpack_rows(v.reshape(1, -1), cols)[0])
        if nz.size == 0:
            continue
        c = int(nz[0])
        # keep the basis fully reduced on existing pivots
        for j in range(len(rows)):
            if _bit(rows[j], c):
                rows[j] = rows[j] ^ v
        rows.append(v)
        piv.append(c)
        chosen.append(i)
        if count is not None and len(chosen) == count:
            break
    return np.asarray(chosen, dtype=int)


def inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a square invertible 0/1 matrix over GF(2)."""
    m = np.asarray(m, dtype=np.uint8) & 1
    n = m.shape[0]
    aug = np.hstack([m, np.eye(n, dtype=np.uint8)])
    red, pivots = rref(pack_rows(aug), 2 * n)
    if pivots[:n] != list(range(n)):
        raise np.linalg.LinAlgError("matrix is singular over GF(2)")
    return unpack_rows(red[:n], 2 * n)[:, n:]
