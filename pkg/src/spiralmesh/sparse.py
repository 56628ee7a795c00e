"""Minimal COO sparse matrices for pooling/unpooling transforms.

Entries are unique (row, col) pairs. Apply routines support batched
inputs laid out as stacked blocks of rows, which is how same-topology
samples are fed through the networks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["SparseMatrix", "SparseMatrixError", "save_coo", "load_coo"]


class SparseMatrixError(ValueError):
    """Malformed sparse matrix data or file."""


class _ApplyPlan:
    """Precomputed grouping of entries by output row for vectorized apply."""

    __slots__ = ("src", "weights", "group_starts", "out_rows")

    def __init__(self, out_idx: np.ndarray, src_idx: np.ndarray, values: np.ndarray):
        order = np.argsort(out_idx, kind="stable")
        sorted_out = out_idx[order]
        self.src = src_idx[order]
        self.weights = values[order]
        self.out_rows, self.group_starts = np.unique(sorted_out, return_index=True)


class SparseMatrix:
    """Sparse matrix in coordinate form with unique (row, col) entries."""

    def __init__(self, rows: int, cols: int, row_idx, col_idx, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_idx = np.ascontiguousarray(np.asarray(row_idx, dtype=np.int64))
        self.col_idx = np.ascontiguousarray(np.asarray(col_idx, dtype=np.int64))
        self.values = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if not (self.row_idx.shape == self.col_idx.shape == self.values.shape):
            raise SparseMatrixError("row, col, and value arrays must have equal length")
        if self.row_idx.ndim != 1:
            raise SparseMatrixError("entry arrays must be one-dimensional")
        if self.nnz:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.rows:
                raise SparseMatrixError("row index out of range")
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise SparseMatrixError("column index out of range")
            keys = self.row_idx * self.cols + self.col_idx
            if np.unique(keys).size != keys.size:
                raise SparseMatrixError("duplicate (row, col) entry")
        self._forward_plan: _ApplyPlan | None = None
        self._transpose_plan: _ApplyPlan | None = None
        for arr in (self.row_idx, self.col_idx, self.values):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, idx, idx, np.ones(n))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.rows, self.cols))
        dense[self.row_idx, self.col_idx] = self.values
        return dense

    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(r), int(c), float(v))
                for r, c, v in zip(self.row_idx, self.col_idx, self.values)]

    def _plan(self, transpose: bool) -> _ApplyPlan:
        if transpose:
            if self._transpose_plan is None:
                self._transpose_plan = _ApplyPlan(self.col_idx, self.row_idx, self.values)
            return self._transpose_plan
        if self._forward_plan is None:
            self._forward_plan = _ApplyPlan(self.row_idx, self.col_idx, self.values)
        return self._forward_plan

    def _apply(self, x: np.ndarray, transpose: bool) -> np.ndarray:
        n_in, n_out = (self.rows, self.cols) if transpose else (self.cols, self.rows)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise SparseMatrixError(f"input must be 2-D, got shape {x.shape}")
        if x.shape[0] % n_in != 0:
            raise SparseMatrixError(
                f"input row count {x.shape[0]} is not a multiple of {n_in}")
        batch = x.shape[0] // n_in
        width = x.shape[1]
        plan = self._plan(transpose)
        x3 = x.reshape(batch, n_in, width)
        out = np.zeros((batch, n_out, width))
        if plan.src.size:
            contrib = x3[:, plan.src, :] * plan.weights[None, :, None]
            sums = np.add.reduceat(contrib, plan.group_starts, axis=1)
            out[:, plan.out_rows, :] = sums
        return out.reshape(batch * n_out, width)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """S @ x, where x stacks one or more blocks of ``cols`` rows."""
        return self._apply(x, transpose=False)

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        """S.T @ y, where y stacks one or more blocks of ``rows`` rows."""
        return self._apply(y, transpose=True)

    def __repr__(self) -> str:
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def save_coo(matrix: SparseMatrix, path) -> None:
    """Write `coo <rows> <cols> <nnz>` plus one `row col value` line each."""
    lines = [f"coo {matrix.rows} {matrix.cols} {matrix.nnz}"]
    for r, c, v in zip(matrix.row_idx, matrix.col_idx, matrix.values):
        lines.append(f"{int(r)} {int(c)} {float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_coo(path) -> SparseMatrix:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SparseMatrixError(f"{path}:1: empty sparse matrix file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "coo":
        raise SparseMatrixError(f"{path}:1: expected 'coo <rows> <cols> <nnz>'")
    try:
        rows, cols, nnz = int(head[1]), int(head[2]), int(head[3])
    except ValueError as exc:
        raise SparseMatrixError(f"{path}:1: bad header field ({exc})") from exc
    if len(lines) - 1 != nnz:
        raise SparseMatrixError(f"{path}: expected {nnz} entries, found {len(lines) - 1}")
    ri = np.empty(nnz, dtype=np.int64)
    ci = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    for k in range(nnz):
        parts = lines[1 + k].split()
        if len(parts) != 3:
            raise SparseMatrixError(f"{path}:{k + 2}: expected 'row col value'")
        try:
            ri[k], ci[k], vals[k] = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise SparseMatrixError(f"{path}:{k + 2}: bad entry ({exc})") from exc
    return SparseMatrix(rows, cols, ri, ci, vals)
