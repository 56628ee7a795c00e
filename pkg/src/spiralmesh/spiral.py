"""Spiral serialization of mesh neighborhoods, with optional dilation.

Every vertex gets a fixed-length ordered sequence: the vertex itself,
its one-ring walked counter-clockwise from the smallest-index neighbor,
then each further ring continuing the same rotation. Sequences are
deterministic functions of topology alone, so a table is computed once
per mesh and persisted.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, one_ring_ordered

__all__ = [
    "SENTINEL",
    "SpiralTable",
    "SpiralTableError",
    "StaleSpiralTableError",
    "build_spiral",
    "build_spiral_table",
    "save_spiral_table",
    "load_spiral_table",
    "topology_digest",
]

SENTINEL = -1


class SpiralTableError(ValueError):
    """Malformed spiral table file."""


class StaleSpiralTableError(SpiralTableError):
    """Table was computed for a different face list than the given mesh."""


@dataclass(frozen=True)
class SpiralTable:
    """Per-vertex spiral sequences with sentinel -1 for exhausted slots.

    ``indices`` is a (vertex_count, length) int64 array; ``dilation`` is
    the sampling stride used to build it (1 = plain); ``topology_hash``
    digests the face list the table was computed from.
    """

    indices: np.ndarray
    length: int
    dilation: int
    topology_hash: str

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.indices, dtype=np.int64))
        if idx.ndim != 2 or idx.shape[1] != self.length:
            raise ValueError(f"indices must be (n, {self.length}), got {idx.shape}")
        object.__setattr__(self, "indices", idx)
        idx.setflags(write=False)

    @property
    def vertex_count(self) -> int:
        return int(self.indices.shape[0])


def topology_digest(faces: np.ndarray) -> str:
    """Stable 64-bit digest of the flattened face index list (hex).

    BLAKE2b with an 8-byte digest over the row-major little-endian int64
    bytes of the face array; platform independent.
    """
    data = np.ascontiguousarray(np.asarray(faces, dtype="<i8")).tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def build_spiral(mesh: TriangleMesh, v: int, length: int) -> list[int]:
    """Spiral sequence of exactly ``length`` entries centered at ``v``.

    Entry 0 is ``v``; the one-ring follows counter-clockwise from the
    smallest-index neighbor; each later ring starts at the first
    unvisited neighbor (counter-clockwise) of the previous ring's first
    vertex and keeps rotating the same way. Slots past the connected
    component are filled with :data:`SENTINEL`.
    """
    if length < 1:
        raise ValueError("spiral length must be at least 1")
    out = [v]
    if length == 1:
        return out
    visited = {v}
    ring = one_ring_ordered(mesh, v)
    if ring:
        lo = ring.index(min(ring))
        ring = ring[lo:] + ring[:lo]
    anchor = v  # previous ring's first vertex, adjacent to the current one
    while ring and len(out) < length:
        out.extend(ring)
        visited.update(ring)
        ring, anchor = _next_ring(mesh, ring, anchor, visited), ring[0]
    if len(out) < length:
        out.extend([SENTINEL] * (length - len(out)))
    return out[:length]


def _next_ring(mesh: TriangleMesh, ring: list[int], first_anchor: int,
               visited: set[int]) -> list[int]:
    """Order the next BFS ring by continuing the spiral rotation.

    Walks the current ring in spiral order and collects each member's
    unvisited neighbors counter-clockwise, starting the scan just after
    the member's predecessor in the spiral.
    """
    order: list[int] = []
    in_order: set[int] = set()
    for i, u in enumerate(ring):
        cyc = one_ring_ordered(mesh, u)
        if not cyc:
            continue
        anchor = first_anchor if i == 0 else ring[i - 1]
        if anchor not in cyc:
            seen = [w for w in cyc if w in visited]
            anchor = min(seen) if seen else cyc[0]
        k = cyc.index(anchor)
        m = len(cyc)
        for j in range(1, m + 1):
            w = cyc[(k + j) % m]
            if w not in visited and w not in in_order:
                order.append(w)
                in_order.add(w)
    return order


def build_spiral_table(mesh: TriangleMesh, length: int, dilation: int = 1,
                       threads: int = 1) -> SpiralTable:
    """Spiral table for every vertex; dilation samples a longer spiral.

    For ``dilation=d > 1`` row ``v`` takes entries 0, d, 2d, ... of the
    length ``length*d`` plain spiral, so the receptive field grows while
    the row stays ``length`` wide. Sentinels propagate through sampling.
    Rows are independent, so the result is identical for any ``threads``.
    """
    if length < 1:
        raise ValueError("spiral length must be at least 1")
    if dilation < 1:
        raise ValueError("dilation must be at least 1")
    n = mesh.vertex_count
    rows = np.full((n, length), SENTINEL, dtype=np.int64)

    def fill(v: int) -> None:
        s = build_spiral(mesh, v, length * dilation)
        rows[v] = s[::dilation]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(n)))
    else:
        for v in range(n):
            fill(v)
    return SpiralTable(rows, length, dilation, topology_digest(mesh.faces))


def save_spiral_table(table: SpiralTable, path) -> None:
    """Write the table in the bit-exact text format."""
    lines = [f"spiral {table.vertex_count} {table.length} {table.dilation} {table.topology_hash}"]
    for row in table.indices:
        lines.append(" ".join(str(int(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_spiral_table(path, mesh: TriangleMesh | None = None) -> SpiralTable:
    """Read a table; with ``mesh`` given, reject stale topology hashes."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SpiralTableError(f"{path}:1: empty spiral table file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "spiral":
        raise SpiralTableError(f"{path}:1: expected 'spiral <n> <length> <dilation> <hash>'")
    try:
        n, length, dilation = int(head[1]), int(head[2]), int(head[3])
    except ValueError as exc:
        raise SpiralTableError(f"{path}:1: bad header field ({exc})") from exc
    digest = head[4]
    if len(lines) - 1 != n:
        raise SpiralTableError(f"{path}: expected {n} rows, found {len(lines) - 1}")
    rows = np.empty((n, length), dtype=np.int64)
    for i in range(n):
        parts = lines[1 + i].split()
        if len(parts) != length:
            raise SpiralTableError(f"{path}:{i + 2}: expected {length} entries, found {len(parts)}")
        try:
            rows[i] = [int(p) for p in parts]
        except ValueError as exc:
            raise SpiralTableError(f"{path}:{i + 2}: bad index ({exc})") from exc
    if mesh is not None:
        actual = topology_digest(mesh.faces)
        if actual != digest:
            raise StaleSpiralTableError(
                f"{path}: table hash {digest} does not match mesh face list ({actual})")
    return SpiralTable(rows, length, dilation, digest)
