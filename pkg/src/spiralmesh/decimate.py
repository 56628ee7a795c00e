"""Quadric-error-metric edge contraction and pooling transform matrices.

Each level pairs a coarse mesh with a binary downsampling selector and a
barycentric upsampling matrix. Contractions use the classic accumulated
plane-quadric cost with a link-condition and fold-over guard; surviving
vertices keep the smaller original index so every coarse vertex maps
back to an input vertex.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, save_mesh, load_mesh
from .sparse import SparseMatrix, save_coo, load_coo

__all__ = [
    "Quadric",
    "DecimationLevel",
    "DecimationError",
    "vertex_quadrics",
    "edge_collapse_cost",
    "decimate",
    "up_transform",
    "build_hierarchy",
    "save_hierarchy",
    "load_hierarchy",
    "closest_point_on_triangles",
]

log = logging.getLogger(__name__)

_CONDITION_LIMIT = 1e12
_BOUNDARY_WEIGHT = 1000.0


class DecimationError(ValueError):
    """Decimation could not reach the requested vertex count."""

    def __init__(self, message: str, achieved: int | None = None):
        super().__init__(message)
        self.achieved = achieved


class Quadric:
    """Symmetric 4x4 form accumulating squared point-to-plane distances."""

    __slots__ = ("m",)

    def __init__(self, m: np.ndarray | None = None):
        self.m = np.zeros((4, 4)) if m is None else np.asarray(m, dtype=np.float64)

    @classmethod
    def from_plane(cls, normal, offset: float, weight: float = 1.0) -> "Quadric":
        """Quadric of the plane n.x + offset = 0 with |n| = 1."""
        p = np.array([normal[0], normal[1], normal[2], offset])
        return cls(weight * np.outer(p, p))

    def __add__(self, other: "Quadric") -> "Quadric":
        return Quadric(self.m + other.m)

    def error(self, point) -> float:
        h = np.array([point[0], point[1], point[2], 1.0])
        return float(h @ self.m @ h)


def _solve3_with_pivots(a: np.ndarray, rhs: np.ndarray):
    """Gaussian elimination with partial pivoting on a 3x3 system.

    Returns (solution or None, |diagonal pivots|).
    """
    m = np.concatenate([a.astype(np.float64), rhs.reshape(3, 1)], axis=1)
    pivots = []
    for k in range(3):
        j = k + int(np.argmax(np.abs(m[k:, k])))
        if j != k:
            m[[k, j]] = m[[j, k]]
        p = m[k, k]
        pivots.append(abs(float(p)))
        if p == 0.0:
            return None, pivots
        m[k + 1:] -= (m[k + 1:, k:k + 1] / p) * m[k:k + 1]
    x = np.empty(3)
    for k in (2, 1, 0):
        x[k] = (m[k, 3] - m[k, k + 1:3] @ x[k + 1:]) / m[k, k]
    return x, pivots


def edge_collapse_cost(qsum: Quadric, a, b) -> tuple[float, np.ndarray]:
    """Cost and placement for contracting an edge with accumulated quadric.

    Solves the 3x3 normal system when its pivot-based condition estimate
    stays below 1e12; otherwise picks the best of the endpoints and the
    midpoint. The returned cost is clamped at zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sys_a = qsum.m[:3, :3]
    rhs = -qsum.m[:3, 3]
    x, pivots = _solve3_with_pivots(sys_a, rhs)
    pos = None
    if x is not None:
        lo, hi = min(pivots), max(pivots)
        if lo > 0.0 and hi / lo < _CONDITION_LIMIT:
            pos = x
    if pos is None:
        candidates = [a, b, 0.5 * (a + b)]
        errors = [qsum.error(c) for c in candidates]
        pos = candidates[int(np.argmin(errors))]
    return max(qsum.error(pos), 0.0), np.asarray(pos)


def vertex_quadrics(mesh: TriangleMesh) -> list[Quadric]:
    """Per-vertex sums of incident face plane quadrics.

    Zero-area faces are skipped (logged with a count). Boundary edges add
    a perpendicular penalty plane, weighted heavily, to both endpoints.
    """
    n = mesh.vertex_count
    acc = np.zeros((n, 4, 4))
    pos = mesh.positions
    skipped = 0
    unit_normals = {}
    for fid, (ia, ib, ic) in enumerate(mesh.faces):
        ia, ib, ic = int(ia), int(ib), int(ic)
        normal = np.cross(pos[ib] - pos[ia], pos[ic] - pos[ia])
        norm = float(np.linalg.norm(normal))
        if norm <= 1e-12:
            skipped += 1
            continue
        normal = normal / norm
        unit_normals[fid] = normal
        p = np.array([normal[0], normal[1], normal[2], -float(normal @ pos[ia])])
        k = np.outer(p, p)
        acc[ia] += k
        acc[ib] += k
        acc[ic] += k
    if skipped:
        log.warning("vertex_quadrics skipped %d zero-area faces", skipped)
    for (u, v), fids in mesh.edge_faces.items():
        if len(fids) != 1 or fids[0] not in unit_normals:
            continue
        edge = pos[v] - pos[u]
        edge_len = float(np.linalg.norm(edge))
        if edge_len <= 1e-12:
            continue
        perp = np.cross(edge / edge_len, unit_normals[fids[0]])
        norm = float(np.linalg.norm(perp))
        if norm <= 1e-12:
            continue
        perp /= norm
        pen = Quadric.from_plane(perp, -float(perp @ pos[u]), _BOUNDARY_WEIGHT)
        acc[u] += pen.m
        acc[v] += pen.m
    return [Quadric(acc[i]) for i in range(n)]


@dataclass
class DecimationLevel:
    """Coarse mesh plus the transforms of one pooling step.

    ``down`` (coarse x fine) selects kept vertices; ``up`` (fine x coarse)
    rebuilds removed vertices as convex combinations of a coarse
    triangle's corners; ``kept`` maps each coarse vertex to its original
    fine index.
    """

    coarse: TriangleMesh
    down: SparseMatrix
    up: SparseMatrix
    kept: np.ndarray
    factor: float
    popped_costs: np.ndarray | None = None


def decimate(mesh: TriangleMesh, factor: float, track_costs: bool = False) -> DecimationLevel:
    """Contract minimum-cost valid edges until ceil(n / factor) vertices remain."""
    if factor <= 1.0:
        raise ValueError("downsampling factor must exceed 1")
    n = mesh.vertex_count
    target = math.ceil(n / factor)
    if target < 4:
        raise ValueError(f"target vertex count {target} below minimum 4")

    positions = mesh.positions.copy()
    quadrics = vertex_quadrics(mesh)
    alive = [True] * n
    version = [0] * n
    nbrs: list[set[int]] = [set(int(x) for x in mesh.adjacency[v]) for v in range(n)]
    faces: dict[int, list[int]] = {fid: [int(x) for x in f] for fid, f in enumerate(mesh.faces)}
    vfaces: list[set[int]] = [set() for _ in range(n)]
    for fid, f in faces.items():
        for x in f:
            vfaces[x].add(fid)

    heap: list[tuple[float, int, int, int, int, tuple[float, float, float]]] = []

    def push(u: int, w: int) -> None:
        u, w = (u, w) if u < w else (w, u)
        cost, pos = edge_collapse_cost(quadrics[u] + quadrics[w], positions[u], positions[w])
        heapq.heappush(heap, (cost, u, w, version[u], version[w], tuple(pos)))

    for u in range(n):
        for w in nbrs[u]:
            if u < w:
                push(u, w)

    popped: list[float] = []
    alive_count = n
    while alive_count > target:
        if not heap:
            raise DecimationError(
                f"no valid contraction remains at {alive_count} vertices (target {target})",
                achieved=alive_count)
        cost, a, b, va, vb, pos_t = heapq.heappop(heap)
        if not alive[a] or not alive[b] or version[a] != va or version[b] != vb:
            continue
        if b not in nbrs[a]:
            continue
        shared = vfaces[a] & vfaces[b]
        if not _link_condition_ok(a, b, nbrs, faces, shared):
            continue
        new_pos = np.array(pos_t)
        if not _no_fold_over(a, b, new_pos, positions, faces, vfaces, shared):
            continue
        popped.append(cost)
        _contract(a, b, new_pos, positions, quadrics, alive, version, nbrs, faces, vfaces, shared)
        alive_count -= 1
        for w in sorted(nbrs[a]):
            push(a, w)

    kept = np.array([v for v in range(n) if alive[v]], dtype=np.int64)
    new_index = {int(orig): i for i, orig in enumerate(kept)}
    coarse_faces = [[new_index[x] for x in faces[fid]] for fid in sorted(faces)]
    coarse = TriangleMesh(positions[kept], coarse_faces)
    m = kept.shape[0]
    down = SparseMatrix(m, n, np.arange(m, dtype=np.int64), kept, np.ones(m))
    up = up_transform(mesh, coarse, kept)
    return DecimationLevel(
        coarse=coarse, down=down, up=up, kept=kept, factor=float(factor),
        popped_costs=np.array(popped) if track_costs else None)


def _link_condition_ok(a: int, b: int, nbrs, faces, shared: set[int]) -> bool:
    """Common neighbors of (a, b) must all be apexes of shared faces."""
    if len(shared) > 2:
        return False
    apexes = set()
    for fid in shared:
        for x in faces[fid]:
            if x != a and x != b:
                apexes.add(x)
    return (nbrs[a] & nbrs[b]) == apexes


def _no_fold_over(a: int, b: int, new_pos, positions, faces, vfaces, shared: set[int]) -> bool:
    """Reject contractions that rotate any surviving face normal past 90 degrees."""
    for fid in (vfaces[a] | vfaces[b]) - shared:
        verts = faces[fid]
        old = [positions[x] for x in verts]
        new = [new_pos if (x == a or x == b) else positions[x] for x in verts]
        n_old = np.cross(old[1] - old[0], old[2] - old[0])
        n_new = np.cross(new[1] - new[0], new[2] - new[0])
        if float(np.linalg.norm(n_new)) <= 1e-14:
            return False
        if float(n_old @ n_new) < 0.0:
            return False
    return True


def _contract(a: int, b: int, new_pos, positions, quadrics, alive, version,
              nbrs, faces, vfaces, shared: set[int]) -> None:
    """Merge b into a at new_pos, updating connectivity in place."""
    positions[a] = new_pos
    quadrics[a] = quadrics[a] + quadrics[b]
    for fid in shared:
        for x in faces[fid]:
            vfaces[x].discard(fid)
        del faces[fid]
    for fid in list(vfaces[b]):
        f = faces[fid]
        faces[fid] = [a if x == b else x for x in f]
        vfaces[b].discard(fid)
        vfaces[a].add(fid)
    affected = (nbrs[a] | nbrs[b] | {a}) - {b}
    for x in affected:
        rebuilt: set[int] = set()
        for fid in vfaces[x]:
            for y in faces[fid]:
                if y != x:
                    rebuilt.add(y)
        nbrs[x] = rebuilt
    nbrs[b] = set()
    vfaces[b] = set()
    alive[b] = False
    version[a] += 1
    version[b] += 1


def closest_point_on_triangles(point, corners: np.ndarray):
    """Closest points from ``point`` to each triangle in ``corners`` (T,3,3).

    Returns (squared distances (T,), barycentric coordinates (T,3)).
    """
    p = np.asarray(point, dtype=np.float64)
    a = corners[:, 0, :]
    b = corners[:, 1, :]
    c = corners[:, 2, :]
    ab = b - a
    ac = c - a
    ap = p[None, :] - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p[None, :] - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p[None, :] - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    t = corners.shape[0]
    bary = np.zeros((t, 3))
    done = np.zeros(t, dtype=bool)

    def settle(mask, u, v, w):
        use = mask & ~done
        bary[use, 0] = u[use] if isinstance(u, np.ndarray) else u
        bary[use, 1] = v[use] if isinstance(v, np.ndarray) else v
        bary[use, 2] = w[use] if isinstance(w, np.ndarray) else w
        done[use] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        settle((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        settle((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        settle((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        v_ab = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0.5)
        settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0)
        w_ac = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0.5)
        settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac)
        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0, (d4 - d3) / np.where(denom_bc != 0, denom_bc, 1.0), 0.5)
        settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w_bc, w_bc)
        total = va + vb + vc
        safe = np.where(total != 0, total, 1.0)
        v_in = vb / safe
        w_in = vc / safe
        settle(np.ones(t, dtype=bool), 1.0 - v_in - w_in, v_in, w_in)

    np.clip(bary, 0.0, 1.0, out=bary)
    sums = bary.sum(axis=1)
    sums[sums == 0] = 1.0
    bary /= sums[:, None]
    closest = (bary[:, :, None] * corners).sum(axis=1)
    diff = closest - p[None, :]
    return np.einsum("ij,ij->i", diff, diff), bary


def up_transform(fine: TriangleMesh, coarse: TriangleMesh, kept: np.ndarray) -> SparseMatrix:
    """Barycentric upsampling matrix (fine_count x coarse_count).

    Kept fine vertices get a single unit entry on their coarse image;
    removed ones project onto the nearest point of the coarse surface and
    store the barycentric coordinates of that point's triangle.
    """
    if coarse.face_count == 0:
        raise DecimationError("coarse mesh has no faces; cannot build upsampling transform")
    n = fine.vertex_count
    m = coarse.vertex_count
    coarse_of = {int(orig): i for i, orig in enumerate(kept)}
    corners = coarse.positions[coarse.faces]
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for v in range(n):
        if v in coarse_of:
            rows.append(v)
            cols.append(coarse_of[v])
            vals.append(1.0)
            continue
        dist2, bary = closest_point_on_triangles(fine.positions[v], corners)
        t = int(np.argmin(dist2))
        face = coarse.faces[t]
        weights = bary[t] / bary[t].sum()
        for k in range(3):
            if weights[k] > 0.0:
                rows.append(v)
                cols.append(int(face[k]))
                vals.append(float(weights[k]))
    return SparseMatrix(n, m, np.array(rows), np.array(cols), np.array(vals))


def build_hierarchy(mesh: TriangleMesh, factors, track_costs: bool = False) -> list[DecimationLevel]:
    """Chain of decimation levels; level i coarsens level i-1's mesh."""
    factors = list(factors)
    if not factors:
        raise ValueError("factors must be a nonempty list")
    levels = []
    current = mesh
    for f in factors:
        level = decimate(current, f, track_costs=track_costs)
        levels.append(level)
        current = level.coarse
    return levels


def save_hierarchy(levels: list[DecimationLevel], out_dir) -> Path:
    """Write per-level mesh/down/up files plus a JSON manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, level in enumerate(levels):
        mesh_name = f"level{i}_mesh.off"
        down_name = f"level{i}_down.coo"
        up_name = f"level{i}_up.coo"
        save_mesh(level.coarse, out_dir / mesh_name, "off")
        save_coo(level.down, out_dir / down_name)
        save_coo(level.up, out_dir / up_name)
        entries.append({"mesh": mesh_name, "down": down_name, "up": up_name,
                        "factor": level.factor})
    manifest = out_dir / "hierarchy.json"
    manifest.write_text(json.dumps({"levels": entries}, indent=2) + "\n")
    return manifest


def load_hierarchy(manifest_path) -> list[DecimationLevel]:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    levels = []
    for entry in doc["levels"]:
        coarse = load_mesh(manifest_path.parent / entry["mesh"], "off")
        down = load_coo(manifest_path.parent / entry["down"])
        up = load_coo(manifest_path.parent / entry["up"])
        kept = down.col_idx[np.argsort(down.row_idx)]
        levels.append(DecimationLevel(coarse=coarse, down=down, up=up,
                                      kept=kept.copy(), factor=float(entry["factor"])))
    return levels
