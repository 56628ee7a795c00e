"""Triangle meshes: loading, validation, adjacency and distance queries.

Positions are kept in double precision. A mesh is immutable after
construction, so all queries are pure and safe to run concurrently.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "NonManifoldError",
    "TriangleMesh",
    "ValidationReport",
    "load_mesh",
    "save_mesh",
    "one_ring_ordered",
    "k_ring",
    "geodesic_distances",
    "validate",
    "diameter_estimate",
    "face_normals",
    "vertex_normals",
]

_ZERO_AREA_EPS = 1e-12


class MeshError(ValueError):
    """Malformed mesh data or mesh file."""


class NonManifoldError(MeshError):
    """The faces around a vertex do not form a single fan or cycle."""

    def __init__(self, vertex: int, detail: str = ""):
        self.vertex = int(vertex)
        msg = f"non-manifold umbrella at vertex {self.vertex}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class TriangleMesh:
    """Vertex positions plus consistently indexed triangle faces.

    Adjacency is derived from the face list once, deduplicated, and
    symmetric by construction. Faces with a repeated vertex index are
    rejected outright; duplicate faces and zero-area faces are accepted
    (decimation intermediates can produce them) and reported by
    :func:`validate`.
    """

    __slots__ = ("positions", "faces", "vertex_count", "face_count",
                 "adjacency", "_vertex_faces", "_one_rings", "_edge_faces")

    def __init__(self, positions, faces):
        pos = np.ascontiguousarray(np.asarray(positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise MeshError(f"positions must have shape (n, 3), got {pos.shape}")
        if pos.shape[0] == 0:
            raise MeshError("mesh has no vertices")
        fcs = np.asarray(faces, dtype=np.int64)
        if fcs.size == 0:
            fcs = np.zeros((0, 3), dtype=np.int64)
        if fcs.ndim != 2 or fcs.shape[1] != 3:
            raise MeshError(f"faces must have shape (m, 3), got {fcs.shape}")
        if fcs.shape[0]:
            out = (fcs < 0) | (fcs >= pos.shape[0])
            if out.any():
                row = int(np.argwhere(out.any(axis=1))[0, 0])
                raise MeshError(f"face {row} references vertex outside [0, {pos.shape[0]})")
            same = (fcs[:, 0] == fcs[:, 1]) | (fcs[:, 1] == fcs[:, 2]) | (fcs[:, 0] == fcs[:, 2])
            if same.any():
                raise MeshError(f"face {int(np.argmax(same))} repeats a vertex index")
        self.positions = pos
        self.faces = np.ascontiguousarray(fcs)
        self.vertex_count = int(pos.shape[0])
        self.face_count = int(fcs.shape[0])
        self.adjacency = self._build_adjacency()
        self._vertex_faces: list[list[int]] | None = None
        self._one_rings: dict[int, tuple[int, ...]] = {}
        self._edge_faces: dict[tuple[int, int], list[int]] | None = None
        self.positions.setflags(write=False)
        self.faces.setflags(write=False)

    def _build_adjacency(self) -> list[np.ndarray]:
        nbrs: list[set[int]] = [set() for _ in range(self.vertex_count)]
        for a, b, c in self.faces:
            a, b, c = int(a), int(b), int(c)
            nbrs[a].add(b); nbrs[a].add(c)
            nbrs[b].add(a); nbrs[b].add(c)
            nbrs[c].add(a); nbrs[c].add(b)
        return [np.array(sorted(s), dtype=np.int64) for s in nbrs]

    @property
    def vertex_faces(self) -> list[list[int]]:
        """Face indices incident to each vertex, in face-list order."""
        if self._vertex_faces is None:
            vf: list[list[int]] = [[] for _ in range(self.vertex_count)]
            for fid, (a, b, c) in enumerate(self.faces):
                vf[int(a)].append(fid)
                vf[int(b)].append(fid)
                vf[int(c)].append(fid)
            self._vertex_faces = vf
        return self._vertex_faces

    @property
    def edge_faces(self) -> dict[tuple[int, int], list[int]]:
        """Map from undirected edge (min, max) to incident face indices."""
        if self._edge_faces is None:
            ef: dict[tuple[int, int], list[int]] = {}
            for fid, (a, b, c) in enumerate(self.faces):
                for u, v in ((int(a), int(b)), (int(b), int(c)), (int(c), int(a))):
                    key = (u, v) if u < v else (v, u)
                    ef.setdefault(key, []).append(fid)
            self._edge_faces = ef
        return self._edge_faces

    def __repr__(self) -> str:
        return f"TriangleMesh({self.vertex_count} vertices, {self.face_count} faces)"


@dataclass
class ValidationReport:
    """Structural findings for a mesh; validation reports, it never raises."""

    is_edge_manifold: bool
    boundary_edge_count: int
    non_manifold_edges: list[tuple[int, int]]
    inconsistent_winding_pairs: list[tuple[int, int]]
    connected_components: int
    duplicate_face_count: int = 0
    zero_area_face_count: int = 0


def load_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Load an OBJ or OFF mesh file.

    ``fmt`` is "obj" or "off"; when omitted it is inferred from the file
    suffix. Parse failures report the offending 1-based line number.
    """
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    fmt = fmt.lower()
    if fmt not in ("obj", "off"):
        raise MeshError(f"unsupported mesh format {fmt!r} for {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    if fmt == "obj":
        return _parse_obj(text, str(path))
    return _parse_off(text, str(path))


def _parse_obj(text: str, name: str) -> TriangleMesh:
    positions: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"{name}:{lineno}: vertex line needs 3 coordinates")
            try:
                positions.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise MeshError(f"{name}:{lineno}: bad vertex coordinate ({exc})") from exc
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshError(f"{name}:{lineno}: only triangular faces are supported")
            idx = []
            for tok in parts[1:]:
                head = tok.split("/", 1)[0]
                try:
                    idx.append(int(head))
                except ValueError as exc:
                    raise MeshError(f"{name}:{lineno}: bad face index {head!r}") from exc
            faces.append((idx[0] - 1, idx[1] - 1, idx[2] - 1))
            face_lines.append(lineno)
        # all other record types (vn, vt, o, g, ...) are ignored
    if not positions:
        raise MeshError(f"{name}: no vertices found")
    for (a, b, c), lineno in zip(faces, face_lines):
        for i in (a, b, c):
            if i < 0 or i >= len(positions):
                raise MeshError(f"{name}:{lineno}: face index {i + 1} out of range 1..{len(positions)}")
    return TriangleMesh(positions, faces)


def _parse_off(text: str, name: str) -> TriangleMesh:
    lines = text.splitlines()
    # meaningful lines with their original numbers
    items = [(i + 1, ln.strip()) for i, ln in enumerate(lines)
             if ln.strip() and not ln.strip().startswith("#")]
    if not items:
        raise MeshError(f"{name}: empty OFF file")
    pos = 0
    lineno, header = items[pos]
    if header != "OFF":
        raise MeshError(f"{name}:{lineno}: expected OFF header, got {header!r}")
    pos += 1
    if pos >= len(items):
        raise MeshError(f"{name}: missing counts line")
    lineno, counts = items[pos]
    parts = counts.split()
    if len(parts) < 2:
        raise MeshError(f"{name}:{lineno}: counts line needs vertex and face counts")
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise MeshError(f"{name}:{lineno}: bad counts line ({exc})") from exc
    if nv == 0:
        raise MeshError(f"{name}:{lineno}: mesh has no vertices")
    pos += 1
    if len(items) - pos < nv + nf:
        raise MeshError(f"{name}: expected {nv} vertex and {nf} face lines, found {len(items) - pos}")
    positions = []
    for k in range(nv):
        lineno, ln = items[pos + k]
        parts = ln.split()
        if len(parts) < 3:
            raise MeshError(f"{name}:{lineno}: vertex line needs 3 coordinates")
        try:
            positions.append((float(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise MeshError(f"{name}:{lineno}: bad vertex coordinate ({exc})") from exc
    pos += nv
    faces = []
    for k in range(nf):
        lineno, ln = items[pos + k]
        parts = ln.split()
        if not parts or parts[0] != "3" or len(parts) < 4:
            raise MeshError(f"{name}:{lineno}: face line must start with 3 followed by three indices")
        try:
            a, b, c = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise MeshError(f"{name}:{lineno}: bad face index ({exc})") from exc
        for i in (a, b, c):
            if i < 0 or i >= nv:
                raise MeshError(f"{name}:{lineno}: face index {i} out of range 0..{nv - 1}")
        faces.append((a, b, c))
    return TriangleMesh(positions, faces)


def save_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    """Write a mesh as OBJ or OFF text (format inferred from suffix)."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    fmt = fmt.lower()
    lines: list[str] = []
    if fmt == "off":
        lines.append("OFF")
        lines.append(f"{mesh.vertex_count} {mesh.face_count} 0")
        for p in mesh.positions:
            lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
        for a, b, c in mesh.faces:
            lines.append(f"3 {a} {b} {c}")
    elif fmt == "obj":
        for p in mesh.positions:
            lines.append(f"v {p[0]!r} {p[1]!r} {p[2]!r}")
        for a, b, c in mesh.faces:
            lines.append(f"f {a + 1} {b + 1} {c + 1}")
    else:
        raise MeshError(f"unsupported mesh format {fmt!r} for {path}")
    path.write_text("\n".join(lines) + "\n")


def one_ring_ordered(mesh: TriangleMesh, v: int) -> list[int]:
    """Neighbors of ``v`` in the cyclic order induced by face winding.

    For interior vertices the result is a cycle (starting at the
    smallest-index neighbor); for boundary vertices it is the open fan
    from one boundary edge to the other. Raises :class:`NonManifoldError`
    when the umbrella at ``v`` is not a single fan or cycle.
    """
    if v < 0 or v >= mesh.vertex_count:
        raise MeshError(f"vertex {v} out of range")
    cached = mesh._one_rings.get(v)
    if cached is not None:
        return list(cached)
    succ: dict[int, int] = {}
    for fid in mesh.vertex_faces[v]:
        a, b, c = (int(x) for x in mesh.faces[fid])
        if a == v:
            u, w = b, c
        elif b == v:
            u, w = c, a
        else:
            u, w = a, b
        if u in succ:
            raise NonManifoldError(v, f"edge ({v}, {u}) shared by more than two faces or inconsistently wound")
        succ[u] = w
    neighbors = set(int(x) for x in mesh.adjacency[v])
    if not succ:
        if neighbors:
            raise NonManifoldError(v, "vertex has neighbors but no incident faces")
        return []
    targets = set(succ.values())
    starts = [u for u in succ if u not in targets]
    if len(starts) > 1:
        raise NonManifoldError(v, "umbrella splits into multiple fans")
    if starts:
        cur = starts[0]
    else:
        cur = min(succ)  # closed cycle: deterministic start
    ring = [cur]
    seen = {cur}
    while cur in succ:
        cur = succ[cur]
        if cur in seen:
            if starts or cur != ring[0]:
                raise NonManifoldError(v, "umbrella walk revisits a neighbor")
            break  # closed the cycle
        ring.append(cur)
        seen.add(cur)
    if set(ring) != neighbors:
        raise NonManifoldError(v, "umbrella does not cover all neighbors")
    if not starts and len(ring) != len(succ):
        raise NonManifoldError(v, "umbrella splits into multiple cycles")
    mesh._one_rings[v] = tuple(ring)
    return ring


def k_ring(mesh: TriangleMesh, v: int, k: int) -> set[int]:
    """Vertices at exactly graph distance ``k`` from ``v`` (BFS layer k)."""
    if v < 0 or v >= mesh.vertex_count:
        raise MeshError(f"vertex {v} out of range")
    if k < 0:
        raise ValueError("k must be non-negative")
    frontier = {v}
    seen = {v}
    for _ in range(k):
        nxt: set[int] = set()
        for u in frontier:
            for w in mesh.adjacency[u]:
                w = int(w)
                if w not in seen:
                    nxt.add(w)
        seen |= nxt
        frontier = nxt
        if not frontier:
            return set()
    return frontier


def geodesic_distances(mesh: TriangleMesh, source: int) -> np.ndarray:
    """Single-source shortest paths over the edge graph (Euclidean lengths).

    Unreachable vertices get ``inf``.
    """
    if source < 0 or source >= mesh.vertex_count:
        raise MeshError(f"vertex {source} out of range")
    dist = np.full(mesh.vertex_count, np.inf)
    dist[source] = 0.0
    pos = mesh.positions
    heap: list[tuple[float, int]] = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        pu = pos[u]
        for w in mesh.adjacency[u]:
            w = int(w)
            nd = d + float(np.linalg.norm(pos[w] - pu))
            if nd < dist[w]:
                dist[w] = nd
                heapq.heappush(heap, (nd, w))
    return dist


def face_normals(mesh: TriangleMesh, normalize: bool = True) -> np.ndarray:
    """Per-face normals; zero-area faces yield the zero vector."""
    p = mesh.positions
    f = mesh.faces
    if f.shape[0] == 0:
        return np.zeros((0, 3))
    n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    if normalize:
        norms = np.linalg.norm(n, axis=1)
        ok = norms > _ZERO_AREA_EPS
        n[ok] /= norms[ok, None]
        n[~ok] = 0.0
    return n


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals (normalized; zero where undefined)."""
    p = mesh.positions
    f = mesh.faces
    acc = np.zeros((mesh.vertex_count, 3))
    if f.shape[0]:
        cross = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        for k in range(3):
            np.add.at(acc, f[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    ok = norms > _ZERO_AREA_EPS
    acc[ok] /= norms[ok, None]
    acc[~ok] = 0.0
    return acc


def validate(mesh: TriangleMesh) -> ValidationReport:
    """Populate a :class:`ValidationReport`; never raises."""
    boundary = 0
    non_manifold: list[tuple[int, int]] = []
    inconsistent: list[tuple[int, int]] = []
    for edge, fids in sorted(mesh.edge_faces.items()):
        if len(fids) == 1:
            boundary += 1
        elif len(fids) > 2:
            non_manifold.append(edge)
        else:
            d0 = _edge_direction(mesh.faces[fids[0]], edge)
            d1 = _edge_direction(mesh.faces[fids[1]], edge)
            if d0 == d1:
                inconsistent.append((fids[0], fids[1]))
    components = _connected_components(mesh)
    uniq = {tuple(sorted(f)) for f in mesh.faces.tolist()}
    duplicates = mesh.face_count - len(uniq)
    zero_area = 0
    if mesh.face_count:
        p = mesh.positions
        f = mesh.faces
        cross = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        zero_area = int(np.sum(np.linalg.norm(cross, axis=1) <= _ZERO_AREA_EPS))
    return ValidationReport(
        is_edge_manifold=not non_manifold,
        boundary_edge_count=boundary,
        non_manifold_edges=non_manifold,
        inconsistent_winding_pairs=inconsistent,
        connected_components=components,
        duplicate_face_count=duplicates,
        zero_area_face_count=zero_area,
    )


def _edge_direction(face, edge: tuple[int, int]) -> int:
    """+1 if the face traverses edge (min, max) as min->max, else -1."""
    a, b, c = (int(x) for x in face)
    for u, w in ((a, b), (b, c), (c, a)):
        if (u, w) == edge:
            return 1
        if (w, u) == edge:
            return -1
    raise ValueError(f"edge {edge} not in face {(a, b, c)}")


def _connected_components(mesh: TriangleMesh) -> int:
    seen = np.zeros(mesh.vertex_count, dtype=bool)
    count = 0
    for start in range(mesh.vertex_count):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            for w in mesh.adjacency[u]:
                w = int(w)
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
    return count


def diameter_estimate(mesh: TriangleMesh, method: str = "geodesic", sample: int = 16) -> float:
    """Estimate the mesh diameter used to normalize geodesic errors.

    ``method="geodesic"`` runs single-source shortest paths from an evenly
    spaced vertex sample and returns the largest finite distance seen;
    ``method="bbox"`` returns the bounding-box diagonal.
    """
    if method == "bbox":
        span = mesh.positions.max(axis=0) - mesh.positions.min(axis=0)
        return float(np.linalg.norm(span))
    if method != "geodesic":
        raise ValueError(f"unknown diameter method {method!r}")
    n = mesh.vertex_count
    count = min(max(1, sample), n)
    sources = np.unique(np.linspace(0, n - 1, count).astype(int))
    best = 0.0
    for s in sources:
        d = geodesic_distances(mesh, int(s))
        finite = d[np.isfinite(d)]
        if finite.size:
            best = max(best, float(finite.max()))
    return best
