"""Triangle meshes: ASCII PLY I/O, builtin test objects, procedural texture."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist


class MeshParseError(ValueError):
    pass


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    name: str = field(default="mesh")
    # per-face solid-texture cell size (meters); 0 means interpolated vertex colors
    face_texture: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshParseError("triangle index out of range")
        if self.colors is None:
            cell = default_texture_cell(self.vertices)
            self.colors = procedural_colors(self.vertices, cell)
            if self.face_texture is None:
                self.face_texture = np.full(len(self.faces), cell)
        self.colors = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        if self.face_texture is None:
            self.face_texture = np.zeros(len(self.faces))
        self.face_texture = np.asarray(self.face_texture, dtype=np.float64).reshape(len(self.faces))

    @cached_property
    def diameter(self) -> float:
        return mesh_diameter(self.vertices)

    @cached_property
    def orientation(self) -> int:
        """+1 if the mesh is closed with outward-facing winding, -1 if closed
        and inward, 0 if open or inconsistently wound."""
        if len(self.faces) == 0:
            return 0
        F = self.faces
        e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        nv = len(self.vertices)
        fwd = e[:, 0] * nv + e[:, 1]
        rev = e[:, 1] * nv + e[:, 0]
        if len(np.unique(fwd)) != len(fwd) or not np.array_equal(np.sort(fwd), np.sort(rev)):
            return 0
        tri = self.vertices[F]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
        return int(np.sign(vol))

    @property
    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0) if len(self.vertices) else np.zeros(3)

    def __len__(self):
        return len(self.faces)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangle surface."""
        tri = self.vertices[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        idx = rng.choice(len(tri), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
        return ((1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c)


def mesh_diameter(vertices: np.ndarray) -> float:
    """Maximum pairwise vertex distance (exact)."""
    v = np.unique(np.asarray(vertices, dtype=np.float64), axis=0)
    if len(v) < 2:
        return 0.0
    if len(v) > 64:
        try:
            v = v[ConvexHull(v).vertices]
        except QhullError:
            pass  # planar or degenerate: fall through to brute force
    return float(pdist(v).max())


def merge_meshes(*meshes: TriangleMesh, name: str = "scene") -> TriangleMesh:
    verts, faces, cols, tex, offset = [], [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        cols.append(m.colors)
        tex.append(m.face_texture)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols), name=name,
                        face_texture=np.concatenate(tex))


# palette of well-separated hues at two brightness levels
_PALETTE = np.array(
    [colorsys.hsv_to_rgb(h / 12.0, s, v) for v, s in ((0.95, 0.85), (0.6, 0.95)) for h in range(12)]
    + [(0.95, 0.95, 0.95), (0.2, 0.2, 0.2)]
)


def default_texture_cell(vertices: np.ndarray) -> float:
    """1/6 of the largest bounding-box extent."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    ext = float(np.max(v.max(axis=0) - v.min(axis=0))) if len(v) else 0.0
    return ext / 6.0 if ext > 0 else 1.0


def procedural_colors(points: np.ndarray, cell=None) -> np.ndarray:
    """3D checkerboard: each point takes the palette color of its hashed cell.

    ``cell`` is a scalar or per-point array of cell sizes; cell boundaries
    sit at half-integer multiples so axis-aligned faces at integer multiples
    never straddle one.
    """
    v = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        return np.zeros((0, 3))
    if cell is None:
        cell = default_texture_cell(v)
    cell = np.asarray(cell, dtype=np.float64)
    if cell.ndim:
        cell = cell[:, None]
    ijk = np.floor(v / cell + 0.5).astype(np.int64)
    h = (ijk[:, 0] * 73856093) ^ (ijk[:, 1] * 19349663) ^ (ijk[:, 2] * 83492791)
    h = (h * 2654435761) % (2**32)
    return _PALETTE[(h >> 7) % len(_PALETTE)]


# ---------------------------------------------------------------------------
# PLY


def load_mesh(path) -> TriangleMesh:
    """Read an ASCII PLY with ``x y z [red green blue]`` vertices and triangles."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError(f"missing 'ply' magic at line 1 of {path}")

    elements: list[tuple[str, int, list]] = []
    lineno = 1
    end = None
    for lineno in range(2, len(lines) + 1):
        tok = lines[lineno - 1].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise MeshParseError(f"only ASCII PLY is supported (line {lineno})")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MeshParseError(f"malformed element declaration at line {lineno}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshParseError(f"property before any element at line {lineno}")
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise MeshParseError(f"unexpected header keyword {tok[0]!r} at line {lineno}")
    if end is None:
        raise MeshParseError(f"missing end_header (line {lineno})")

    cursor = end
    verts = faces = cols = None
    for name, count, props in elements:
        if name == "vertex":
            names = [p[-1] for p in props]
            for req in ("x", "y", "z"):
                if req not in names:
                    raise MeshParseError(f"vertex property {req!r} missing in header")
            ix = [names.index(c) for c in ("x", "y", "z")]
            ic = [names.index(c) for c in ("red", "green", "blue")] if "red" in names else None
            int_colors = ic is not None and props[ic[0]][0] in ("uchar", "uint8", "char", "int", "uint")
            verts = np.empty((count, 3))
            cols = np.empty((count, 3)) if ic else None
            for i in range(count):
                cursor += 1
                vals = _row(lines, cursor, len(names))
                verts[i] = [vals[j] for j in ix]
                if ic:
                    cols[i] = [vals[j] for j in ic]
            if cols is not None and int_colors:
                cols /= 255.0
        elif name == "face":
            faces = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                cursor += 1
                vals = _row(lines, cursor, None)
                n = int(vals[0])
                if n != 3:
                    raise MeshParseError(f"non-triangular face at line {cursor}")
                if len(vals) < 4:
                    raise MeshParseError(f"truncated face at line {cursor}")
                idx = [int(v) for v in vals[1:4]]
                if verts is None or min(idx) < 0 or max(idx) >= len(verts):
                    raise MeshParseError(f"vertex index out of range at line {cursor}")
                faces[i] = idx
        else:
            cursor += count
    if verts is None:
        raise MeshParseError("no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(verts, faces, cols, name=path.stem)


def _row(lines, lineno, expected):
    if lineno > len(lines):
        raise MeshParseError(f"unexpected end of file at line {lineno}")
    try:
        vals = [float(v) for v in lines[lineno - 1].split()]
    except ValueError:
        raise MeshParseError(f"non-numeric value at line {lineno}") from None
    if expected is not None and len(vals) != expected:
        raise MeshParseError(f"expected {expected} values at line {lineno}, got {len(vals)}")
    if not vals:
        raise MeshParseError(f"empty element row at line {lineno}")
    return vals


def save_mesh(path, mesh: TriangleMesh, colors: bool = True) -> None:
    out = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
           "property float x", "property float y", "property float z"]
    if colors:
        out += ["property uchar red", "property uchar green", "property uchar blue"]
    out += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    rgb = np.round(mesh.colors * 255).astype(int)
    for v, c in zip(mesh.vertices, rgb):
        row = " ".join(repr(float(x)) for x in v)
        out.append(row + (f" {c[0]} {c[1]} {c[2]}" if colors else ""))
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# builtin meshes


def checker_cube(side: float = 0.1, divisions: int = 8, texture_cell: float | None = None) -> TriangleMesh:
    """Cube centered at the origin, each face split into ``divisions``² quads
    (``12 * divisions**2`` triangles), with a solid checker texture of
    ``texture_cell`` (default ``side / 6``)."""
    h = side / 2
    g = np.linspace(-h, h, divisions + 1)
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a, b = [i for i in range(3) if i != axis]
            base = len(verts)
            for i in range(divisions + 1):
                for j in range(divisions + 1):
                    p = np.zeros(3)
                    p[axis], p[a], p[b] = sign * h, g[i], g[j]
                    verts.append(p)
            n = divisions + 1
            for i in range(divisions):
                for j in range(divisions):
                    q = [base + i * n + j, base + (i + 1) * n + j,
                         base + (i + 1) * n + j + 1, base + i * n + j + 1]
                    # outward winding
                    if (sign > 0) == ((axis == 1)):
                        faces += [[q[0], q[2], q[1]], [q[0], q[3], q[2]]]
                    else:
                        faces += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    verts = np.array(verts)
    verts, inverse = np.unique(np.round(verts, 12), axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[np.array(faces)]
    cell = side / 6 if texture_cell is None else texture_cell
    return TriangleMesh(verts, faces, procedural_colors(verts, cell), name="checker_cube",
                        face_texture=np.full(len(faces), cell))


def icosphere(radius: float = 0.05, subdivisions: int = 3) -> TriangleMesh:
    t = (1 + 5**0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius
    cell = radius / 3
    return TriangleMesh(v, np.array(faces), procedural_colors(v, cell), name="icosphere",
                        face_texture=np.full(len(faces), cell))


def tetra(size: float = 0.1) -> TriangleMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64) * size
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, f, name="tetra")


BUILTIN_MESHES = {"checker_cube": checker_cube, "icosphere": icosphere, "tetra": tetra}


def get_mesh(source: str) -> TriangleMesh:
    """Builtin mesh by name, or a PLY path."""
    if source in BUILTIN_MESHES:
        return BUILTIN_MESHES[source]()
    return load_mesh(source)
