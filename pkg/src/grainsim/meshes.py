"""Triangle meshes: file loading (OBJ/STL), primitives, and validity checks."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GeometryError


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int32, indices into vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle indices out of range")

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise GeometryError("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def is_closed(self) -> bool:
        """True if every directed edge occurs exactly once (watertight and
        consistently oriented)."""
        if not self.n_triangles:
            return False
        t = self.triangles.astype(np.int64)
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        n = len(self.vertices)
        keys = edges[:, 0] * n + edges[:, 1]
        if len(np.unique(keys)) != len(keys):
            return False  # duplicated directed edge
        rev = edges[:, 1] * n + edges[:, 0]
        return bool(np.all(np.isin(keys, rev)))

    def transformed(self, rotation: np.ndarray | None = None,
                    translation=None, scale: float = 1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.triangles.copy())


def require_closed(mesh: TriangleMesh, context: str = "") -> None:
    if not mesh.is_closed():
        where = f" ({context})" if context else ""
        raise GeometryError(f"mesh is not closed{where}: volume operations need a watertight mesh")


# ---------------------------------------------------------------------------
# File formats

def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".stl":
        return load_stl(path)
    raise GeometryError(f"unsupported mesh format {suffix!r} ({path})")


def load_obj(path) -> TriangleMesh:
    """Parse ASCII OBJ with v/f records; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise GeometryError(f"{path}:{line_no}: vertex needs 3 coordinates")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise GeometryError(f"{path}:{line_no}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    triangles.append((idx[0], idx[k], idx[k + 1]))
    if not vertices or not triangles:
        raise GeometryError(f"{path}: no usable geometry (needs v and f records)")
    return TriangleMesh(np.array(vertices), np.array(triangles))


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_stl(path) -> TriangleMesh:
    """Parse binary little-endian STL, merging exactly coincident vertices."""
    with open(path, "rb") as fh:
        header = fh.read(84)
        if len(header) < 84:
            raise GeometryError(f"{path}: truncated STL header")
        (count,) = struct.unpack_from("<I", header, 80)
        payload = fh.read(50 * count)
        if len(payload) < 50 * count:
            raise GeometryError(f"{path}: truncated STL payload")
    tris = np.frombuffer(payload, dtype=np.uint8).reshape(count, 50)
    coords = tris[:, 12:48].copy().view("<f4").reshape(count, 3, 3).astype(np.float64)
    flat = coords.reshape(-1, 3)
    unique, inverse = np.unique(flat, axis=0, return_inverse=True)
    triangles = inverse.reshape(count, 3)
    return TriangleMesh(unique, triangles)


def save_stl(path, mesh: TriangleMesh) -> None:
    a, b, c = mesh.triangle_corners()
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(lengths > 0, normals / np.maximum(lengths, 1e-300), 0.0)
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", mesh.n_triangles))
        for k in range(mesh.n_triangles):
            rec = np.concatenate([normals[k], a[k], b[k], c[k]]).astype("<f4")
            fh.write(rec.tobytes())
            fh.write(struct.pack("<H", 0))


# ---------------------------------------------------------------------------
# Primitive meshes (test fixtures and built-in scenes)

_BOX_FACES = [
    # -z, +z, -y, +y, -x, +x; outward-oriented
    (0, 2, 1), (0, 3, 2),
    (4, 5, 6), (4, 6, 7),
    (0, 1, 5), (0, 5, 4),
    (3, 7, 6), (3, 6, 2),
    (0, 4, 7), (0, 7, 3),
    (1, 2, 6), (1, 6, 5),
]


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed axis-aligned box of the given edge lengths."""
    sx, sy, sz = (float(s) / 2.0 for s in np.broadcast_to(size, (3,)))
    cx, cy, cz = center
    verts = np.array([
        [cx - sx, cy - sy, cz - sz],
        [cx + sx, cy - sy, cz - sz],
        [cx + sx, cy + sy, cz - sz],
        [cx - sx, cy + sy, cz - sz],
        [cx - sx, cy - sy, cz + sz],
        [cx + sx, cy - sy, cz + sz],
        [cx + sx, cy + sy, cz + sz],
        [cx - sx, cy + sy, cz + sz],
    ])
    return TriangleMesh(verts, np.array(_BOX_FACES))


def quad_mesh(width=1.0, depth=1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Open two-triangle rectangle in the XZ plane (a floor patch)."""
    cx, cy, cz = center
    hw, hd = width / 2.0, depth / 2.0
    verts = np.array([
        [cx - hw, cy, cz - hd],
        [cx + hw, cy, cz - hd],
        [cx + hw, cy, cz + hd],
        [cx - hw, cy, cz + hd],
    ])
    return TriangleMesh(verts, np.array([(0, 1, 2), (0, 2, 3)]))


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed sphere approximation from a subdivided icosahedron."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]

    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))
