"""Particle placement: blue-noise-style volume filling and surface coverage.

Volume sampling fills a watertight mesh with non-overlapping spheres of
radius r (pairwise center distance >= 2r). The bounding box is divided into
cells of side 2r/sqrt(3) -- the cell diagonal equals 2r, so each cell can
hold at most one accepted sample. Thirty random candidates are generated per
cell and the cells are visited in a fixed x-major scan, which makes the
result deterministic per seed while the randomness of the candidate
positions avoids repetitive patterns.

Surface sampling covers a mesh (open or closed) with points at pairwise
distance >= 2r*beta via dart throwing from area-weighted random candidates,
then guarantees every large triangle has a sample near its centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import GeometryError, ParameterError
from .meshes import TriangleMesh, require_closed

_CANDIDATES_PER_CELL = 30
_SURFACE_CANDIDATE_FACTOR = 40.0
_SURFACE_BETA = 0.9
# Candidate chunk size keeping peak memory modest for large meshes.
_CHUNK_CELLS = 65536

_RETRY_DIRECTIONS = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.577350269, 0.577350269, 0.577350269],
    [-0.299283936, 0.760826226, 0.575757576],
    [0.813733471, -0.330864528, 0.477634566],
    [-0.637957215, -0.491413086, 0.592751513],
    [0.148333105, 0.936337801, -0.318250890],
])


@dataclass
class SamplingGrid:
    """Occupancy grid sized so one accepted sample fits per cell."""

    cell_side: float
    grid_min: np.ndarray   # (3,)
    dims: tuple[int, int, int]
    occupancy: np.ndarray  # flat int64, accepted index + 1, 0 = empty

    @classmethod
    def for_bounds(cls, lo, hi, min_dist: float) -> "SamplingGrid":
        cell = min_dist / math.sqrt(3.0)
        span = np.maximum(np.asarray(hi) - np.asarray(lo), 0.0)
        dims = tuple(int(math.floor(s / cell)) + 1 for s in span)
        return cls(
            cell_side=cell,
            grid_min=np.asarray(lo, dtype=np.float64).copy(),
            dims=dims,
            occupancy=np.zeros(dims[0] * dims[1] * dims[2], dtype=np.int64),
        )

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def cell_of(self, points) -> np.ndarray:
        """Flat cell index per point (x-major scan order)."""
        rel = (np.atleast_2d(points) - self.grid_min) / self.cell_side
        ijk = np.floor(rel).astype(np.int64)
        ijk = np.clip(ijk, 0, np.array(self.dims) - 1)
        return (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]


# ---------------------------------------------------------------------------
# Point containment

def _bin_triangles_xy(mesh: TriangleMesh):
    """CSR buckets of triangle indices over an XY grid of the mesh bounds."""
    a, b, c = mesh.triangle_corners()
    lo_t = np.minimum(np.minimum(a, b), c)[:, :2]
    hi_t = np.maximum(np.maximum(a, b), c)[:, :2]
    lo, hi = mesh.bounds()
    m = mesh.n_triangles
    n_side = max(1, int(math.sqrt(m)))
    span = np.maximum(hi[:2] - lo[:2], 1e-30)
    cs = float(span.max()) / n_side
    nx = max(1, int(math.ceil(span[0] / cs)))
    ny = max(1, int(math.ceil(span[1] / cs)))
    ix0 = np.clip(((lo_t[:, 0] - lo[0]) / cs).astype(np.int64), 0, nx - 1)
    ix1 = np.clip(((hi_t[:, 0] - lo[0]) / cs).astype(np.int64), 0, nx - 1)
    iy0 = np.clip(((lo_t[:, 1] - lo[1]) / cs).astype(np.int64), 0, ny - 1)
    iy1 = np.clip(((hi_t[:, 1] - lo[1]) / cs).astype(np.int64), 0, ny - 1)

    cells: list[list[int]] = [[] for _ in range(nx * ny)]
    for t in range(m):
        for yy in range(iy0[t], iy1[t] + 1):
            base = yy * nx
            for xx in range(ix0[t], ix1[t] + 1):
                cells[base + xx].append(t)
    counts = np.array([len(c) for c in cells], dtype=np.int64)
    starts = np.zeros(nx * ny + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    items = np.fromiter(
        (t for cell in cells for t in cell), dtype=np.int64, count=int(counts.sum())
    )
    return starts, items, float(lo[0]), float(lo[1]), 1.0 / cs, nx, ny, float(hi[2])


def _contains_single(point, mesh: TriangleMesh) -> bool:
    """Parity test casting along a sequence of directions until one is clean."""
    a, b, c = mesh.triangle_corners()
    p = np.asarray(point, dtype=np.float64)
    for d in _RETRY_DIRECTIONS:
        ra, rb, rc = a - p, b - p, c - p
        # Rotate so the cast direction becomes +z, then reuse the parity math.
        basis = _orthobasis(d)
        pa, pb, pc = ra @ basis, rb @ basis, rc @ basis
        d_ab = pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0]
        d_bc = pb[:, 0] * pc[:, 1] - pb[:, 1] * pc[:, 0]
        d_ca = pc[:, 0] * pa[:, 1] - pc[:, 1] * pa[:, 0]
        area2 = d_ab + d_bc + d_ca
        ok = np.abs(area2) > 1e-12
        inv = np.where(ok, area2, 1.0)
        u = d_bc / inv
        v = d_ca / inv
        w = d_ab / inv
        mmin = np.minimum(u, np.minimum(v, w))
        grazing = ok & (np.abs(mmin) <= 1e-10)
        over_degenerate = ~ok & (
            (np.minimum(np.minimum(pa[:, 0], pb[:, 0]), pc[:, 0]) <= 0)
            & (np.maximum(np.maximum(pa[:, 0], pb[:, 0]), pc[:, 0]) >= 0)
            & (np.minimum(np.minimum(pa[:, 1], pb[:, 1]), pc[:, 1]) <= 0)
            & (np.maximum(np.maximum(pa[:, 1], pb[:, 1]), pc[:, 1]) >= 0)
        )
        hit = ok & (mmin > 1e-10)
        z_hit = u * pa[:, 2] + v * pb[:, 2] + w * pc[:, 2]
        on_surface = hit & (np.abs(z_hit) <= 1e-12)
        if grazing.any() or over_degenerate.any() or on_surface.any():
            continue
        return bool(np.count_nonzero(hit & (z_hit > 1e-12)) & 1)
    raise GeometryError("containment test degenerate for all cast directions")


def _orthobasis(d: np.ndarray) -> np.ndarray:
    """Columns: two unit vectors orthogonal to d, then d itself."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return np.column_stack([u, v, d])


def point_in_mesh(point, mesh: TriangleMesh) -> bool:
    """True iff the point is strictly inside the closed mesh."""
    require_closed(mesh)
    return _contains_single(point, mesh)


def points_in_mesh(points, mesh: TriangleMesh) -> np.ndarray:
    """Vectorized strict-containment test; boolean per point.

    Casts +z rays through XY triangle bins; the rare grazing cases fall back
    to per-point casts along alternate directions.
    """
    require_closed(mesh)
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if not pts.size:
        return np.zeros(0, dtype=bool)
    starts, items, gx0, gy0, inv_cs, nx, ny, zmax = _bin_triangles_xy(mesh)
    a, b, c = (np.ascontiguousarray(arr) for arr in mesh.triangle_corners())
    inside, retry = kernels.ray_parity_z(
        pts, a, b, c, starts, items, gx0, gy0, inv_cs, nx, ny, zmax
    )
    result = inside.astype(bool)
    for idx in np.nonzero(retry)[0]:
        result[idx] = _contains_single(pts[idx], mesh)
    return result


# ---------------------------------------------------------------------------
# Volume sampling

def sample_volume(mesh: TriangleMesh, r: float, seed: int) -> np.ndarray:
    """Fill the closed mesh with sphere centers at pairwise distance >= 2r.

    Returns an (n, 3) array; deterministic for fixed (mesh, r, seed). A mesh
    too thin to admit any interior candidate yields an empty result.
    """
    if r <= 0.0:
        raise ParameterError(f"sampling radius must be positive, got {r}")
    require_closed(mesh)
    lo, hi = mesh.bounds()
    grid = SamplingGrid.for_bounds(lo, hi, 2.0 * r)
    rng = np.random.Generator(np.random.PCG64(seed))
    prep = _bin_triangles_xy(mesh)
    a, b, c = (np.ascontiguousarray(arr) for arr in mesh.triangle_corners())

    accepted = np.empty((grid.n_cells, 3), dtype=np.float64)
    n_accepted = 0
    dx, dy, dz = grid.dims
    n_cells = grid.n_cells
    for chunk_start in range(0, n_cells, _CHUNK_CELLS):
        chunk = min(_CHUNK_CELLS, n_cells - chunk_start)
        lins = np.arange(chunk_start, chunk_start + chunk, dtype=np.int64)
        cz = lins % dz
        cy = (lins // dz) % dy
        cx = lins // (dz * dy)
        corner = grid.grid_min + np.column_stack([cx, cy, cz]) * grid.cell_side
        cand = np.repeat(corner, _CANDIDATES_PER_CELL, axis=0)
        cand += rng.random((chunk * _CANDIDATES_PER_CELL, 3)) * grid.cell_side
        starts, items, gx0, gy0, inv_cs, nx, ny, zmax = prep
        inside, retry = kernels.ray_parity_z(
            cand, a, b, c, starts, items, gx0, gy0, inv_cs, nx, ny, zmax
        )
        keep = inside.astype(bool)
        for idx in np.nonzero(retry)[0]:
            keep[idx] = _contains_single(cand[idx], mesh)
        if not keep.any():
            continue
        cand_cells = np.repeat(lins, _CANDIDATES_PER_CELL)[keep]
        cand_pts = cand[keep]
        # Candidates are already grouped by ascending cell; build run starts.
        boundaries = np.nonzero(np.diff(cand_cells))[0] + 1
        run_starts = np.concatenate([[0], boundaries, [len(cand_cells)]]).astype(np.int64)
        n_accepted = kernels.select_samples(
            np.ascontiguousarray(cand_pts), cand_cells, run_starts,
            grid.occupancy, dx, dy, dz, 2.0 * r, accepted, n_accepted,
        )
    return accepted[:n_accepted].copy()


# ---------------------------------------------------------------------------
# Surface sampling

def sample_surface(mesh: TriangleMesh, r: float, seed: int,
                   beta: float = _SURFACE_BETA) -> np.ndarray:
    """Cover the mesh surface with points at pairwise distance >= 2r*beta.

    Every triangle larger than 2r in some dimension ends up with a sample
    within 2r of its centroid. Deterministic per seed.
    """
    if r <= 0.0:
        raise ParameterError(f"sampling radius must be positive, got {r}")
    if not 0.0 < beta <= 1.0:
        raise ParameterError(f"beta must be in (0, 1], got {beta}")
    if mesh.n_triangles == 0:
        raise GeometryError("cannot surface-sample an empty mesh")

    rng = np.random.Generator(np.random.PCG64(seed))
    a, b, c = mesh.triangle_corners()
    areas = mesh.triangle_areas()
    per_tri = np.maximum(
        1, np.ceil(areas * _SURFACE_CANDIDATE_FACTOR / (math.pi * r * r)).astype(np.int64)
    )
    tri_idx = np.repeat(np.arange(mesh.n_triangles), per_tri)
    u1 = np.sqrt(rng.random(len(tri_idx)))
    u2 = rng.random(len(tri_idx))
    cand = (
        (1.0 - u1)[:, None] * a[tri_idx]
        + (u1 * (1.0 - u2))[:, None] * b[tri_idx]
        + (u1 * u2)[:, None] * c[tri_idx]
    )
    cand = cand[rng.permutation(len(cand))]

    min_dist = 2.0 * r * beta
    lo, hi = mesh.bounds()
    grid = SamplingGrid.for_bounds(lo, hi, min_dist)
    accepted = np.empty((len(cand) + mesh.n_triangles, 3), dtype=np.float64)
    n_accepted = kernels.select_samples(
        np.ascontiguousarray(cand), grid.cell_of(cand),
        np.arange(len(cand) + 1, dtype=np.int64),  # one candidate per "run"
        grid.occupancy, *grid.dims, min_dist, accepted, 0,
    )

    # Coverage guarantee: any triangle bigger than a particle whose centroid
    # has no sample within 2r gets its centroid added (which is then >= 2r
    # from everything accepted, so the spacing bound is preserved).
    extent = np.maximum(np.maximum(a, b), c) - np.minimum(np.minimum(a, b), c)
    large = np.nonzero(extent.max(axis=1) > 2.0 * r)[0]
    centroids = (a + b + c) / 3.0
    cover_rings = math.ceil(2.0 * r / grid.cell_side)
    for t in large:
        hits = kernels.count_near(
            grid.occupancy, accepted, *grid.dims, centroids[t],
            grid.grid_min, 1.0 / grid.cell_side, 2.0 * r, cover_rings,
        )
        if hits == 0:
            probe_cell = int(grid.cell_of(centroids[t][None, :])[0])
            accepted[n_accepted] = centroids[t]
            n_accepted += 1
            if grid.occupancy[probe_cell] == 0:
                grid.occupancy[probe_cell] = n_accepted
    return accepted[:n_accepted].copy()
