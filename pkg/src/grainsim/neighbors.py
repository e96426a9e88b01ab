"""Uniform-grid fixed-radius neighbor queries.

One grid is built per particle set per step and is immutable afterwards; the
cell size must be at least as large as any radius it will be queried with, so
a query only ever inspects the 27 cells around the probe. Cell coordinates
are packed losslessly into a single sortable 64-bit key, which makes lookups
exact regardless of hash quality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DataError, ParameterError


@dataclass
class NeighborGrid:
    cell_size: float
    positions: np.ndarray    # (n, 3) snapshot the grid was built from
    keys_sorted: np.ndarray  # (n,) int64 cell keys, ascending
    order: np.ndarray        # (n,) particle index per sorted key

    @classmethod
    def build(cls, positions, cell_size: float) -> "NeighborGrid":
        if cell_size <= 0.0:
            raise ParameterError(f"cell_size must be positive, got {cell_size}")
        pos = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
        bad = ~np.all(np.isfinite(pos), axis=1)
        if bad.any():
            idx = int(np.argmax(bad))
            raise DataError(f"non-finite position at particle {idx}: {pos[idx]}")
        if pos.size and np.abs(pos).max() / cell_size >= kernels.COORD_LIMIT:
            raise ParameterError("positions too far from origin for this cell size")
        keys = kernels.cell_keys(pos, 1.0 / cell_size)
        order = np.argsort(keys, kind="stable")
        return cls(
            cell_size=float(cell_size),
            positions=pos,
            keys_sorted=keys[order],
            order=order.astype(np.int64),
        )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def query(self, probe, radius: float) -> np.ndarray:
        """All indices i with |x_i - probe| <= radius, ascending.

        The probe point itself is included when stored; callers filter.
        """
        if radius > self.cell_size:
            raise ParameterError(
                f"query radius {radius} exceeds cell size {self.cell_size}; "
                "neighbors outside the 27-cell window would be missed"
            )
        probe = np.asarray(probe, dtype=np.float64).reshape(3)
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        found = kernels.query_sphere(
            self.keys_sorted, self.order, self.positions,
            1.0 / self.cell_size, probe, float(radius),
        )
        found.sort()
        return found
