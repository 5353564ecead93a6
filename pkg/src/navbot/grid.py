"""Tri-state occupancy grids and world <-> cell transforms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2D

FREE = 0
OCCUPIED = 1
UNKNOWN = -1


@dataclass
class OccupancyGrid:
    """Row-major tri-state grid. cells[iy, ix]; origin is the world position
    of the (0, 0) cell corner."""

    resolution: float
    width: int
    height: int
    origin: Pose2D
    cells: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.cells.shape != (self.height, self.width):
            raise ValueError("cells shape must be (height, width)")

    @classmethod
    def empty(
        cls,
        resolution: float,
        width: int,
        height: int,
        origin: Pose2D = Pose2D(0.0, 0.0, 0.0),
        fill: int = FREE,
    ) -> "OccupancyGrid":
        cells = np.full((height, width), fill, dtype=np.int8)
        return cls(resolution, width, height, origin, cells)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(
            self.resolution, self.width, self.height, self.origin, self.cells.copy()
        )

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """(ix, iy) of the cell containing the world point. May be out of bounds."""
        ix = int(np.floor((x - self.origin.x) / self.resolution))
        iy = int(np.floor((y - self.origin.y) / self.resolution))
        return ix, iy

    def cell_to_world(self, ix: int, iy: int) -> tuple[float, float]:
        """World coordinates of a cell center."""
        return (
            self.origin.x + (ix + 0.5) * self.resolution,
            self.origin.y + (iy + 0.5) * self.resolution,
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_occupied(self, ix: int, iy: int) -> bool:
        """Out-of-bounds counts as occupied; keeps every caller conservative."""
        if not self.in_bounds(ix, iy):
            return True
        return self.cells[iy, ix] == OCCUPIED

    def set_rect(self, x0: float, y0: float, x1: float, y1: float, value: int) -> None:
        """Write value into all cells whose center lies inside the rectangle."""
        res = self.resolution
        ix0 = max(0, int(np.floor((min(x0, x1) - self.origin.x) / res)))
        iy0 = max(0, int(np.floor((min(y0, y1) - self.origin.y) / res)))
        ix1 = min(self.width, int(np.ceil((max(x0, x1) - self.origin.x) / res)))
        iy1 = min(self.height, int(np.ceil((max(y0, y1) - self.origin.y) / res)))
        for iy in range(iy0, iy1):
            for ix in range(ix0, ix1):
                cx, cy = self.cell_to_world(ix, iy)
                if min(x0, x1) <= cx <= max(x0, x1) and min(y0, y1) <= cy <= max(y0, y1):
                    self.cells[iy, ix] = value

    def add_border(self, thickness_cells: int = 1) -> None:
        t = thickness_cells
        self.cells[:t, :] = OCCUPIED
        self.cells[-t:, :] = OCCUPIED
        self.cells[:, :t] = OCCUPIED
        self.cells[:, -t:] = OCCUPIED
