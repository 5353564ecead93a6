"""Grid ray casting.

All beams of a scan march through the grid in lockstep (vectorized
Amanatides-Woo traversal), so a full 360-beam cast costs a few hundred
small numpy operations instead of ~50k Python loop iterations. Reported
ranges are exact distances to the boundary where the ray enters the first
occupied cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RayTrace:
    """Result of tracing beams through a grid.

    ranges: (N,) distance to first occupied cell, +inf when none was hit
        within the beam's max range.
    cells_ix / cells_iy: (S, N) indices of cells entered along each beam,
        in order; slot s holds the s-th cell after the start cell.
    entry_t: (S, N) distance at which the beam entered that cell; +inf in
        unused slots. The hit cell, when any, is the last recorded cell.
    """

    ranges: np.ndarray
    cells_ix: np.ndarray
    cells_iy: np.ndarray
    entry_t: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.ranges)


def trace_rays(
    occupied: np.ndarray,
    start_x: float,
    start_y: float,
    angles: np.ndarray,
    max_ranges: np.ndarray | float,
    resolution: float,
    origin_x: float = 0.0,
    origin_y: float = 0.0,
    record_cells: bool = False,
) -> RayTrace:
    """March every beam until it hits an occupied cell, leaves the grid, or
    exceeds its max range.

    Args:
        occupied: (H, W) boolean array; True blocks the ray.
        start_x, start_y: beam origin in world coordinates.
        angles: (N,) world-frame beam headings.
        max_ranges: scalar or (N,) per-beam cutoff in meters.
        resolution: cell edge length.
        origin_x, origin_y: world position of cell (0, 0)'s corner.
        record_cells: also return the per-step visited cells (costs memory;
            only the mapping and costmap layers need it).
    """
    angles = np.asarray(angles, dtype=float)
    n = angles.shape[0]
    max_ranges = np.broadcast_to(np.asarray(max_ranges, dtype=float), (n,)).copy()
    height, width = occupied.shape

    gx = (start_x - origin_x) / resolution
    gy = (start_y - origin_y) / resolution
    ix0 = int(np.floor(gx))
    iy0 = int(np.floor(gy))

    max_steps = int(2.0 * float(np.max(max_ranges)) / resolution) + 4
    if record_cells:
        cells_ix = np.zeros((max_steps, n), dtype=np.int32)
        cells_iy = np.zeros((max_steps, n), dtype=np.int32)
        entry_t = np.full((max_steps, n), np.inf)
    else:
        cells_ix = np.zeros((0, n), dtype=np.int32)
        cells_iy = np.zeros((0, n), dtype=np.int32)
        entry_t = np.full((0, n), np.inf)

    ranges = np.full(n, np.inf)

    start_inside = 0 <= ix0 < width and 0 <= iy0 < height
    if start_inside and occupied[iy0, ix0]:
        ranges[:] = 0.0
        return RayTrace(ranges, cells_ix, cells_iy, entry_t)

    dx = np.cos(angles)
    dy = np.sin(angles)
    step_x = np.where(dx > 0, 1, np.where(dx < 0, -1, 0)).astype(np.int32)
    step_y = np.where(dy > 0, 1, np.where(dy < 0, -1, 0)).astype(np.int32)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta_x = np.where(dx != 0, resolution / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, resolution / np.abs(dy), np.inf)
        frac_x = np.where(dx > 0, (ix0 + 1) - gx, gx - ix0)
        frac_y = np.where(dy > 0, (iy0 + 1) - gy, gy - iy0)
        t_max_x = np.where(dx != 0, frac_x * resolution / np.abs(dx), np.inf)
        t_max_y = np.where(dy != 0, frac_y * resolution / np.abs(dy), np.inf)

    ix = np.full(n, ix0, dtype=np.int32)
    iy = np.full(n, iy0, dtype=np.int32)
    active = np.ones(n, dtype=bool)
    if not start_inside:
        # Rays born outside the grid report nothing rather than marching in.
        active[:] = False

    for step in range(max_steps):
        if not active.any():
            break
        use_x = t_max_x <= t_max_y
        t_entry = np.where(use_x, t_max_x, t_max_y)
        ix = np.where(active & use_x, ix + step_x, ix)
        iy = np.where(active & ~use_x, iy + step_y, iy)
        t_max_x = np.where(active & use_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(active & ~use_x, t_max_y + t_delta_y, t_max_y)

        over = active & (t_entry > max_ranges)
        active &= ~over

        inside = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        left = active & ~inside
        active &= ~left

        if record_cells:
            cells_ix[step, active] = ix[active]
            cells_iy[step, active] = iy[active]
            entry_t[step, active] = t_entry[active]

        hit_now = active.copy()
        hit_now[active] = occupied[iy[active], ix[active]]
        ranges[hit_now] = t_entry[hit_now]
        active &= ~hit_now

    return RayTrace(ranges, cells_ix, cells_iy, entry_t)


def cast_ranges(
    occupied: np.ndarray,
    start_x: float,
    start_y: float,
    angles: np.ndarray,
    max_range: float,
    resolution: float,
    origin_x: float = 0.0,
    origin_y: float = 0.0,
) -> np.ndarray:
    """Hit distances only; +inf where nothing was hit within max_range."""
    return trace_rays(
        occupied, start_x, start_y, angles, max_range, resolution, origin_x, origin_y
    ).ranges
