"""Layered cost grids for planning.

Cost byte semantics: 0 free, 1..252 increasing penalty, 253 inscribed
(collision if the robot center enters), 254 lethal (an obstacle occupies
the cell), 255 unknown. Layers always compose in a fixed order: static
map, lidar obstacles, ultrasonic range cones, then inflation. Sensor
clears and marks are staged per update and flushed clears-first, so a
mark always beats a clear from the same update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import DEFAULT_FOOTPRINT, Footprint, Pose2D
from .grid import OCCUPIED, UNKNOWN, OccupancyGrid
from .raycast import trace_rays
from .simulation import LaserScan, RangeReading

COST_FREE = 0
COST_INSCRIBED = 253
COST_LETHAL = 254
COST_UNKNOWN = 255

LAYER_ORDER = ("static", "obstacles", "range", "inflation")

COLLISION = math.inf


@dataclass(frozen=True)
class CostmapParams:
    """Shared layer configuration.

    unknown_is_lethal selects the two stock behaviors: the global instance
    refuses to plan through unexplored space, the local instance treats
    unknown as barely-traversable (cost 252).
    """

    footprint: Footprint = DEFAULT_FOOTPRINT
    obstacle_range: float = 2.5
    raytrace_range: float = 3.0
    inflation_radius: float = 0.55
    cost_scaling: float = 10.0
    unknown_is_lethal: bool = True

    @property
    def inscribed_radius(self) -> float:
        return self.footprint.inscribed_radius


def inflation_cost(distance_m, inscribed_radius: float, cost_scaling: float) -> np.ndarray:
    """Cost contributed by a lethal cell at the given center distance."""
    d = np.asarray(distance_m, dtype=float)
    decayed = np.rint(252.0 * np.exp(-cost_scaling * (d - inscribed_radius)))
    out = np.where(d <= inscribed_radius, float(COST_INSCRIBED), decayed)
    return np.where(d == 0.0, float(COST_LETHAL), out)


_DISC_OFFSET_CACHE: dict[tuple[float, float], np.ndarray] = {}


def disc_cell_offsets(radius: float, resolution: float) -> np.ndarray:
    """(K, 2) integer cell offsets whose centers lie within radius of a cell
    center. Shared by the scalar footprint check and the planner's
    dilation-based vectorized one so both see the same covered set."""
    key = (radius, resolution)
    cached = _DISC_OFFSET_CACHE.get(key)
    if cached is not None:
        return cached
    n = int(math.ceil(radius / resolution)) + 1
    rel = np.arange(-n, n + 1)
    dx, dy = np.meshgrid(rel, rel)
    inside = (dx * dx + dy * dy) * resolution * resolution <= radius * radius
    offs = np.stack([dx[inside], dy[inside]], axis=1)
    _DISC_OFFSET_CACHE[key] = offs
    return offs


class Costmap:
    """One cost grid instance plus its layer pipeline state."""

    def __init__(
        self,
        resolution: float,
        width: int,
        height: int,
        origin: Pose2D,
        params: CostmapParams,
        rolling: bool = False,
    ):
        self.resolution = resolution
        self.width = width
        self.height = height
        self.origin = origin
        self.params = params
        self.rolling = rolling
        fill = COST_UNKNOWN if params.unknown_is_lethal else COST_FREE
        self.cost = np.full((height, width), fill, dtype=np.uint8)
        self._static: np.ndarray | None = None
        # Persistent sensor evidence; only non-rolling instances keep it.
        self._marked = np.zeros((height, width), dtype=bool)
        self._cleared = np.zeros((height, width), dtype=bool)
        self._stage_clears: list[tuple[np.ndarray, np.ndarray]] = []
        self._stage_marks: list[tuple[np.ndarray, np.ndarray]] = []

    # -- geometry ----------------------------------------------------------

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin.x) / self.resolution))
        iy = int(math.floor((y - self.origin.y) / self.resolution))
        return ix, iy

    def cell_to_world(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin.x + (ix + 0.5) * self.resolution,
            self.origin.y + (iy + 0.5) * self.resolution,
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def snapshot(self) -> "Costmap":
        """Frozen copy for consumers; later updates do not touch it."""
        c = Costmap(self.resolution, self.width, self.height, self.origin,
                    self.params, self.rolling)
        c.cost = self.cost.copy()
        return c

    # -- layers ------------------------------------------------------------

    @classmethod
    def from_static(cls, grid: OccupancyGrid, params: CostmapParams,
                    rolling: bool = False) -> "Costmap":
        """Build an instance seeded from a tri-state map."""
        cm = cls(grid.resolution, grid.width, grid.height, grid.origin, params, rolling)
        cm.set_static(grid)
        return cm

    def set_static(self, grid: OccupancyGrid) -> None:
        if grid.cells.shape != (self.height, self.width):
            raise ValueError("static map shape does not match costmap")
        static = np.full(grid.cells.shape, COST_FREE, dtype=np.uint8)
        static[grid.cells == OCCUPIED] = COST_LETHAL
        static[grid.cells == UNKNOWN] = COST_UNKNOWN
        self._static = static
        self.cost = static.copy()

    def reset_window(self, center: Pose2D) -> None:
        """Rolling instances recenter on the robot each update and rebuild
        from fresh sensor data only. The origin snaps to the cell lattice
        so window cells stay aligned with the full map."""
        if not self.rolling:
            raise ValueError("reset_window is only valid on rolling costmaps")
        half_w = self.width * self.resolution / 2.0
        half_h = self.height * self.resolution / 2.0
        ox = math.floor((center.x - half_w) / self.resolution) * self.resolution
        oy = math.floor((center.y - half_h) / self.resolution) * self.resolution
        self.origin = Pose2D(ox, oy, 0.0)
        self.cost.fill(COST_FREE)

    def mark_scan(self, pose: Pose2D, scan: LaserScan) -> None:
        """Obstacle layer: stage lethal marks at beam endpoints within
        obstacle_range and clears along beams out to raytrace_range."""
        p = self.params
        angles = pose.theta + scan.angles()
        hits = scan.hits()
        reach = np.where(hits, np.minimum(scan.ranges, p.raytrace_range), p.raytrace_range)
        mark = hits & (scan.ranges <= p.obstacle_range)
        self._stage_beams(pose.x, pose.y, angles, scan.ranges, reach, mark)

    def apply_range(self, pose: Pose2D, reading: RangeReading) -> None:
        """Range cone layer: an arc of lethal cells at the measured distance,
        free space swept through the cone interior. Readings at or below
        range_min carry no information and are ignored."""
        if reading.range <= reading.range_min:
            return
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        sx = pose.x + c * reading.mount.x - s * reading.mount.y
        sy = pose.y + s * reading.mount.x + c * reading.mount.y
        heading = pose.theta + reading.mount.theta

        reach = min(reading.range, reading.range_max)
        # Enough rays that adjacent arc samples sit under half a cell apart.
        arc_len = reading.fov * max(reach, self.resolution)
        n_rays = max(9, int(math.ceil(arc_len / (0.5 * self.resolution))) + 1)
        angles = heading + np.linspace(-reading.fov / 2.0, reading.fov / 2.0, n_rays)
        ranges = np.full(n_rays, reading.range)
        mark = np.full(n_rays, bool(reading.is_hit))
        self._stage_beams(sx, sy, angles, ranges, np.full(n_rays, reach), mark)

    def _stage_beams(self, sx, sy, angles, ranges, reach, mark) -> None:
        trace = trace_rays(
            np.zeros((self.height, self.width), dtype=bool),
            sx,
            sy,
            angles,
            reach,
            self.resolution,
            self.origin.x,
            self.origin.y,
            record_cells=True,
        )
        nudge = 0.25 * self.resolution
        ex = sx + np.cos(angles) * (ranges + nudge)
        ey = sy + np.sin(angles) * (ranges + nudge)
        eix = np.floor((ex - self.origin.x) / self.resolution).astype(np.int64)
        eiy = np.floor((ey - self.origin.y) / self.resolution).astype(np.int64)
        mark = mark & (eix >= 0) & (eix < self.width) & (eiy >= 0) & (eiy < self.height)

        # Clears: every traversed cell except each beam's endpoint cell.
        valid = np.isfinite(trace.entry_t)
        not_end = (trace.cells_ix != eix[None, :]) | (trace.cells_iy != eiy[None, :])
        cmask = valid & not_end
        self._stage_clears.append((trace.cells_ix[cmask], trace.cells_iy[cmask]))
        self._stage_marks.append((eix[mark], eiy[mark]))

    def flush_sensor_evidence(self) -> None:
        """Apply staged clears, then staged marks, then recompose the grid."""
        clears_x = np.concatenate([c[0] for c in self._stage_clears]) if self._stage_clears else np.empty(0, np.int64)
        clears_y = np.concatenate([c[1] for c in self._stage_clears]) if self._stage_clears else np.empty(0, np.int64)
        marks_x = np.concatenate([m[0] for m in self._stage_marks]) if self._stage_marks else np.empty(0, np.int64)
        marks_y = np.concatenate([m[1] for m in self._stage_marks]) if self._stage_marks else np.empty(0, np.int64)
        self._stage_clears = []
        self._stage_marks = []

        if self.rolling:
            self.cost[clears_y, clears_x] = COST_FREE
            self.cost[marks_y, marks_x] = COST_LETHAL
            return

        self._cleared[clears_y, clears_x] = True
        self._marked[clears_y, clears_x] = False
        self._marked[marks_y, marks_x] = True
        self._cleared[marks_y, marks_x] = False
        self._recompose()

    def _recompose(self) -> None:
        if self._static is not None:
            self.cost = self._static.copy()
            # Clearing reveals space through unknown but never erases walls
            # the static map asserts; marks beat everything.
            reveal = self._cleared & (self._static != COST_LETHAL)
        else:
            fill = COST_UNKNOWN if self.params.unknown_is_lethal else COST_FREE
            self.cost = np.full((self.height, self.width), fill, dtype=np.uint8)
            reveal = self._cleared
        self.cost[reveal] = COST_FREE
        self.cost[self._marked] = COST_LETHAL

    def inflate(self) -> None:
        """Spread cost away from lethal cells.

        d = 0 keeps 254; 0 < d <= inscribed_radius becomes 253; beyond that
        cost decays as round(252 * exp(-cost_scaling * (d - r_ins))) out to
        inflation_radius. Unknown cells are left alone; existing higher
        costs are never lowered.
        """
        p = self.params
        lethal = self.cost == COST_LETHAL
        if not lethal.any():
            return
        d_cells = ndimage.distance_transform_edt(~lethal)
        d = d_cells * self.resolution
        new_cost = inflation_cost(d, p.inscribed_radius, p.cost_scaling)
        apply = (d <= p.inflation_radius) & (self.cost != COST_UNKNOWN)
        merged = np.maximum(self.cost.astype(float), new_cost)
        self.cost = np.where(apply, merged, self.cost).astype(np.uint8)

    # -- queries -----------------------------------------------------------

    def cost_at(self, ix: int, iy: int) -> int:
        """Cost with out-of-bounds mapped to the instance's unknown policy."""
        if not self.in_bounds(ix, iy):
            return COST_UNKNOWN
        return int(self.cost[iy, ix])

    def footprint_cost(self, pose: Pose2D, footprint: Footprint | None = None) -> float:
        """Collision check plus traversal cost at a pose.

        The robot center must stay out of inscribed-or-worse cells; the
        footprint body must not cover a lethal cell. Inflation already
        accounts for the body's extent, so covered inscribed cells only
        contribute cost rather than collision.

        The covered set is quantized to the cell lattice: the footprint is
        evaluated from the center of the cell containing the pose. That
        keeps the check identical whether it is run cell-by-cell or as a
        precomputed dilation over the whole grid.

        Returns COLLISION (inf) or the max cost over covered cells.
        """
        fp = footprint or self.params.footprint
        unknown_lethal = self.params.unknown_is_lethal

        cix, ciy = self.world_to_cell(pose.x, pose.y)
        center = self.cost_at(cix, ciy)
        if center == COST_UNKNOWN:
            if unknown_lethal:
                return COLLISION
            center = 252
        if center >= COST_INSCRIBED:
            return COLLISION

        if fp.radius is not None:
            offs = disc_cell_offsets(fp.radius, self.resolution)
            ixs = cix + offs[:, 0]
            iys = ciy + offs[:, 1]
        else:
            snapped_x, snapped_y = self.cell_to_world(cix, ciy)
            snapped = Pose2D(snapped_x, snapped_y, pose.theta)
            r = fp.circumscribed_radius
            n = int(math.ceil(r / self.resolution)) + 1
            rel = np.arange(-n, n + 1)
            gx, gy = np.meshgrid(cix + rel, ciy + rel)
            cx = self.origin.x + (gx + 0.5) * self.resolution
            cy = self.origin.y + (gy + 0.5) * self.resolution
            covered = fp.covers(snapped, cx, cy)
            ixs, iys = gx[covered], gy[covered]

        inside = (ixs >= 0) & (ixs < self.width) & (iys >= 0) & (iys < self.height)
        worst = float(center)
        if (~inside).any():
            if unknown_lethal:
                return COLLISION
            worst = max(worst, 252.0)
        vals = self.cost[iys[inside], ixs[inside]].astype(float)
        if vals.size:
            if (vals == COST_LETHAL).any():
                return COLLISION
            unknown = vals == COST_UNKNOWN
            if unknown.any():
                if unknown_lethal:
                    return COLLISION
                vals = np.where(unknown, 252.0, vals)
            worst = max(worst, float(vals.max()))
        return worst


class LayeredCostmap:
    """Runs the layer pipeline in the canonical order for one instance."""

    def __init__(self, costmap: Costmap):
        self.costmap = costmap
        self.layers_applied: list[str] = []

    def update(
        self,
        robot_pose: Pose2D,
        scan: LaserScan | None = None,
        range_readings: list[RangeReading] | None = None,
        held_ranges: list[tuple[Pose2D, RangeReading]] | None = None,
    ) -> Costmap:
        cm = self.costmap
        self.layers_applied = []
        if cm.rolling:
            cm.reset_window(robot_pose)
        self.layers_applied.append("static")
        if scan is not None:
            cm.mark_scan(robot_pose, scan)
        self.layers_applied.append("obstacles")
        for reading in range_readings or []:
            cm.apply_range(robot_pose, reading)
        # Readings retained from earlier cycles replay against the pose
        # they were taken from, not the current one.
        for past_pose, reading in held_ranges or []:
            cm.apply_range(past_pose, reading)
        self.layers_applied.append("range")
        cm.flush_sensor_evidence()
        cm.inflate()
        self.layers_applied.append("inflation")
        assert tuple(self.layers_applied) == LAYER_ORDER
        return cm
