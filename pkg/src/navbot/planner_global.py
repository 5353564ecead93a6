"""Global route planning on a costmap.

A Dijkstra wavefront expands from the goal over the 8-connected grid,
producing a potential field; the path is then extracted from the start by
steepest descent with bilinear gradient interpolation, which cuts the
grid-axis staircase out of the result.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .costmap import COST_INSCRIBED, COST_UNKNOWN, Costmap
from .geometry import Pose2D

SQRT2 = math.sqrt(2.0)

DEFAULT_COST_FACTOR = 0.8
GOAL_SNAP_RADIUS = 0.25


class PlanningError(Exception):
    pass


class GoalInCollision(PlanningError):
    """Goal cell (and everything within the snap radius) is untraversable."""


class NoPathFound(PlanningError):
    """Start and goal are both valid but not connected."""


@dataclass
class Path:
    """World-frame waypoint list, start first. cost is the potential at the
    start cell: meters weighted by traversal penalties."""

    poses: list[Pose2D]
    cost: float
    goal: Pose2D

    @property
    def length(self) -> float:
        return sum(
            self.poses[i].distance_to(self.poses[i + 1])
            for i in range(len(self.poses) - 1)
        )


def _traversal_cost(cm: Costmap) -> np.ndarray:
    """Per-cell penalty in [0, 252], NaN where untraversable."""
    cost = cm.cost.astype(float)
    blocked = cost >= COST_INSCRIBED
    if not cm.params.unknown_is_lethal:
        unknown = cm.cost == COST_UNKNOWN
        cost = np.where(unknown, 252.0, cost)
        blocked = blocked & ~unknown
    return np.where(blocked, np.nan, cost)


def compute_potential(
    cm: Costmap,
    goal_cell: tuple[int, int],
    cost_factor: float = DEFAULT_COST_FACTOR,
    stop_cell: tuple[int, int] | None = None,
) -> np.ndarray:
    """Dijkstra distance-to-goal over traversable cells.

    Edge weight entering cell n is step_length * (1 + cost_factor *
    penalty(n) / 252) with step_length = resolution or resolution * sqrt(2).
    Unreached cells hold +inf. Expansion stops early once stop_cell has
    been settled, when given.
    """
    penalty = _traversal_cost(cm)
    res = cm.resolution
    height, width = penalty.shape
    pot = np.full((height, width), np.inf)
    gx, gy = goal_cell
    if not cm.in_bounds(gx, gy) or math.isnan(penalty[gy, gx]):
        raise GoalInCollision("goal cell untraversable")
    pot[gy, gx] = 0.0
    heap: list[tuple[float, int, int]] = [(0.0, gx, gy)]
    neighbors = (
        (1, 0, res), (-1, 0, res), (0, 1, res), (0, -1, res),
        (1, 1, res * SQRT2), (1, -1, res * SQRT2),
        (-1, 1, res * SQRT2), (-1, -1, res * SQRT2),
    )
    while heap:
        d, x, y = heapq.heappop(heap)
        if d > pot[y, x]:
            continue
        if stop_cell is not None and (x, y) == stop_cell:
            break
        for dx, dy, step in neighbors:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < width and 0 <= ny < height):
                continue
            pen = penalty[ny, nx]
            if math.isnan(pen):
                continue
            nd = d + step * (1.0 + cost_factor * pen / 252.0)
            if nd < pot[ny, nx]:
                pot[ny, nx] = nd
                heapq.heappush(heap, (nd, nx, ny))
    return pot


def interpolate_potential(pot: np.ndarray, cm: Costmap, x: float, y: float) -> float:
    """Bilinear interpolation over cell-center samples. Corners that carry
    no weight are ignored, so a point exactly on a cell center reads that
    cell's potential even next to unreached cells; +inf when any weighted
    corner is unreached."""
    u = (x - cm.origin.x) / cm.resolution - 0.5
    v = (y - cm.origin.y) / cm.resolution - 0.5
    i0, j0 = int(math.floor(u)), int(math.floor(v))
    fu, fv = u - i0, v - j0
    h, w = pot.shape
    total = 0.0
    for (ii, jj, wgt) in (
        (i0, j0, (1 - fu) * (1 - fv)),
        (i0 + 1, j0, fu * (1 - fv)),
        (i0, j0 + 1, (1 - fu) * fv),
        (i0 + 1, j0 + 1, fu * fv),
    ):
        if wgt <= 1e-12:
            continue
        if not (0 <= ii < w and 0 <= jj < h):
            return math.inf
        p = pot[jj, ii]
        if not math.isfinite(p):
            return math.inf
        total += wgt * p
    return total


def _interp_gradient(pot: np.ndarray, cm: Costmap, x: float, y: float):
    u = (x - cm.origin.x) / cm.resolution - 0.5
    v = (y - cm.origin.y) / cm.resolution - 0.5
    i0, j0 = int(math.floor(u)), int(math.floor(v))
    fu, fv = u - i0, v - j0
    h, w = pot.shape
    if not (0 <= i0 < w - 1 and 0 <= j0 < h - 1):
        return None
    p00 = pot[j0, i0]
    p10 = pot[j0, i0 + 1]
    p01 = pot[j0 + 1, i0]
    p11 = pot[j0 + 1, i0 + 1]
    if not all(map(math.isfinite, (p00, p10, p01, p11))):
        return None
    gx = ((p10 - p00) * (1 - fv) + (p11 - p01) * fv) / cm.resolution
    gy = ((p01 - p00) * (1 - fu) + (p11 - p10) * fu) / cm.resolution
    norm = math.hypot(gx, gy)
    if norm < 1e-12:
        return None
    return gx / norm, gy / norm


def _snap_to_traversable(
    cm: Costmap, penalty: np.ndarray, x: float, y: float, radius: float
) -> tuple[int, int] | None:
    """Nearest traversable cell within radius of the point, or None.
    Deterministic: ordered by (distance, iy, ix)."""
    ix, iy = cm.world_to_cell(x, y)
    if cm.in_bounds(ix, iy) and not math.isnan(penalty[iy, ix]):
        return ix, iy
    r_cells = int(math.ceil(radius / cm.resolution)) + 1
    best = None
    for dy in range(-r_cells, r_cells + 1):
        for dx in range(-r_cells, r_cells + 1):
            nx, ny = ix + dx, iy + dy
            if not cm.in_bounds(nx, ny) or math.isnan(penalty[ny, nx]):
                continue
            cx, cy = cm.cell_to_world(nx, ny)
            d = math.hypot(cx - x, cy - y)
            if d <= radius:
                key = (d, ny, nx)
                if best is None or key < best[0]:
                    best = (key, (nx, ny))
    return best[1] if best else None


def plan(
    cm: Costmap,
    start: Pose2D,
    goal: Pose2D,
    cost_factor: float = DEFAULT_COST_FACTOR,
    snap_radius: float = GOAL_SNAP_RADIUS,
    full_expansion: bool = False,
) -> Path:
    """Plan from start to goal on an inflated costmap.

    Raises GoalInCollision when no traversable cell sits within snap_radius
    of the goal, NoPathFound when the goal region is not connected to the
    start.
    """
    penalty = _traversal_cost(cm)
    goal_cell = _snap_to_traversable(cm, penalty, goal.x, goal.y, snap_radius)
    if goal_cell is None:
        raise GoalInCollision(f"no traversable cell within {snap_radius} m of goal")
    start_cell = _snap_to_traversable(cm, penalty, start.x, start.y, snap_radius)
    if start_cell is None:
        raise NoPathFound("start pose is surrounded by untraversable cells")

    gx, gy = cm.cell_to_world(*goal_cell)
    goal_snapped = Pose2D(gx, gy, goal.theta) if goal_cell != cm.world_to_cell(goal.x, goal.y) else goal

    pot = compute_potential(
        cm, goal_cell, cost_factor, stop_cell=None if full_expansion else start_cell
    )
    sx, sy = start_cell
    if not math.isfinite(pot[sy, sx]):
        raise NoPathFound("goal region is unreachable from start")

    points = _descend(pot, cm, start, start_cell, goal_snapped, goal_cell)
    poses = _points_to_poses(points, goal_snapped)
    return Path(poses=poses, cost=float(pot[sy, sx]), goal=goal_snapped)


def _descend(pot, cm, start: Pose2D, start_cell, goal: Pose2D, goal_cell) -> list:
    res = cm.resolution
    # Begin at the snapped start cell center if the raw start cell differs.
    if cm.world_to_cell(start.x, start.y) == start_cell:
        px, py = start.x, start.y
    else:
        px, py = cm.cell_to_world(*start_cell)
    points = [(px, py)]
    track = interpolate_potential(pot, cm, px, py)
    if not math.isfinite(track):
        track = float(pot[start_cell[1], start_cell[0]])

    height, width = pot.shape
    max_iter = 4 * (height + width) + int(8.0 * track / res) + 64
    gx_w, gy_w = cm.cell_to_world(*goal_cell)

    for _ in range(max_iter):
        if math.hypot(px - gx_w, py - gy_w) <= res:
            break
        stepped = False
        grad = _interp_gradient(pot, cm, px, py)
        if grad is not None:
            nx = px - 0.5 * res * grad[0]
            ny = py - 0.5 * res * grad[1]
            npot = interpolate_potential(pot, cm, nx, ny)
            if npot < track - 1e-12:
                px, py, track = nx, ny, npot
                stepped = True
        if not stepped:
            # Fall back to a discrete downhill cell step.
            cx, cy = cm.world_to_cell(px, py)
            best = None
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    mx, my = cx + dx, cy + dy
                    if not cm.in_bounds(mx, my):
                        continue
                    p = pot[my, mx]
                    if math.isfinite(p) and (best is None or p < best[0]):
                        best = (p, mx, my)
            if best is None or best[0] >= track - 1e-12:
                raise NoPathFound("descent stalled before reaching the goal")
            _, mx, my = best
            px, py = cm.cell_to_world(mx, my)
            track = best[0]
        points.append((px, py))
    else:
        raise NoPathFound("descent exceeded its iteration budget")

    points.append((goal.x, goal.y))
    return points


def _points_to_poses(points: list, goal: Pose2D) -> list[Pose2D]:
    poses = []
    for i, (x, y) in enumerate(points[:-1]):
        nx, ny = points[i + 1]
        theta = math.atan2(ny - y, nx - x) if (nx != x or ny != y) else goal.theta
        poses.append(Pose2D(x, y, theta))
    poses.append(goal)
    return poses
