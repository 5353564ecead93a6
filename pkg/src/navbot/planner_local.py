"""Sampling-based local control.

Two sampling policies share one pipeline. The short-window policy ("dwa")
samples velocities reachable within one control period; the long-window
policy ("rollout") samples everything reachable over the whole forward
simulation horizon. Either way each sampled command is rolled out as a
constant-velocity arc and scored against the global path, the goal, and
the local costmap; the cheapest legal trajectory wins.

Sample density is anchored to the full velocity space: the configured
counts describe a grid over [v_min, v_max] x [-omega_max, omega_max], and
each window is sampled at that spacing. A smaller window therefore costs
proportionally fewer rollouts, which is the entire practical advantage of
the short-window policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .costmap import (
    COLLISION,
    COST_INSCRIBED,
    COST_LETHAL,
    COST_UNKNOWN,
    Costmap,
    disc_cell_offsets,
)
from .geometry import (
    Footprint,
    KinodynamicLimits,
    Pose2D,
    VelocityCommand,
    angle_diff,
    integrate_unicycle_array,
)

MODES = ("dwa", "rollout")


class NoValidCommand(Exception):
    """Every sampled trajectory collides; the caller should recover."""


@dataclass(frozen=True)
class LocalPlannerConfig:
    mode: str = "dwa"
    sim_time: float = 1.7
    sim_granularity: float = 0.05
    control_period: float = 0.2
    samples_v: int = 11
    samples_omega: int = 21
    w_path: float = 32.0
    w_goal: float = 24.0
    w_obstacle: float = 0.01
    goal_xy_tolerance: float = 0.15
    goal_yaw_tolerance: float = 0.15

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.sim_time < self.control_period:
            raise ValueError("sim_time must cover at least one control period")
        if self.sim_granularity <= 0 or self.sim_time < self.sim_granularity:
            raise ValueError("bad sim granularity")
        if self.samples_v < 2 or self.samples_omega < 2:
            raise ValueError("need at least 2 samples per axis")

    @property
    def rollout_steps(self) -> int:
        return int(round(self.sim_time / self.sim_granularity))


def velocity_window(
    velocity: VelocityCommand,
    limits: KinodynamicLimits,
    cfg: LocalPlannerConfig,
    mode: str | None = None,
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Reachable velocity intervals ((v_lo, v_hi), (w_lo, w_hi)).

    The horizon is one control period for "dwa" and the full simulation
    time for "rollout"; both intersect with the static limits.
    """
    m = mode or cfg.mode
    if m not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    horizon = cfg.control_period if m == "dwa" else cfg.sim_time
    v_lo = max(limits.v_min, velocity.v - limits.accel_v * horizon)
    v_hi = min(limits.v_max, velocity.v + limits.accel_v * horizon)
    w_lo = max(-limits.omega_max, velocity.omega - limits.accel_omega * horizon)
    w_hi = min(limits.omega_max, velocity.omega + limits.accel_omega * horizon)
    if v_lo > v_hi:
        v_lo = v_hi = min(max(velocity.v, limits.v_min), limits.v_max)
    if w_lo > w_hi:
        w_lo = w_hi = min(max(velocity.omega, -limits.omega_max), limits.omega_max)
    return (v_lo, v_hi), (w_lo, w_hi)


def _sample_axis(lo: float, hi: float, full_span: float, n_cfg: int) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    if full_span <= 0:
        return np.linspace(lo, hi, n_cfg)
    frac = min(1.0, (hi - lo) / full_span)
    n = max(2, int(round(frac * (n_cfg - 1))) + 1)
    return np.linspace(lo, hi, min(n, n_cfg))


def command_grid(
    v_range: tuple[float, float],
    omega_range: tuple[float, float],
    limits: KinodynamicLimits,
    cfg: LocalPlannerConfig,
) -> np.ndarray:
    """Uniform (v, omega) grid over the window, v-major, shape (N, 2).

    The configured sample counts set the grid density over the full
    velocity space; a window covering a fraction of an axis gets a
    proportional share of that axis's samples (never fewer than the two
    endpoints). A full-space window therefore yields exactly
    samples_v x samples_omega commands, and a narrower one yields fewer,
    at the same spacing.
    """
    v_samples = _sample_axis(
        v_range[0], v_range[1], limits.v_max - limits.v_min, cfg.samples_v
    )
    w_samples = _sample_axis(
        omega_range[0], omega_range[1], 2.0 * limits.omega_max, cfg.samples_omega
    )
    vv, ww = np.meshgrid(v_samples, w_samples, indexing="ij")
    return np.column_stack([vv.ravel(), ww.ravel()])


def sample_commands(
    velocity: VelocityCommand,
    limits: KinodynamicLimits,
    cfg: LocalPlannerConfig,
    mode: str | None = None,
) -> np.ndarray:
    """(N, 2) candidate commands: the window grid plus appended in-place
    rotation samples (v=0, omega != 0), so turning out of trouble is
    always in the candidate set. Exact duplicates keep their first
    occurrence."""
    v_range, w_range = velocity_window(velocity, limits, cfg, mode)
    grid = command_grid(v_range, w_range, limits, cfg)

    commands: list[tuple[float, float]] = []
    seen = set()
    for v, w in grid:
        key = (float(v), float(w))
        if key not in seen:
            seen.add(key)
            commands.append(key)
    for w in np.unique(grid[:, 1]):
        if w == 0.0:
            continue
        key = (0.0, float(w))
        if key not in seen:
            seen.add(key)
            commands.append(key)
    return np.array(commands, dtype=float)


def rollout_poses(
    pose: Pose2D, commands: np.ndarray, cfg: LocalPlannerConfig
) -> np.ndarray:
    """(N, steps, 3) constant-velocity arc rollouts for every command."""
    start = np.array([pose.x, pose.y, pose.theta], dtype=float)
    return integrate_unicycle_array(
        start, commands[:, 0], commands[:, 1], cfg.sim_granularity, cfg.rollout_steps
    )


def goal_reached(pose: Pose2D, goal: Pose2D, cfg: LocalPlannerConfig) -> bool:
    """Both tolerances are inclusive."""
    if pose.distance_to(goal) > cfg.goal_xy_tolerance:
        return False
    return abs(angle_diff(goal.theta, pose.theta)) <= cfg.goal_yaw_tolerance


@dataclass
class LocalPlanResult:
    command: VelocityCommand
    index: int
    total: float
    path_dist: float
    goal_dist: float
    obstacle_cost: float
    commands: np.ndarray
    totals: np.ndarray
    illegal: np.ndarray


class LocalPlanner:
    """Scores sampled trajectories against path, goal, and costmap.

    Scoring grids are rebuilt per cycle: distance-to-path and
    distance-to-goal are Euclidean distance transforms over the local
    window seeded by the path cells and the in-window goal cell. A
    trajectory is illegal if any rolled-out pose fails the footprint
    check. Cost is w_path * path_dist + w_goal * goal_dist +
    w_obstacle * max_footprint_cost; ties prefer faster, then straighter,
    then earlier samples.
    """

    def __init__(self, cfg: LocalPlannerConfig, limits: KinodynamicLimits,
                 footprint: Footprint):
        self.cfg = cfg
        self.limits = limits
        self.footprint = footprint

    def local_goal_index(self, path_xy: np.ndarray, cm: Costmap) -> int:
        """Index of the path pose to chase: the last one inside the window,
        or the nearest one if the path never enters it."""
        x0, y0 = cm.origin.x, cm.origin.y
        x1 = x0 + cm.width * cm.resolution
        y1 = y0 + cm.height * cm.resolution
        inside = (
            (path_xy[:, 0] >= x0) & (path_xy[:, 0] < x1)
            & (path_xy[:, 1] >= y0) & (path_xy[:, 1] < y1)
        )
        if inside.any():
            return int(np.nonzero(inside)[0][-1])
        cx = x0 + cm.width * cm.resolution / 2.0
        cy = y0 + cm.height * cm.resolution / 2.0
        return int(np.argmin(np.hypot(path_xy[:, 0] - cx, path_xy[:, 1] - cy)))

    def _distance_grids(self, path_xy: np.ndarray, cm: Costmap):
        h, w = cm.height, cm.width
        ix = np.floor((path_xy[:, 0] - cm.origin.x) / cm.resolution).astype(int)
        iy = np.floor((path_xy[:, 1] - cm.origin.y) / cm.resolution).astype(int)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)

        path_mask = np.zeros((h, w), dtype=bool)
        path_mask[iy[ok], ix[ok]] = True
        if path_mask.any():
            path_dist = ndimage.distance_transform_edt(~path_mask) * cm.resolution
        else:
            path_dist = None

        gi = self.local_goal_index(path_xy, cm)
        gx = min(max(ix[gi], 0), w - 1)
        gy = min(max(iy[gi], 0), h - 1)
        goal_mask = np.zeros((h, w), dtype=bool)
        goal_mask[gy, gx] = True
        goal_dist = ndimage.distance_transform_edt(~goal_mask) * cm.resolution
        if path_dist is None:
            path_dist = goal_dist
        return path_dist, goal_dist

    def _legality_grids(self, cm: Costmap):
        """Padded lookup grids mirroring Costmap.footprint_cost cell by cell."""
        offs = disc_cell_offsets(self.footprint.radius, cm.resolution)
        pad = int(np.max(np.abs(offs))) + 1
        permissive = not cm.params.unknown_is_lethal

        cost_p = np.pad(cm.cost, pad, constant_values=COST_UNKNOWN).astype(np.int16)
        unknown = cost_p == COST_UNKNOWN
        lethal = cost_p == COST_LETHAL
        if permissive:
            eff = np.where(unknown, 252, cost_p)
            body_blocked = lethal
        else:
            eff = cost_p
            body_blocked = lethal | unknown

        struct = np.zeros((2 * pad + 1, 2 * pad + 1), dtype=bool)
        struct[offs[:, 1] + pad, offs[:, 0] + pad] = True
        body_hit = ndimage.binary_dilation(body_blocked, structure=struct)
        body_max = ndimage.grey_dilation(
            np.where(body_blocked, COST_LETHAL, eff), footprint=struct
        )
        center_blocked = eff >= COST_INSCRIBED
        return pad, center_blocked, body_hit, body_max

    def compute(
        self,
        pose: Pose2D,
        velocity: VelocityCommand,
        path_xy: np.ndarray,
        cm: Costmap,
        mode: str | None = None,
    ) -> LocalPlanResult:
        if self.footprint.radius is None:
            raise NotImplementedError("vectorized scoring expects a disc footprint")
        cfg = self.cfg
        commands = sample_commands(velocity, self.limits, cfg, mode)
        poses = rollout_poses(pose, commands, cfg)
        n, steps, _ = poses.shape

        pad, center_blocked, body_hit, body_max = self._legality_grids(cm)
        path_dist, goal_dist = self._distance_grids(path_xy, cm)

        ix = np.floor((poses[:, :, 0] - cm.origin.x) / cm.resolution).astype(int) + pad
        iy = np.floor((poses[:, :, 1] - cm.origin.y) / cm.resolution).astype(int) + pad
        ix = np.clip(ix, 0, cm.width + 2 * pad - 1)
        iy = np.clip(iy, 0, cm.height + 2 * pad - 1)

        illegal = center_blocked[iy, ix].any(axis=1) | body_hit[iy, ix].any(axis=1)
        obstacle = body_max[iy, ix].max(axis=1).astype(float)

        end_ix = np.clip(ix[:, -1] - pad, 0, cm.width - 1)
        end_iy = np.clip(iy[:, -1] - pad, 0, cm.height - 1)
        pd = path_dist[end_iy, end_ix]
        gd = goal_dist[end_iy, end_ix]
        totals = cfg.w_path * pd + cfg.w_goal * gd + cfg.w_obstacle * obstacle

        best = None
        for i in range(n):
            if illegal[i]:
                continue
            key = (totals[i], -abs(commands[i, 0]), abs(commands[i, 1]), i)
            if best is None or key < best:
                best = key
        if best is None:
            raise NoValidCommand("all sampled trajectories collide")
        i = best[3]
        return LocalPlanResult(
            command=VelocityCommand(float(commands[i, 0]), float(commands[i, 1])),
            index=i,
            total=float(totals[i]),
            path_dist=float(pd[i]),
            goal_dist=float(gd[i]),
            obstacle_cost=float(obstacle[i]),
            commands=commands,
            totals=totals,
            illegal=illegal,
        )
