"""Deterministic fixed-step differential-drive simulator.

The simulator owns ground truth: robot pose, battery, and the world grid.
Everything downstream (mapping, localization, planning) only ever sees
sensor data and odometry. Stepping is exact arc integration, so the same
seed and command sequence reproduces bit-identical state trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    DEFAULT_FOOTPRINT,
    Footprint,
    KinodynamicLimits,
    Pose2D,
    VelocityCommand,
    integrate_unicycle,
    normalize_angle,
)
from .grid import OCCUPIED, OccupancyGrid
from .raycast import cast_ranges


class CommandError(ValueError):
    """Raised for non-finite velocity commands; the sim state is untouched."""


NO_RETURN_EPS = 1e-3


@dataclass(frozen=True)
class LidarConfig:
    """360 one-degree beams by default, planar, body-frame mounted at origin."""

    n_beams: int = 360
    angle_min: float = -math.pi
    range_min: float = 0.1
    range_max: float = 8.0

    @property
    def angle_increment(self) -> float:
        return 2.0 * math.pi / self.n_beams

    @property
    def angle_max(self) -> float:
        return self.angle_min + (self.n_beams - 1) * self.angle_increment


@dataclass(frozen=True)
class LaserScan:
    """One lidar sweep. ranges[i] corresponds to body-frame angle
    angle_min + i * angle_increment. A value above range_max means the beam
    returned nothing."""

    angle_min: float
    angle_increment: float
    range_min: float
    range_max: float
    ranges: np.ndarray
    stamp: float = 0.0

    @property
    def angle_max(self) -> float:
        return self.angle_min + (len(self.ranges) - 1) * self.angle_increment

    @property
    def no_return_value(self) -> float:
        return self.range_max + NO_RETURN_EPS

    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(len(self.ranges))

    def hits(self) -> np.ndarray:
        return self.ranges <= self.range_max


@dataclass(frozen=True)
class UltrasonicConfig:
    """One cone-shaped range sensor, mounted in the body frame.

    The cone is approximated by n_rays evenly spread across the field of
    view; the reading is the shortest hit among them.
    """

    mount: Pose2D
    fov: float = math.radians(30.0)
    range_min: float = 0.02
    range_max: float = 1.0
    n_rays: int = 9


@dataclass(frozen=True)
class RangeReading:
    sensor_index: int
    mount: Pose2D
    fov: float
    range_min: float
    range_max: float
    range: float
    stamp: float = 0.0

    @property
    def is_hit(self) -> bool:
        return self.range <= self.range_max


def default_ultrasonic_ring() -> tuple[UltrasonicConfig, ...]:
    """Three forward cones covering the ground band the lidar cannot see."""
    return (
        UltrasonicConfig(mount=Pose2D(0.15, 0.0, 0.0)),
        UltrasonicConfig(mount=Pose2D(0.10, 0.10, math.pi / 4)),
        UltrasonicConfig(mount=Pose2D(0.10, -0.10, -math.pi / 4)),
    )


@dataclass(frozen=True)
class BatteryConfig:
    """Nominal pack: 30 Ah at a 7.5 A average draw gives 4 h of driving;
    a full charge also takes 4 h. Idle draw is 20% of nominal."""

    capacity_ah: float = 30.0
    nominal_draw_a: float = 7.5
    charge_hours: float = 4.0
    idle_fraction: float = 0.2

    @property
    def nominal_runtime_h(self) -> float:
        return self.capacity_ah / self.nominal_draw_a


@dataclass(frozen=True)
class BatteryState:
    fraction: float
    charging: bool = False

    def time_remaining_h(self, cfg: BatteryConfig) -> float:
        if self.charging:
            return math.inf
        return self.fraction * cfg.capacity_ah / cfg.nominal_draw_a


def step_battery(
    state: BatteryState, cfg: BatteryConfig, speed: float, v_max: float, dt: float
) -> BatteryState:
    if state.charging:
        frac = min(1.0, state.fraction + dt / (cfg.charge_hours * 3600.0))
        return BatteryState(frac, True)
    scale = max(cfg.idle_fraction, abs(speed) / v_max) if v_max > 0 else cfg.idle_fraction
    drained = cfg.nominal_draw_a * dt / 3600.0 / cfg.capacity_ah * scale
    return BatteryState(max(0.0, state.fraction - drained), False)


@dataclass(frozen=True)
class OdometryNoise:
    """Per-step zero-mean Gaussian noise on traveled distance and rotation."""

    sigma_trans: float = 0.0
    sigma_rot: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    limits: KinodynamicLimits = field(default_factory=KinodynamicLimits)
    footprint: Footprint = DEFAULT_FOOTPRINT
    lidar: LidarConfig = field(default_factory=LidarConfig)
    ultrasonic: tuple[UltrasonicConfig, ...] = field(default_factory=default_ultrasonic_ring)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    odometry: OdometryNoise = field(default_factory=OdometryNoise)
    dock_radius: float = 0.3


@dataclass(frozen=True)
class SimState:
    """Immutable snapshot after a tick. velocity is what the base actually
    did this tick, after acceleration limiting and collision blocking."""

    tick: int
    time: float
    true_pose: Pose2D
    odom_pose: Pose2D
    velocity: VelocityCommand
    commanded: VelocityCommand
    battery: BatteryState
    collision: bool = False


class WorldModel:
    """Ground-truth world. Two occupancy layers: the full grid (collisions,
    ultrasonic) and the lidar grid, which omits obstacles below the lidar
    scan plane."""

    def __init__(self, grid: OccupancyGrid, lidar_grid: OccupancyGrid | None = None,
                 dock: Pose2D | None = None):
        self.grid = grid
        self.lidar_grid = lidar_grid if lidar_grid is not None else grid
        self.dock = dock

    @property
    def resolution(self) -> float:
        return self.grid.resolution

    def add_rect_obstacle(self, x0, y0, x1, y1, lidar_visible: bool = True) -> None:
        self.grid.set_rect(x0, y0, x1, y1, OCCUPIED)
        if lidar_visible:
            if self.lidar_grid is not self.grid:
                self.lidar_grid.set_rect(x0, y0, x1, y1, OCCUPIED)
        elif self.lidar_grid is self.grid:
            raise ValueError("world needs a separate lidar grid for low obstacles")


def footprint_overlaps(grid: OccupancyGrid, pose: Pose2D, footprint: Footprint) -> bool:
    """True when any cell whose center the footprint covers is occupied.
    Cells outside the grid count as occupied."""
    r = footprint.circumscribed_radius
    res = grid.resolution
    ix0 = int(math.floor((pose.x - r - grid.origin.x) / res))
    iy0 = int(math.floor((pose.y - r - grid.origin.y) / res))
    ix1 = int(math.floor((pose.x + r - grid.origin.x) / res))
    iy1 = int(math.floor((pose.y + r - grid.origin.y) / res))
    ixs, iys = np.meshgrid(np.arange(ix0, ix1 + 1), np.arange(iy0, iy1 + 1))
    cx = grid.origin.x + (ixs + 0.5) * res
    cy = grid.origin.y + (iys + 0.5) * res
    covered = footprint.covers(pose, cx, cy)
    if not covered.any():
        return False
    ixs, iys = ixs[covered], iys[covered]
    inside = (ixs >= 0) & (ixs < grid.width) & (iys >= 0) & (iys < grid.height)
    if (~inside).any():
        return True
    return bool((grid.cells[iys, ixs] == OCCUPIED).any())


class Simulator:
    """Fixed-step simulator. step() applies one dt of motion; sensors are
    sampled on demand from the current true pose."""

    def __init__(
        self,
        world: WorldModel,
        start_pose: Pose2D,
        config: SimConfig | None = None,
        seed: int = 0,
        battery_fraction: float = 1.0,
    ):
        self.world = world
        self.config = config or SimConfig()
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._charging_requested = False
        if footprint_overlaps(world.grid, start_pose, self.config.footprint):
            raise ValueError("start pose collides with the world")
        self._state = SimState(
            tick=0,
            time=0.0,
            true_pose=start_pose,
            odom_pose=start_pose,
            velocity=VelocityCommand(0.0, 0.0),
            commanded=VelocityCommand(0.0, 0.0),
            battery=BatteryState(battery_fraction, False),
        )

    @property
    def state(self) -> SimState:
        return self._state

    @property
    def time(self) -> float:
        return self._state.time

    def request_charging(self, on: bool) -> None:
        """Charging engages only while the base sits within dock_radius of
        the dock; the request is remembered across ticks."""
        self._charging_requested = on

    def _charging_active(self, pose: Pose2D) -> bool:
        dock = self.world.dock
        if not self._charging_requested or dock is None:
            return False
        return pose.distance_to(dock) <= self.config.dock_radius

    def step(self, command: VelocityCommand) -> SimState:
        if not command.is_finite():
            raise CommandError(f"non-finite command {command}")
        cfg = self.config
        dt = cfg.dt
        prev = self._state

        clamped, _ = command.clamped(cfg.limits)
        dv = cfg.limits.accel_v * dt
        dw = cfg.limits.accel_omega * dt
        v = min(max(clamped.v, prev.velocity.v - dv), prev.velocity.v + dv)
        v = min(max(v, cfg.limits.v_min), cfg.limits.v_max)
        omega = min(max(clamped.omega, prev.velocity.omega - dw), prev.velocity.omega + dw)
        omega = min(max(omega, -cfg.limits.omega_max), cfg.limits.omega_max)

        candidate = integrate_unicycle(prev.true_pose, v, omega, dt)
        collided = footprint_overlaps(self.world.grid, candidate, cfg.footprint)
        if collided:
            new_pose = prev.true_pose
            applied = VelocityCommand(0.0, 0.0)
        else:
            new_pose = candidate
            applied = VelocityCommand(v, omega)

        odom = self._advance_odometry(prev, new_pose)
        charging = self._charging_active(new_pose)
        battery = replace(prev.battery, charging=charging)
        battery = step_battery(battery, cfg.battery, applied.v, cfg.limits.v_max, dt)

        self._state = SimState(
            tick=prev.tick + 1,
            time=prev.time + dt,
            true_pose=new_pose,
            odom_pose=odom,
            velocity=applied,
            commanded=command,
            battery=battery,
            collision=collided,
        )
        return self._state

    def _advance_odometry(self, prev: SimState, new_pose: Pose2D) -> Pose2D:
        noise = self.config.odometry
        if noise.sigma_trans == 0.0 and noise.sigma_rot == 0.0:
            # Noise-free odometry tracks ground truth exactly.
            return new_pose
        dx = new_pose.x - prev.true_pose.x
        dy = new_pose.y - prev.true_pose.y
        dtheta = normalize_angle(new_pose.theta - prev.true_pose.theta)
        c, s = math.cos(-prev.true_pose.theta), math.sin(-prev.true_pose.theta)
        bx = c * dx - s * dy
        by = s * dx + c * dy
        moved = abs(bx) + abs(by) + abs(dtheta) > 1e-12
        if moved:
            bx += self._rng.normal(0.0, noise.sigma_trans)
            dtheta += self._rng.normal(0.0, noise.sigma_rot)
        o = prev.odom_pose
        co, so = math.cos(o.theta), math.sin(o.theta)
        return Pose2D(
            o.x + co * bx - so * by,
            o.y + so * bx + co * by,
            o.theta + dtheta,
        )

    def lidar_scan(self) -> LaserScan:
        cfg = self.config.lidar
        pose = self._state.true_pose
        grid = self.world.lidar_grid
        angles = pose.theta + cfg.angle_min + cfg.angle_increment * np.arange(cfg.n_beams)
        dists = cast_ranges(
            grid.cells == OCCUPIED,
            pose.x,
            pose.y,
            angles,
            cfg.range_max,
            grid.resolution,
            grid.origin.x,
            grid.origin.y,
        )
        no_return = cfg.range_max + NO_RETURN_EPS
        ranges = np.where(
            np.isfinite(dists),
            np.clip(dists, cfg.range_min, cfg.range_max),
            no_return,
        )
        return LaserScan(
            angle_min=cfg.angle_min,
            angle_increment=cfg.angle_increment,
            range_min=cfg.range_min,
            range_max=cfg.range_max,
            ranges=ranges,
            stamp=self._state.time,
        )

    def ultrasonic_readings(self) -> list[RangeReading]:
        pose = self._state.true_pose
        grid = self.world.grid
        out = []
        for idx, cfg in enumerate(self.config.ultrasonic):
            c, s = math.cos(pose.theta), math.sin(pose.theta)
            sx = pose.x + c * cfg.mount.x - s * cfg.mount.y
            sy = pose.y + s * cfg.mount.x + c * cfg.mount.y
            heading = pose.theta + cfg.mount.theta
            angles = heading + np.linspace(-cfg.fov / 2.0, cfg.fov / 2.0, cfg.n_rays)
            dists = cast_ranges(
                grid.cells == OCCUPIED,
                sx,
                sy,
                angles,
                cfg.range_max,
                grid.resolution,
                grid.origin.x,
                grid.origin.y,
            )
            best = float(np.min(dists))
            if math.isfinite(best):
                rng = min(max(best, cfg.range_min), cfg.range_max)
            else:
                rng = cfg.range_max + NO_RETURN_EPS
            out.append(
                RangeReading(
                    sensor_index=idx,
                    mount=cfg.mount,
                    fov=cfg.fov,
                    range_min=cfg.range_min,
                    range_max=cfg.range_max,
                    range=rng,
                    stamp=self._state.time,
                )
            )
        return out
