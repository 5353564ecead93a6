"""Scenario files: a JSON description of one world, one robot, one task.

A scenario pins everything a run needs to be reproducible: world
geometry, start/goal/dock poses, sensor and battery settings, the local
planner mode, timed world events, a teleop script, and the expected
outcome. load() and save() round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .geometry import KinodynamicLimits, Pose2D
from .grid import OccupancyGrid
from .simulation import (
    BatteryConfig,
    LidarConfig,
    OdometryNoise,
    SimConfig,
    WorldModel,
)

POSE_SOURCES = ("truth", "odom", "mcl")
PLANNER_MODES = ("dwa", "rollout")


class ScenarioError(ValueError):
    """The scenario file is malformed or inconsistent."""


@dataclass
class ObstacleSpec:
    rect: tuple[float, float, float, float]
    lidar_visible: bool = True


@dataclass
class WorldSpec:
    resolution: float = 0.05
    width: int = 120
    height: int = 120
    origin: tuple[float, float] = (-3.0, -3.0)
    border: bool = True
    obstacles: list[ObstacleSpec] = field(default_factory=list)

    def build(self) -> WorldModel:
        grid = OccupancyGrid.empty(
            self.resolution, self.width, self.height,
            Pose2D(self.origin[0], self.origin[1], 0.0),
        )
        lidar_grid = grid.copy()
        if self.border:
            grid.add_border()
            lidar_grid.add_border()
        world = WorldModel(grid, lidar_grid)
        for ob in self.obstacles:
            world.add_rect_obstacle(*ob.rect, lidar_visible=ob.lidar_visible)
        return world


@dataclass
class WorldEvent:
    """A timed change to the world while the run is in progress."""

    t: float
    add_obstacle: tuple[float, float, float, float]
    lidar_visible: bool = True


@dataclass
class TeleopEvent:
    """One operator joystick message injected at sim time t."""

    t: float
    v: float
    omega: float


@dataclass
class Scenario:
    name: str
    world: WorldSpec = field(default_factory=WorldSpec)
    seed: int = 0
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    goal: tuple[float, float, float] | None = None
    dock: tuple[float, float, float] | None = None
    mode: str = "dwa"
    pose_source: str = "odom"
    max_sim_time: float = 120.0
    expect: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    battery: dict = field(default_factory=dict)
    odometry: tuple[float, float] = (0.0, 0.0)
    local_planner: dict = field(default_factory=dict)
    executive: dict = field(default_factory=dict)
    events: list[WorldEvent] = field(default_factory=list)
    teleop: list[TeleopEvent] = field(default_factory=list)
    initial_battery: float = 1.0

    def __post_init__(self):
        if self.mode not in PLANNER_MODES:
            raise ScenarioError(f"mode must be one of {PLANNER_MODES}")
        if self.pose_source not in POSE_SOURCES:
            raise ScenarioError(f"pose_source must be one of {POSE_SOURCES}")
        if self.max_sim_time <= 0:
            raise ScenarioError("max_sim_time must be positive")
        if not 0.0 < self.initial_battery <= 1.0:
            raise ScenarioError("initial_battery must be in (0, 1]")

    def start_pose(self) -> Pose2D:
        return Pose2D(*self.start)

    def goal_pose(self) -> Pose2D | None:
        return Pose2D(*self.goal) if self.goal is not None else None

    def dock_pose(self) -> Pose2D | None:
        return Pose2D(*self.dock) if self.dock is not None else None

    def sim_config(self) -> SimConfig:
        return SimConfig(
            limits=KinodynamicLimits(**self.limits),
            battery=BatteryConfig(**self.battery),
            odometry=OdometryNoise(*self.odometry),
            lidar=LidarConfig(),
        )


def save(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(s), indent=2, sort_keys=True) + "\n")


def _pose3(value, what: str) -> tuple[float, float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ScenarioError(f"{what} must be [x, y, theta]")
    return tuple(float(v) for v in value)


def from_dict(d: dict) -> Scenario:
    if "name" not in d:
        raise ScenarioError("scenario needs a name")
    try:
        world_d = dict(d.get("world", {}))
        obstacles = [
            ObstacleSpec(tuple(o["rect"]), bool(o.get("lidar_visible", True)))
            for o in world_d.pop("obstacles", [])
        ]
        world = WorldSpec(
            **{**world_d, "origin": tuple(world_d.get("origin", (-3.0, -3.0)))},
        )
        world.obstacles = obstacles
        events = [
            WorldEvent(
                float(e["t"]),
                tuple(e["add_obstacle"]),
                bool(e.get("lidar_visible", True)),
            )
            for e in d.get("events", [])
        ]
        teleop = [
            TeleopEvent(float(e["t"]), float(e["v"]), float(e["omega"]))
            for e in d.get("teleop", [])
        ]
        return Scenario(
            name=d["name"],
            world=world,
            seed=int(d.get("seed", 0)),
            start=_pose3(d.get("start", (0.0, 0.0, 0.0)), "start"),
            goal=_pose3(d["goal"], "goal") if d.get("goal") is not None else None,
            dock=_pose3(d["dock"], "dock") if d.get("dock") is not None else None,
            mode=d.get("mode", "dwa"),
            pose_source=d.get("pose_source", "odom"),
            max_sim_time=float(d.get("max_sim_time", 120.0)),
            expect=dict(d.get("expect", {})),
            limits=dict(d.get("limits", {})),
            battery=dict(d.get("battery", {})),
            odometry=tuple(d.get("odometry", (0.0, 0.0))),
            local_planner=dict(d.get("local_planner", {})),
            executive=dict(d.get("executive", {})),
            events=events,
            teleop=teleop,
            initial_battery=float(d.get("initial_battery", 1.0)),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"bad scenario: {e}") from e


def load(path: str | Path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON at byte {e.pos}: {e.msg}") from e
    return from_dict(d)
