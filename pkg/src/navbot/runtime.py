"""One robot, fully wired: simulator, costmaps, planners, localization,
executive. The runtime owns the clock; everything advances through
tick(), one fixed sim step at a time, with the control pipeline firing
every control period. Callers that need wall-clock pacing (the serving
mode) wrap tick() in their own loop; tests and the CLI just crank it.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .costmap import Costmap, CostmapParams, LayeredCostmap
from .executive import (
    CycleInputs,
    Executive,
    ExecutiveConfig,
    GoalState,
    Mode,
)
from .geometry import (
    DEFAULT_FOOTPRINT,
    STOP,
    Pose2D,
    VelocityCommand,
)
from .grid import OCCUPIED
from .localization import LikelihoodField, Mcl, MclConfig
from .mapping import MappingSession
from .planner_global import plan as plan_global
from .planner_local import LocalPlanner, LocalPlannerConfig
from .scenario import Scenario
from .simulation import LaserScan, RangeReading, Simulator

LOCAL_WINDOW_M = 4.0
SONAR_HOLD_S = 2.0
SONAR_SLACK_M = 0.15


def unexplained_readings(
    scan: LaserScan,
    readings: list[RangeReading],
    slack: float = SONAR_SLACK_M,
) -> list[RangeReading]:
    """Filter sonar echoes down to the ones the lidar cannot account for.

    A cone echo at the same distance as the nearest lidar return in that
    sector is the same surface seen twice; marking it again only smears a
    crisp lidar obstacle across the cone's width (bad news near narrow
    passages). An echo well short of every lidar return in the sector
    means something below the scan plane: that is the reading worth
    keeping.
    """
    angles = scan.angles()
    out = []
    for r in readings:
        if not r.is_hit or r.range <= r.range_min:
            continue
        d = angles - r.mount.theta
        d = np.arctan2(np.sin(d), np.cos(d))
        sector = scan.ranges[np.abs(d) <= r.fov / 2.0 + 0.1]
        if sector.size == 0:
            out.append(r)
            continue
        # The cone sits forward of the lidar, so its echo comes back
        # shorter than the lidar range to the same surface.
        offset = math.hypot(r.mount.x, r.mount.y)
        if r.range < float(sector.min()) - offset - slack:
            out.append(r)
    return out


@dataclass
class CycleRecord:
    """Everything needed to replay one control cycle offline."""

    time: float
    pose: Pose2D
    velocity: VelocityCommand
    path_xy: np.ndarray | None
    costmap: Costmap
    local_command: VelocityCommand | None
    local_index: int | None


@dataclass
class ScenarioResult:
    name: str
    seed: int
    success: bool
    reason: str
    sim_time: float
    path_length: float
    min_clearance: float
    collisions: int
    battery_used: float
    max_speed_applied: float
    goal_state: str
    mode: str
    events: list[dict] = field(default_factory=list)

    def to_report(self) -> dict:
        """Deterministic run report: wall-clock time deliberately excluded
        so identical seeds produce identical bytes."""
        return {
            "name": self.name,
            "seed": self.seed,
            "success": self.success,
            "reason": self.reason,
            "sim_time": round(self.sim_time, 6),
            "path_length": round(self.path_length, 6),
            "min_clearance": round(self.min_clearance, 6),
            "collisions": self.collisions,
            "battery_used": round(self.battery_used, 9),
            "max_speed_applied": round(self.max_speed_applied, 12),
            "goal_state": self.goal_state,
            "mode": self.mode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_report(), indent=2, sort_keys=True) + "\n"


class Runtime:
    """Builds and steps the full stack for one scenario."""

    def __init__(self, scenario: Scenario, record_cycles: bool = False):
        self.scenario = scenario
        self.world = scenario.world.build()
        self.world.dock = scenario.dock_pose()
        self.sim_config = scenario.sim_config()
        self.sim = Simulator(
            self.world,
            scenario.start_pose(),
            self.sim_config,
            seed=scenario.seed,
            battery_fraction=scenario.initial_battery,
        )

        limits = self.sim_config.limits
        lp_cfg = LocalPlannerConfig(mode=scenario.mode, **scenario.local_planner)
        self.local_planner = LocalPlanner(lp_cfg, limits, DEFAULT_FOOTPRINT)

        global_params = CostmapParams(unknown_is_lethal=True)
        self.global_costmap = Costmap.from_static(self.world.lidar_grid, global_params)
        self.global_layers = LayeredCostmap(self.global_costmap)

        local_params = CostmapParams(unknown_is_lethal=False)
        cells = int(round(LOCAL_WINDOW_M / self.world.resolution))
        self.local_costmap = Costmap(
            self.world.resolution, cells, cells,
            Pose2D(0.0, 0.0, 0.0), local_params, rolling=True,
        )
        self.local_layers = LayeredCostmap(self.local_costmap)

        exec_cfg = ExecutiveConfig(dock=scenario.dock_pose(), **scenario.executive)
        self.executive = Executive(plan_global, self.local_planner, limits, exec_cfg)

        self.mcl: Mcl | None = None
        if scenario.pose_source == "mcl":
            f = LikelihoodField.from_grid(self.world.lidar_grid)
            self.mcl = Mcl(
                f,
                self.world.lidar_grid,
                initial_pose=scenario.start_pose(),
                covariance=(0.1, 0.1, 0.05),
                config=MclConfig(),
                rng=np.random.default_rng(scenario.seed),
            )
            self.mcl.handle_odometry(self.sim.state.odom_pose)

        self.mapping: MappingSession | None = None
        self.map_revision = 0

        self.ticks_per_control = max(
            1, int(round(self.executive.config.control_period / self.sim_config.dt))
        )
        self._command = STOP
        self._sonar_hold: list[tuple[float, Pose2D, RangeReading]] = []
        self._pending_events = sorted(scenario.events, key=lambda e: e.t)
        self._pending_teleop = sorted(scenario.teleop, key=lambda e: e.t)
        self._clearance = self._clearance_grid()

        self.record_cycles = record_cycles
        self.cycle_records: list[CycleRecord] = []
        self.collisions = 0
        self.path_length = 0.0
        self.min_clearance = math.inf
        self.max_speed_applied = 0.0
        self.control_cycles = 0
        self.control_wall_seconds = 0.0
        self._docked_seen = False
        self._battery_at_dock: float | None = None
        self._start_battery = self.sim.state.battery.fraction
        self.executive.subscribe(self._on_event)
        self._events_log: list[dict] = []

    # ---- events ----

    def _on_event(self, event: dict) -> None:
        self._events_log.append({"t": round(self.sim.time, 3), **event})
        if event.get("kind") == "docked":
            self._docked_seen = True
            self._battery_at_dock = self.sim.state.battery.fraction

    def _clearance_grid(self) -> np.ndarray:
        occ = self.world.grid.cells == OCCUPIED
        if not occ.any():
            return np.full(occ.shape, math.inf)
        return ndimage.distance_transform_edt(~occ) * self.world.resolution

    # ---- pose plumbing ----

    def estimated_pose(self) -> Pose2D:
        src = self.scenario.pose_source
        if src == "truth":
            return self.sim.state.true_pose
        if src == "odom":
            return self.sim.state.odom_pose
        pose, _ = self.mcl.estimate()
        return pose

    def pose_covariance(self) -> list[list[float]]:
        if self.mcl is not None:
            _, cov = self.mcl.estimate()
            return [[float(v) for v in row] for row in cov]
        return [[0.0] * 3 for _ in range(3)]

    # ---- stepping ----

    def _apply_world_events(self) -> None:
        now = self.sim.time
        while self._pending_events and self._pending_events[0].t <= now:
            ev = self._pending_events.pop(0)
            self.world.add_rect_obstacle(
                *ev.add_obstacle, lidar_visible=ev.lidar_visible
            )
            self._clearance = self._clearance_grid()
            self._events_log.append(
                {"t": round(now, 3), "kind": "world_obstacle",
                 "rect": list(ev.add_obstacle)}
            )

    def _apply_teleop_script(self) -> None:
        now = self.sim.time
        while self._pending_teleop and self._pending_teleop[0].t <= now:
            ev = self._pending_teleop.pop(0)
            self.executive.teleop_command(VelocityCommand(ev.v, ev.omega), now)

    def _control(self) -> None:
        scan = self.sim.lidar_scan()
        readings = self.sim.ultrasonic_readings()

        if self.mcl is not None:
            self.mcl.handle_odometry(self.sim.state.odom_pose)
            if self.control_cycles % 2 == 0:
                self.mcl.handle_scan(scan)

        pose = self.estimated_pose()
        # Raw sonar cones are too coarse to mark maps directly: a cone
        # arc at the echo distance smears phantom cells across narrow
        # gaps the lidar sees straight through. Only echoes the lidar
        # cannot explain (something below the scan plane) get marked,
        # held briefly so a detour does not lose the obstacle the moment
        # the cone swings off it. Those marks also reach the global map
        # at its 1 Hz refresh, so the planner routes around low
        # obstacles instead of leaving the local planner wedged against
        # a goal line it cannot cross.
        now = self.sim.time
        self._sonar_hold = [e for e in self._sonar_hold if e[0] > now]
        for r in unexplained_readings(scan, readings):
            self._sonar_hold.append((now + SONAR_HOLD_S, pose, r))
        held = [(p, r) for _, p, r in self._sonar_hold]
        if self.control_cycles % 5 == 0:
            self.global_layers.update(pose, scan, None, held_ranges=held)
        self.local_layers.update(pose, scan, None, held_ranges=held)

        if self.mapping is not None:
            self.mapping.integrate_scan(pose, scan)

        inputs = CycleInputs(
            time=self.sim.time,
            pose=pose,
            velocity=self.sim.state.velocity,
            local_costmap=self.local_costmap,
            global_costmap=self.global_costmap,
            battery=self.sim.state.battery,
        )
        t0 = time.perf_counter()
        self._command = self.executive.control_cycle(inputs)
        self.control_wall_seconds += time.perf_counter() - t0
        self.control_cycles += 1

        if self.executive.charging_request is not None:
            self.sim.request_charging(self.executive.charging_request)
            self.executive.charging_request = None

        if self.record_cycles:
            report = self.executive.last_report
            path = self.executive.plan
            self.cycle_records.append(
                CycleRecord(
                    time=self.sim.time,
                    pose=pose,
                    velocity=inputs.velocity,
                    path_xy=(
                        np.array([[p.x, p.y] for p in path.poses])
                        if path is not None else None
                    ),
                    costmap=self.local_costmap.snapshot(),
                    local_command=report.local_command,
                    local_index=report.local_index,
                )
            )

    def tick(self) -> None:
        """Advance exactly one sim step, running the control pipeline
        first whenever this tick starts a control period."""
        self._apply_world_events()
        self._apply_teleop_script()
        if self.sim.state.tick % self.ticks_per_control == 0:
            self._control()
        prev = self.sim.state.true_pose
        state = self.sim.step(self._command)
        self.path_length += prev.distance_to(state.true_pose)
        if state.collision:
            self.collisions += 1
        speed = abs(state.velocity.v)
        if speed > self.max_speed_applied:
            self.max_speed_applied = speed
        ix, iy = self.world.grid.world_to_cell(state.true_pose.x, state.true_pose.y)
        if self.world.grid.in_bounds(ix, iy):
            c = float(self._clearance[iy, ix])
            if c < self.min_clearance:
                self.min_clearance = c

    # ---- whole-run driver ----

    def _expectation_met(self) -> tuple[bool, str]:
        exp = self.scenario.expect
        status = self.executive.status
        if "goal_state" in exp and status.state.value != exp["goal_state"]:
            return False, (
                f"goal_state {status.state.value}"
                + (f" ({status.error})" if status.error else "")
            )
        if "reason" in exp and (status.error or "") != exp["reason"]:
            return False, f"reason {status.error!r} != {exp['reason']!r}"
        if exp.get("docked"):
            if not self._docked_seen:
                return False, "never docked"
            if self._battery_at_dock is not None and self._battery_at_dock < 0.05:
                return False, f"docked too late at {self._battery_at_dock:.3f}"
        if "mode" in exp and self.executive.mode.value != exp["mode"]:
            return False, f"mode {self.executive.mode.value}"
        if "min_battery" in exp:
            if self.sim.state.battery.fraction < exp["min_battery"]:
                return False, "battery below floor"
        return True, "ok"

    def _should_stop(self) -> bool:
        exp = self.scenario.expect
        status = self.executive.status
        if "goal_state" in exp or "reason" in exp:
            if self.scenario.goal is not None and status.state in (
                GoalState.SUCCEEDED, GoalState.ABORTED, GoalState.PREEMPTED,
            ):
                return True
        if exp.get("docked") and self._docked_seen:
            if "mode" not in exp or self.executive.mode.value == exp["mode"]:
                return True
        return False

    def run(self) -> ScenarioResult:
        s = self.scenario
        if s.goal is not None:
            self.executive.set_goal(s.goal_pose())
        max_ticks = int(math.ceil(s.max_sim_time / self.sim_config.dt))
        for _ in range(max_ticks):
            self.tick()
            if self._should_stop():
                # one more control period so stop commands settle
                for _ in range(self.ticks_per_control):
                    self.tick()
                break
        met, reason = self._expectation_met()
        success = met and self.collisions == 0
        if met and self.collisions:
            reason = f"{self.collisions} collisions"
        return ScenarioResult(
            name=s.name,
            seed=s.seed,
            success=success,
            reason=reason,
            sim_time=self.sim.time,
            path_length=self.path_length,
            min_clearance=self.min_clearance,
            collisions=self.collisions,
            battery_used=self._start_battery - self.sim.state.battery.fraction,
            max_speed_applied=self.max_speed_applied,
            goal_state=self.executive.status.state.value,
            mode=s.mode,
            events=self._events_log,
        )

    # ---- mapping lifecycle (driven by the API) ----

    def start_mapping(self) -> None:
        g = self.world.lidar_grid
        self.mapping = MappingSession(
            g.resolution, g.width, g.height, g.origin
        )

    def confirm_mapping(self):
        if self.mapping is None:
            raise ValueError("no mapping session active")
        grid = self.mapping.finalize()
        self.mapping = None
        self.map_revision += 1
        return grid

    def discard_mapping(self) -> None:
        self.mapping = None
