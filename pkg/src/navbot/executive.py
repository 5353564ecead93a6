"""Goal lifecycle and command arbitration.

The executive is the only producer of velocity commands. Every cycle it
looks at one immutable snapshot (pose, velocity, costmaps, battery,
clock) and emits exactly one command, whatever the operating mode. A
single safety gate sits between every candidate command and the base:
the command's constant-velocity forward simulation over the gate
horizon, extended by the distance needed to brake to a stop, must stay
collision-free on the current local costmap.

Goal states move through an explicit transition table so that every
(state, event) pair is defined; unlisted pairs keep their state. That
makes the machine fuzzable: no event sequence can reach an undefined
transition.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .costmap import COLLISION, Costmap
from .geometry import (
    STOP,
    KinodynamicLimits,
    Pose2D,
    VelocityCommand,
    angle_diff,
    integrate_unicycle_array,
)
from .planner_global import GoalInCollision, NoPathFound, Path
from .planner_local import LocalPlanner, NoValidCommand, goal_reached
from .simulation import BatteryState


class Mode(Enum):
    AUTONOMOUS = "AUTONOMOUS"
    TELEOP = "TELEOP"
    DOCKING = "DOCKING"
    ESTOP = "ESTOP"


class GoalState(Enum):
    IDLE = "IDLE"
    PLANNING = "PLANNING"
    CONTROLLING = "CONTROLLING"
    RECOVERY = "RECOVERY"
    SUCCEEDED = "SUCCEEDED"
    ABORTED = "ABORTED"
    PREEMPTED = "PREEMPTED"


class Event(Enum):
    SET_GOAL = "SET_GOAL"
    PREEMPT = "PREEMPT"
    PLAN_OK = "PLAN_OK"
    PLAN_FAIL = "PLAN_FAIL"
    GOAL_IN_COLLISION = "GOAL_IN_COLLISION"
    CONTROL_FAIL = "CONTROL_FAIL"
    STAGNATION = "STAGNATION"
    RECOVERY_EXHAUSTED = "RECOVERY_EXHAUSTED"
    REACHED = "REACHED"


TERMINAL_STATES = (GoalState.SUCCEEDED, GoalState.ABORTED, GoalState.PREEMPTED)


class ModeError(Exception):
    """Operation not allowed in the current operating mode."""

# Explicit rows only where the state actually changes; handle_event
# defaults every other (state, event) pair to "stay". SET_GOAL is the
# one event that restarts the machine from anywhere.
_TRANSITIONS: dict[tuple[GoalState, Event], GoalState] = {
    (GoalState.PLANNING, Event.PLAN_OK): GoalState.CONTROLLING,
    (GoalState.PLANNING, Event.PLAN_FAIL): GoalState.RECOVERY,
    (GoalState.PLANNING, Event.GOAL_IN_COLLISION): GoalState.ABORTED,
    (GoalState.CONTROLLING, Event.CONTROL_FAIL): GoalState.RECOVERY,
    (GoalState.CONTROLLING, Event.STAGNATION): GoalState.RECOVERY,
    (GoalState.CONTROLLING, Event.REACHED): GoalState.SUCCEEDED,
    (GoalState.CONTROLLING, Event.GOAL_IN_COLLISION): GoalState.ABORTED,
    (GoalState.RECOVERY, Event.PLAN_OK): GoalState.CONTROLLING,
    (GoalState.RECOVERY, Event.RECOVERY_EXHAUSTED): GoalState.ABORTED,
    (GoalState.RECOVERY, Event.GOAL_IN_COLLISION): GoalState.ABORTED,
}


def handle_event(state: GoalState, event: Event) -> GoalState:
    """Total transition function over GoalState x Event."""
    if event is Event.SET_GOAL:
        return GoalState.PLANNING
    if event is Event.PREEMPT:
        return GoalState.PREEMPTED if state not in TERMINAL_STATES else state
    return _TRANSITIONS.get((state, event), state)


@dataclass(frozen=True)
class GoalStatus:
    state: GoalState = GoalState.IDLE
    goal: Pose2D | None = None
    attempts: int = 0
    error: str | None = None


@dataclass(frozen=True)
class CycleInputs:
    """Immutable snapshot the executive reads each control cycle."""

    time: float
    pose: Pose2D
    velocity: VelocityCommand
    local_costmap: Costmap
    global_costmap: Costmap
    battery: BatteryState


@dataclass(frozen=True)
class CycleReport:
    command: VelocityCommand
    mode: Mode
    goal: GoalStatus
    gate_rejected: bool = False
    teleop_clamped: bool = False
    teleop_stale: bool = False
    local_command: VelocityCommand | None = None
    local_index: int | None = None


@dataclass
class ExecutiveConfig:
    control_period: float = 0.2
    replan_period: float = 1.0
    stagnation_window: float = 5.0
    stagnation_min_progress: float = 0.05
    gate_horizon: float = 0.5
    gate_granularity: float = 0.05
    teleop_deadman: float = 0.5
    recovery_rotation_speed: float = 0.5
    battery_low: float = 0.15
    battery_resume: float = 0.95
    dock: Pose2D | None = None


def safety_gate(
    cmd: VelocityCommand,
    pose: Pose2D,
    cm: Costmap,
    limits: KinodynamicLimits,
    horizon: float = 0.5,
    granularity: float = 0.05,
) -> bool:
    """True iff the command is safe to apply right now.

    Simulates the command held constant for the horizon, then keeps
    following the same arc for the extra distance a full-braking stop
    would need (v^2 / 2a as extra time v / 2a). A command that cannot
    brake to a stop without touching lethal space is rejected even if
    the bare horizon is clear.
    """
    if cmd.v == 0.0 and cmd.omega == 0.0:
        return True
    tail = abs(cmd.v) / (2.0 * limits.accel_v) if limits.accel_v > 0 else 0.0
    total = horizon + tail
    steps = max(1, int(math.ceil(total / granularity)))
    poses = integrate_unicycle_array(
        np.array([pose.x, pose.y, pose.theta]),
        np.array([cmd.v]),
        np.array([cmd.omega]),
        total / steps,
        steps,
    )[0]
    for x, y, theta in poses:
        if cm.footprint_cost(Pose2D(x, y, theta)) == COLLISION:
            return False
    return True


class Executive:
    """Owns mode, goal state, recovery, and the per-cycle command choice.

    Collaborators come in as callables so the machine can be driven with
    stubs: plan_fn(costmap, start, goal) -> Path raising the planner
    errors, and a LocalPlanner for command scoring.
    """

    def __init__(
        self,
        plan_fn,
        local_planner: LocalPlanner,
        limits: KinodynamicLimits,
        config: ExecutiveConfig | None = None,
    ):
        self.plan_fn = plan_fn
        self.local_planner = local_planner
        self.limits = limits
        self.config = config or ExecutiveConfig()
        self.mode = Mode.AUTONOMOUS
        self.status = GoalStatus()
        self.plan: Path | None = None
        self.events: list[dict] = []
        self._subscribers: list = []
        self._recovery_stage = 0
        self._rotation_accum = 0.0
        self._progress: deque[tuple[float, Pose2D]] = deque()
        self._last_plan_time = -math.inf
        self._teleop_cmd: VelocityCommand | None = None
        self._teleop_stamp = -math.inf
        self._low_battery_announced = False
        self.charging_request: bool | None = None
        self.last_report: CycleReport | None = None
        self._last_local = None
        self._gate_rejected = False

    # ---- event plumbing ----

    def subscribe(self, callback) -> None:
        self._subscribers.append(callback)

    def _emit(self, kind: str, **data) -> None:
        event = {"kind": kind, **data}
        self.events.append(event)
        for cb in self._subscribers:
            cb(event)

    def _goal_event(self, event: Event, error: str | None = None) -> None:
        new_state = handle_event(self.status.state, event)
        if new_state is not self.status.state:
            self.status = replace(self.status, state=new_state, error=error)
            self._emit("goal_state", state=new_state.value, error=error)

    # ---- operator inputs ----

    def set_goal(self, goal: Pose2D) -> GoalStatus:
        if self.mode is not Mode.AUTONOMOUS:
            raise ModeError(f"goals require AUTONOMOUS mode, not {self.mode.value}")
        self._preempt_active()
        self.status = GoalStatus(state=GoalState.PLANNING, goal=goal)
        self._reset_goal_tracking()
        self._emit("goal_accepted", x=goal.x, y=goal.y, theta=goal.theta)
        return self.status

    def cancel_goal(self) -> GoalStatus:
        self._preempt_active()
        return self.status

    def set_mode(self, mode: Mode) -> None:
        if mode is self.mode:
            return
        if mode in (Mode.TELEOP, Mode.ESTOP):
            self._preempt_active()
        if self.mode is Mode.DOCKING and mode is not Mode.DOCKING:
            self.charging_request = False
        self.mode = mode
        self._teleop_cmd = None
        self._emit("mode", mode=mode.value)

    def teleop_command(self, cmd: VelocityCommand, stamp: float) -> None:
        """Operator intent is authoritative: a teleop command flips the
        robot into TELEOP (preempting any goal) unless e-stopped."""
        if self.mode is Mode.ESTOP:
            return
        if self.mode is not Mode.TELEOP:
            self.set_mode(Mode.TELEOP)
        if stamp >= self._teleop_stamp:
            self._teleop_cmd = cmd
            self._teleop_stamp = stamp

    def estop(self) -> None:
        self.set_mode(Mode.ESTOP)

    # ---- helpers ----

    def _preempt_active(self) -> None:
        if self.status.state not in TERMINAL_STATES and self.status.state is not GoalState.IDLE:
            self._goal_event(Event.PREEMPT)
        self.plan = None
        self._recovery_stage = 0
        self._progress.clear()

    def _reset_goal_tracking(self) -> None:
        self.plan = None
        self._recovery_stage = 0
        self._rotation_accum = 0.0
        self._progress.clear()
        self._last_plan_time = -math.inf

    def _gate(self, cmd: VelocityCommand, inp: CycleInputs) -> VelocityCommand:
        cfg = self.config
        if safety_gate(
            cmd, inp.pose, inp.local_costmap, self.limits,
            cfg.gate_horizon, cfg.gate_granularity,
        ):
            self._gate_rejected = False
            return cmd
        self._gate_rejected = True
        return STOP

    def _try_plan(self, inp: CycleInputs) -> bool:
        """Run the global planner; returns True and stores the plan on
        success, drives the state machine on failure."""
        goal = self.status.goal
        try:
            self.plan = self.plan_fn(inp.global_costmap, inp.pose, goal)
        except GoalInCollision as e:
            self._goal_event(Event.GOAL_IN_COLLISION, error=type(e).__name__)
            return False
        except NoPathFound as e:
            self._goal_event(Event.PLAN_FAIL, error=type(e).__name__)
            return False
        self._last_plan_time = inp.time
        self._goal_event(Event.PLAN_OK)
        return True

    def _stagnating(self, inp: CycleInputs) -> bool:
        cfg = self.config
        self._progress.append((inp.time, inp.pose))
        while (
            len(self._progress) > 1
            and inp.time - self._progress[1][0] >= cfg.stagnation_window
        ):
            self._progress.popleft()
        t0, p0 = self._progress[0]
        if inp.time - t0 < cfg.stagnation_window:
            return False
        return inp.pose.distance_to(p0) < cfg.stagnation_min_progress

    def _battery_watch(self, inp: CycleInputs) -> None:
        cfg = self.config
        frac = inp.battery.fraction
        if self.mode is Mode.DOCKING:
            if inp.battery.charging and frac >= cfg.battery_resume:
                self.charging_request = False
                self.status = GoalStatus()
                self.mode = Mode.AUTONOMOUS
                self._emit("charged", fraction=frac)
                self._emit("mode", mode=self.mode.value)
            return
        if frac >= cfg.battery_low:
            self._low_battery_announced = False
            return
        if self.mode is not Mode.AUTONOMOUS:
            # Operator keeps authority; just tell them once per crossing.
            if not self._low_battery_announced:
                self._emit("low_battery", fraction=frac)
                self._low_battery_announced = True
            return
        if cfg.dock is None:
            if not self._low_battery_announced:
                self._emit("low_battery", fraction=frac)
                self._low_battery_announced = True
            return
        self._preempt_active()
        self.mode = Mode.DOCKING
        self.status = GoalStatus(state=GoalState.PLANNING, goal=cfg.dock)
        self._reset_goal_tracking()
        self._emit("low_battery", fraction=frac)
        self._emit("mode", mode=self.mode.value)

    # ---- the control cycle ----

    def control_cycle(self, inp: CycleInputs) -> VelocityCommand:
        self._gate_rejected = False
        self._last_local = None
        teleop_clamped = False
        teleop_stale = False
        self._battery_watch(inp)

        if self.mode is Mode.ESTOP:
            cmd = STOP
        elif self.mode is Mode.TELEOP:
            cmd, teleop_clamped, teleop_stale = self._teleop_cycle(inp)
        else:
            cmd = self._goal_cycle(inp)

        self.last_report = CycleReport(
            command=cmd,
            mode=self.mode,
            goal=self.status,
            gate_rejected=self._gate_rejected,
            teleop_clamped=teleop_clamped,
            teleop_stale=teleop_stale,
            local_command=self._last_local.command if self._last_local else None,
            local_index=self._last_local.index if self._last_local else None,
        )
        return cmd

    def _teleop_cycle(self, inp: CycleInputs):
        cfg = self.config
        if (
            self._teleop_cmd is None
            or inp.time - self._teleop_stamp > cfg.teleop_deadman
        ):
            return STOP, False, True
        cmd, clamped = self._teleop_cmd.clamped(self.limits)
        return self._gate(cmd, inp), clamped, False

    def _goal_cycle(self, inp: CycleInputs) -> VelocityCommand:
        cfg = self.config
        if self.status.state is GoalState.PLANNING:
            if not self._try_plan(inp):
                return self._recovery_or_stop(inp)
        if self.status.state is GoalState.RECOVERY:
            return self._recovery_cycle(inp)
        if self.status.state is not GoalState.CONTROLLING:
            return STOP

        goal = self.status.goal
        if goal_reached(inp.pose, goal, self.local_planner.cfg):
            self._goal_event(Event.REACHED)
            self._emit("goal_reached", x=goal.x, y=goal.y)
            if self.mode is Mode.DOCKING:
                self.charging_request = True
                self._emit("docked")
            return STOP

        # Position reached but heading off: finish with an in-place
        # rotation rather than asking the planner to orbit the goal.
        lp_cfg = self.local_planner.cfg
        if inp.pose.distance_to(goal) <= lp_cfg.goal_xy_tolerance:
            self._progress.clear()
            err = angle_diff(goal.theta, inp.pose.theta)
            spin = math.copysign(
                min(self.limits.omega_max, max(0.3, abs(err))), err
            )
            return self._gate(VelocityCommand(0.0, spin), inp)

        if inp.time - self._last_plan_time >= cfg.replan_period:
            # Refresh the plan against what the sensors found; keep the
            # old plan if the refresh fails and let recovery sort it out.
            try:
                self.plan = self.plan_fn(inp.global_costmap, inp.pose, goal)
                self._last_plan_time = inp.time
            except (NoPathFound, GoalInCollision):
                self._last_plan_time = inp.time

        if self._stagnating(inp):
            self._goal_event(Event.STAGNATION)
            self._enter_recovery()
            return self._recovery_cycle(inp)

        path_xy = np.array([[p.x, p.y] for p in self.plan.poses])
        try:
            result = self.local_planner.compute(
                inp.pose, inp.velocity, path_xy, inp.local_costmap
            )
        except NoValidCommand:
            self._goal_event(Event.CONTROL_FAIL, error="NoValidCommand")
            self._enter_recovery()
            return self._recovery_cycle(inp)
        self._last_local = result
        return self._gate(result.command, inp)

    def _recovery_or_stop(self, inp: CycleInputs) -> VelocityCommand:
        if self.status.state is GoalState.RECOVERY:
            self._enter_recovery(skip_first_replan=True)
            return self._recovery_cycle(inp)
        return STOP

    def _enter_recovery(self, skip_first_replan: bool = False) -> None:
        self.status = replace(self.status, attempts=self.status.attempts + 1)
        # Stage 1 replans immediately; entering recovery BECAUSE a plan
        # just failed starts at the rotation instead of replanning twice.
        self._recovery_stage = 2 if skip_first_replan else 1
        self._rotation_accum = 0.0
        self._progress.clear()
        self._emit("recovery", attempt=self.status.attempts)

    def _recovery_cycle(self, inp: CycleInputs) -> VelocityCommand:
        cfg = self.config
        if self._recovery_stage == 0:
            self._enter_recovery()
        if self._recovery_stage == 1:
            if self._try_plan(inp):
                self._recovery_stage = 0
                return STOP
            if self.status.state is not GoalState.RECOVERY:
                return STOP
            self._recovery_stage = 2
            self._rotation_accum = 0.0
        if self._recovery_stage == 2:
            if self._rotation_accum < 2.0 * math.pi:
                cmd = VelocityCommand(0.0, cfg.recovery_rotation_speed)
                gated = self._gate(cmd, inp)
                if gated.omega != 0.0:
                    self._rotation_accum += abs(gated.omega) * cfg.control_period
                    return gated
                # Not even rotating in place is safe; skip to the last
                # replan rather than spin the stage forever.
            self._recovery_stage = 3
        if self._try_plan(inp):
            self._recovery_stage = 0
            return STOP
        if self.status.state is GoalState.RECOVERY:
            self._goal_event(
                Event.RECOVERY_EXHAUSTED, error=self.status.error or "NoPathFound"
            )
        return STOP
