"""Planar geometry shared by the whole stack: poses, velocity commands,
kinodynamic limits, and robot footprints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = theta % TWO_PI
    if wrapped > math.pi:
        wrapped -= TWO_PI
    return wrapped


def angle_diff(a: float, b: float) -> float:
    """Shortest signed rotation taking b onto a."""
    return normalize_angle(a - b)


@dataclass(frozen=True)
class Pose2D:
    """A planar pose. theta is always stored wrapped to (-pi, pi]."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)

    def heading_error_to(self, other: "Pose2D") -> float:
        return angle_diff(other.theta, self.theta)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class VelocityCommand:
    """Body-frame velocity request: linear v (m/s), angular omega (rad/s)."""

    v: float
    omega: float

    def is_finite(self) -> bool:
        return math.isfinite(self.v) and math.isfinite(self.omega)

    def clamped(self, limits: "KinodynamicLimits") -> tuple["VelocityCommand", bool]:
        """Clamp into the static limits. Returns (command, was_clamped)."""
        v = min(max(self.v, limits.v_min), limits.v_max)
        omega = min(max(self.omega, -limits.omega_max), limits.omega_max)
        changed = (v != self.v) or (omega != self.omega)
        return VelocityCommand(v, omega), changed


STOP = VelocityCommand(0.0, 0.0)


@dataclass(frozen=True)
class KinodynamicLimits:
    """Static velocity and acceleration bounds of the base.

    v_max matches the drive's rated top speed; v_min of 0 means the base
    does not reverse.
    """

    v_max: float = 0.8
    v_min: float = 0.0
    omega_max: float = 1.0
    accel_v: float = 1.0
    accel_omega: float = 2.0

    def __post_init__(self):
        if self.v_max < self.v_min:
            raise ValueError("v_max must be >= v_min")
        if self.omega_max <= 0 or self.accel_v <= 0 or self.accel_omega <= 0:
            raise ValueError("omega_max and accelerations must be positive")


def integrate_unicycle(pose: Pose2D, v: float, omega: float, dt: float) -> Pose2D:
    """Advance a pose along a constant-velocity arc.

    Uses the closed-form arc solution rather than an Euler step so that
    integration is exact for any dt.
    """
    if abs(omega) < 1e-12:
        return Pose2D(
            pose.x + v * math.cos(pose.theta) * dt,
            pose.y + v * math.sin(pose.theta) * dt,
            pose.theta,
        )
    theta1 = pose.theta + omega * dt
    r = v / omega
    return Pose2D(
        pose.x + r * (math.sin(theta1) - math.sin(pose.theta)),
        pose.y + r * (math.cos(pose.theta) - math.cos(theta1)),
        theta1,
    )


def integrate_unicycle_array(
    pose: np.ndarray, v: np.ndarray, omega: np.ndarray, dt: float, steps: int
) -> np.ndarray:
    """Vectorized constant-velocity arc rollout.

    Args:
        pose: (3,) start pose for every command.
        v, omega: (N,) command components.
        dt: step duration.
        steps: number of steps to simulate.

    Returns:
        (N, steps, 3) poses after 1..steps steps. theta is unwrapped.
    """
    v = np.asarray(v, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n = v.shape[0]
    t = dt * np.arange(1, steps + 1, dtype=float)  # (steps,)
    theta0 = pose[2]
    theta = theta0 + omega[:, None] * t[None, :]  # (N, steps)

    straight = np.abs(omega) < 1e-12
    out = np.empty((n, steps, 3), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(straight, 0.0, v / np.where(straight, 1.0, omega))
    out[:, :, 0] = pose[0] + r[:, None] * (np.sin(theta) - math.sin(theta0))
    out[:, :, 1] = pose[1] + r[:, None] * (math.cos(theta0) - np.cos(theta))
    # Straight-line motion replaces the arc solution where omega ~ 0.
    if straight.any():
        s = straight
        out[s, :, 0] = pose[0] + v[s, None] * math.cos(theta0) * t[None, :]
        out[s, :, 1] = pose[1] + v[s, None] * math.sin(theta0) * t[None, :]
    out[:, :, 2] = theta
    return out


@dataclass(frozen=True)
class Footprint:
    """Robot outline used for collision checks.

    Either a disc of given radius or a convex CCW polygon in the body frame.
    The stock base is a 0.4 m square chassis; its default footprint is the
    disc that circumscribes that square.
    """

    radius: float | None = None
    vertices: np.ndarray | None = None  # (K, 2) body-frame, convex, CCW

    def __post_init__(self):
        if (self.radius is None) == (self.vertices is None):
            raise ValueError("footprint is either a disc or a polygon")
        if self.radius is not None and self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.vertices is not None:
            verts = np.asarray(self.vertices, dtype=float)
            if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
                raise ValueError("polygon needs at least 3 (x, y) vertices")
            object.__setattr__(self, "vertices", verts)
            if not _is_convex_ccw(verts):
                raise ValueError("polygon must be convex with CCW winding")

    @classmethod
    def disc(cls, radius: float) -> "Footprint":
        return cls(radius=radius)

    @classmethod
    def polygon(cls, vertices) -> "Footprint":
        return cls(vertices=np.asarray(vertices, dtype=float))

    @property
    def inscribed_radius(self) -> float:
        """Radius of the largest origin-centered disc inside the outline."""
        if self.radius is not None:
            return self.radius
        verts = self.vertices
        nxt = np.roll(verts, -1, axis=0)
        edges = nxt - verts
        # Distance from origin to each edge line; convexity makes the min valid.
        cross = np.abs(edges[:, 0] * (-verts[:, 1]) - edges[:, 1] * (-verts[:, 0]))
        return float(np.min(cross / np.hypot(edges[:, 0], edges[:, 1])))

    @property
    def circumscribed_radius(self) -> float:
        if self.radius is not None:
            return self.radius
        return float(np.max(np.hypot(self.vertices[:, 0], self.vertices[:, 1])))

    def covers(self, pose: Pose2D, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Boolean mask of which world points fall inside the footprint at pose."""
        dx = np.asarray(px, dtype=float) - pose.x
        dy = np.asarray(py, dtype=float) - pose.y
        if self.radius is not None:
            return dx * dx + dy * dy <= self.radius * self.radius
        c, s = math.cos(-pose.theta), math.sin(-pose.theta)
        bx = c * dx - s * dy
        by = s * dx + c * dy
        verts = self.vertices
        nxt = np.roll(verts, -1, axis=0)
        inside = np.ones(bx.shape, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, nxt):
            inside &= (x1 - x0) * (by - y0) - (y1 - y0) * (bx - x0) >= -1e-12
        return inside


def _is_convex_ccw(verts: np.ndarray) -> bool:
    n = verts.shape[0]
    for i in range(n):
        a, b, c = verts[i], verts[(i + 1) % n], verts[(i + 2) % n]
        if np.cross(b - a, c - b) < -1e-12:
            return False
    return True


# Disc circumscribing the 0.4 m square chassis.
DEFAULT_FOOTPRINT = Footprint.disc(0.2 * math.sqrt(2.0))
