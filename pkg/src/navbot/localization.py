"""Adaptive Monte Carlo localization against a known map.

Particle filter with the standard three-stage cycle: odometry motion
model (rot1-trans-rot2 with alpha-scaled Gaussian noise), likelihood
field measurement model over decimated beams, and low-variance
systematic resampling with a KLD-adaptive particle count. Weights are
kept in probability space but updated through log space so a long
product of per-beam likelihoods cannot underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from scipy.stats import norm

from .geometry import Pose2D, normalize_angle
from .grid import OCCUPIED, OccupancyGrid
from .simulation import LaserScan

DEFAULT_INIT_COV = (0.5, 0.5, 0.4)
DEFAULT_INIT_COUNT = 500

# Below this translation the rot1/rot2 split is ill-conditioned; treat
# the motion as pure rotation.
MIN_TRANS_FOR_BEARING = 0.01


@dataclass(frozen=True)
class Particle:
    pose: Pose2D
    weight: float


@dataclass(frozen=True)
class MotionNoise:
    """Alpha parameters of the odometry motion model.

    alpha1: rotation noise from rotation, alpha2: rotation noise from
    translation, alpha3: translation noise from translation, alpha4:
    translation noise from rotation. Each sampled std is
    sqrt(a_i * rot^2 + a_j * trans^2).
    """

    alpha1: float = 0.2
    alpha2: float = 0.2
    alpha3: float = 0.2
    alpha4: float = 0.2

    def __post_init__(self):
        for a in (self.alpha1, self.alpha2, self.alpha3, self.alpha4):
            if a < 0:
                raise ValueError("alpha parameters must be non-negative")


@dataclass
class ParticleSet:
    """Poses as an (N, 3) array plus parallel weights summing to 1."""

    poses: np.ndarray
    weights: np.ndarray
    n_min: int = 100
    n_max: int = 5000
    kld_epsilon: float = 0.05
    kld_delta: float = 0.01
    bin_size: tuple[float, float, float] = (0.5, 0.5, math.pi / 8)
    diverged: bool = False
    init_in_occupied: bool = False

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.poses.ndim != 2 or self.poses.shape[1] != 3:
            raise ValueError("poses must be (N, 3)")
        if self.weights.shape != (self.poses.shape[0],):
            raise ValueError("weights must parallel poses")

    def __len__(self) -> int:
        return self.poses.shape[0]

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(Pose2D(x, y, t), float(w))
            for (x, y, t), w in zip(self.poses, self.weights)
        ]

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def occupied_bins(self) -> int:
        """Number of distinct histogram bins the cloud occupies."""
        bx, by, bt = self.bin_size
        keys = np.column_stack(
            [
                np.floor(self.poses[:, 0] / bx),
                np.floor(self.poses[:, 1] / by),
                np.floor(
                    np.mod(self.poses[:, 2], 2.0 * math.pi) / bt
                ),
            ]
        ).astype(np.int64)
        return int(np.unique(keys, axis=0).shape[0])


@dataclass(frozen=True)
class LikelihoodField:
    """Distance-to-nearest-obstacle grid plus the beam mixture weights.

    A beam endpoint scores z_hit * N(d; 0, sigma_hit) + z_rand / z_max.
    Endpoints outside the map read the worst (maximum) distance in the
    field, so off-map evidence is merely unconvincing, never fatal.
    """

    distances: np.ndarray
    resolution: float
    origin: Pose2D
    sigma_hit: float = 0.2
    z_hit: float = 0.95
    z_rand: float = 0.05
    z_max: float = 8.0

    def __post_init__(self):
        if abs(self.z_hit + self.z_rand - 1.0) > 1e-9:
            raise ValueError("z_hit + z_rand must equal 1")
        if self.sigma_hit <= 0 or self.z_max <= 0:
            raise ValueError("sigma_hit and z_max must be positive")

    @classmethod
    def from_grid(cls, grid: OccupancyGrid, **kwargs) -> "LikelihoodField":
        occupied = grid.cells == OCCUPIED
        if occupied.any():
            d = ndimage.distance_transform_edt(~occupied) * grid.resolution
        else:
            d = np.full(
                occupied.shape,
                math.hypot(grid.width, grid.height) * grid.resolution,
            )
        return cls(
            distances=d, resolution=grid.resolution, origin=grid.origin, **kwargs
        )

    @property
    def max_distance(self) -> float:
        return float(self.distances.max())

    def distance_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        shape = x.shape
        ix = np.floor((x.ravel() - self.origin.x) / self.resolution).astype(int)
        iy = np.floor((y.ravel() - self.origin.y) / self.resolution).astype(int)
        h, w = self.distances.shape
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        d = np.full(ix.shape, self.max_distance)
        d[inside] = self.distances[iy[inside], ix[inside]]
        return d.reshape(shape)

    def beam_likelihood(self, d: np.ndarray) -> np.ndarray:
        gauss = np.exp(-0.5 * (d / self.sigma_hit) ** 2) / (
            self.sigma_hit * math.sqrt(2.0 * math.pi)
        )
        return self.z_hit * gauss + self.z_rand / self.z_max


def init(
    grid: OccupancyGrid,
    initial_pose: Pose2D | None = None,
    covariance: tuple[float, float, float] | None = None,
    n: int = DEFAULT_INIT_COUNT,
    rng: np.random.Generator | None = None,
    **set_kwargs,
) -> ParticleSet:
    """Gaussian particle cloud around the prior (or the map origin frame's
    (0,0,0) when no prior is given), uniform weights. The count clamps to
    the set's [n_min, n_max]. A prior inside an occupied cell is accepted
    but flagged, since an operator may be deliberately overriding a bad
    estimate."""
    rng = rng or np.random.default_rng()
    probe = ParticleSet(np.zeros((1, 3)), np.ones(1), **set_kwargs)
    n = min(max(n, probe.n_min), probe.n_max)
    mean = initial_pose or Pose2D(0.0, 0.0, 0.0)
    sx, sy, st = covariance if covariance is not None else DEFAULT_INIT_COV
    poses = np.column_stack(
        [
            rng.normal(mean.x, sx, n) if sx > 0 else np.full(n, mean.x),
            rng.normal(mean.y, sy, n) if sy > 0 else np.full(n, mean.y),
            rng.normal(mean.theta, st, n) if st > 0 else np.full(n, mean.theta),
        ]
    )
    flagged = False
    if initial_pose is not None:
        ix, iy = grid.world_to_cell(initial_pose.x, initial_pose.y)
        flagged = grid.is_occupied(ix, iy)
    return ParticleSet(
        poses, np.full(n, 1.0 / n), init_in_occupied=flagged, **set_kwargs
    )


def odometry_delta(
    prev: Pose2D, curr: Pose2D
) -> tuple[float, float, float]:
    """Decompose an odometry step into (trans, rot1, rot2)."""
    dx, dy = curr.x - prev.x, curr.y - prev.y
    trans = math.hypot(dx, dy)
    if trans < MIN_TRANS_FOR_BEARING:
        rot1 = 0.0
    else:
        rot1 = normalize_angle(math.atan2(dy, dx) - prev.theta)
    rot2 = normalize_angle(curr.theta - prev.theta - rot1)
    return trans, rot1, rot2


def motion_update(
    pset: ParticleSet,
    odom_delta: tuple[float, float, float],
    noise: MotionNoise = MotionNoise(),
    rng: np.random.Generator | None = None,
) -> ParticleSet:
    """Advance every particle by the sampled odometry model; weights are
    untouched. Zero noise reduces to a deterministic rigid advance along
    each particle's own heading."""
    trans, rot1, rot2 = odom_delta
    for v in (trans, rot1, rot2):
        if not math.isfinite(v):
            raise ValueError("odometry delta must be finite")
    rng = rng or np.random.default_rng()
    n = len(pset)

    var_rot1 = noise.alpha1 * rot1**2 + noise.alpha2 * trans**2
    var_trans = noise.alpha3 * trans**2 + noise.alpha4 * (rot1**2 + rot2**2)
    var_rot2 = noise.alpha1 * rot2**2 + noise.alpha2 * trans**2

    def sample(center: float, var: float) -> np.ndarray:
        if var <= 0:
            return np.full(n, center)
        return center - rng.normal(0.0, math.sqrt(var), n)

    r1 = sample(rot1, var_rot1)
    tr = sample(trans, var_trans)
    r2 = sample(rot2, var_rot2)

    theta = pset.poses[:, 2]
    poses = np.column_stack(
        [
            pset.poses[:, 0] + tr * np.cos(theta + r1),
            pset.poses[:, 1] + tr * np.sin(theta + r1),
            theta + r1 + r2,
        ]
    )
    return replace(pset, poses=poses, weights=pset.weights.copy())


def measurement_update(
    pset: ParticleSet,
    scan: LaserScan,
    f: LikelihoodField,
    decimation: int = 6,
) -> ParticleSet:
    """Reweight by the likelihood field over every decimation-th beam
    that actually hit something. No-return beams carry no endpoint and
    are skipped, so an empty scan leaves the weights unchanged."""
    angles = scan.angles()[::decimation]
    ranges = np.asarray(scan.ranges)[::decimation]
    hit = ranges <= scan.range_max
    if not hit.any():
        return replace(
            pset, poses=pset.poses.copy(), weights=pset.weights.copy(),
            diverged=False,
        )
    angles, ranges = angles[hit], ranges[hit]

    px = pset.poses[:, 0:1] + ranges[None, :] * np.cos(
        pset.poses[:, 2:3] + angles[None, :]
    )
    py = pset.poses[:, 1:2] + ranges[None, :] * np.sin(
        pset.poses[:, 2:3] + angles[None, :]
    )
    d = f.distance_at(px, py)
    log_lik = np.sum(np.log(f.beam_likelihood(d)), axis=1)

    with np.errstate(divide="ignore"):
        log_w = np.log(pset.weights) + log_lik
    if not np.isfinite(log_w).any():
        n = len(pset)
        return replace(
            pset, poses=pset.poses.copy(), weights=np.full(n, 1.0 / n),
            diverged=True,
        )
    log_w -= logsumexp(log_w)
    return replace(
        pset, poses=pset.poses.copy(), weights=np.exp(log_w), diverged=False
    )


def kld_sample_count(
    k: int, epsilon: float, delta: float, n_min: int, n_max: int
) -> int:
    """Particle count sufficient for the KLD bound with k occupied bins."""
    if k <= 1:
        return n_min
    z = norm.ppf(1.0 - delta)
    a = 2.0 / (9.0 * (k - 1))
    n = math.ceil((k - 1) / (2.0 * epsilon) * (1.0 - a + math.sqrt(a) * z) ** 3)
    return min(max(n, n_min), n_max)


def resample(
    pset: ParticleSet,
    n_out: int | None = None,
    rng: np.random.Generator | None = None,
    offset: float | None = None,
) -> ParticleSet:
    """Low-variance systematic resampling to uniform weights.

    One uniform offset strides the cumulative weights, so a particle of
    weight w receives floor(n*w) or ceil(n*w) copies. When n_out is not
    given the count comes from the KLD bound over the cloud's occupied
    bins.
    """
    if n_out is None:
        n_out = kld_sample_count(
            pset.occupied_bins(),
            pset.kld_epsilon,
            pset.kld_delta,
            pset.n_min,
            pset.n_max,
        )
    if offset is None:
        rng = rng or np.random.default_rng()
        offset = float(rng.uniform(0.0, 1.0))
    if not 0.0 <= offset < 1.0:
        raise ValueError("offset must be in [0, 1)")
    positions = (np.arange(n_out) + offset) / n_out
    cumulative = np.cumsum(pset.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="left")
    return replace(
        pset,
        poses=pset.poses[idx].copy(),
        weights=np.full(n_out, 1.0 / n_out),
    )


def estimate(pset: ParticleSet) -> tuple[Pose2D, np.ndarray]:
    """Weighted mean pose (circular mean for heading) and 3x3 covariance.

    Heading deviations are wrapped before the covariance accumulation so
    a cloud straddling the pi boundary does not explode the variance.
    """
    w = pset.weights
    mx = float(np.sum(w * pset.poses[:, 0]))
    my = float(np.sum(w * pset.poses[:, 1]))
    sin_t = float(np.sum(w * np.sin(pset.poses[:, 2])))
    cos_t = float(np.sum(w * np.cos(pset.poses[:, 2])))
    mt = math.atan2(sin_t, cos_t)

    dx = pset.poses[:, 0] - mx
    dy = pset.poses[:, 1] - my
    dt = np.mod(pset.poses[:, 2] - mt + math.pi, 2.0 * math.pi) - math.pi
    dev = np.column_stack([dx, dy, dt])
    cov = (w[:, None] * dev).T @ dev
    return Pose2D(mx, my, mt), cov


@dataclass
class MclConfig:
    noise: MotionNoise = field(default_factory=MotionNoise)
    decimation: int = 6
    resample_threshold: float = 0.5
    n_init: int = DEFAULT_INIT_COUNT


class Mcl:
    """Full filter: feed odometry steps and scans, read pose estimates.

    Resampling happens only when the effective sample size drops below
    resample_threshold * N, which fights impoverishment while the cloud
    is still healthy. Divergence events (total weight underflow) are
    counted and leave the filter running on a uniform reset.
    """

    def __init__(
        self,
        f: LikelihoodField,
        grid: OccupancyGrid,
        initial_pose: Pose2D | None = None,
        covariance: tuple[float, float, float] | None = None,
        config: MclConfig | None = None,
        rng: np.random.Generator | None = None,
        **set_kwargs,
    ):
        self.field = f
        self.config = config or MclConfig()
        self.rng = rng or np.random.default_rng()
        self.pset = init(
            grid,
            initial_pose,
            covariance,
            n=self.config.n_init,
            rng=self.rng,
            **set_kwargs,
        )
        self.last_odom: Pose2D | None = None
        self.divergence_count = 0

    def handle_odometry(self, odom_pose: Pose2D) -> None:
        if self.last_odom is not None:
            delta = odometry_delta(self.last_odom, odom_pose)
            if delta != (0.0, 0.0, 0.0):
                self.pset = motion_update(
                    self.pset, delta, self.config.noise, self.rng
                )
        self.last_odom = odom_pose

    def handle_scan(self, scan: LaserScan) -> None:
        self.pset = measurement_update(
            self.pset, scan, self.field, self.config.decimation
        )
        if self.pset.diverged:
            self.divergence_count += 1
            return
        n = len(self.pset)
        if self.pset.effective_sample_size() < self.config.resample_threshold * n:
            self.pset = resample(self.pset, rng=self.rng)

    def estimate(self) -> tuple[Pose2D, np.ndarray]:
        return estimate(self.pset)
