"""Log-odds occupancy grid mapping and on-disk map files.

Mapping accumulates per-cell log-odds evidence from lidar scans taken at
known poses. Maps persist as a binary PGM raster plus a JSON sidecar with
the geometric metadata; save and load round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose2D
from .grid import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .raycast import trace_rays
from .simulation import LaserScan

# Evidence increments and clamp bounds, in log-odds.
L_OCC = 0.85
L_FREE = -0.4
L_MIN = -5.0
L_MAX = 5.0

OCC_THRESHOLD = 0.65
FREE_THRESHOLD = 0.25

# Raster byte values for the three states.
PGM_FREE = 254
PGM_OCCUPIED = 0
PGM_UNKNOWN = 205

# Beam endpoints are nudged a quarter cell forward so a return reported at
# a cell boundary lands inside the cell that produced it.
ENDPOINT_NUDGE = 0.25


class MapFormatError(ValueError):
    """Malformed map file. byte_offset points at the offending byte."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte {byte_offset})")
        self.byte_offset = byte_offset


@dataclass
class MappingParams:
    l_occ: float = L_OCC
    l_free: float = L_FREE
    l_min: float = L_MIN
    l_max: float = L_MAX
    occ_threshold: float = OCC_THRESHOLD
    free_threshold: float = FREE_THRESHOLD


class MappingSession:
    """Accumulates scans into a log-odds grid.

    Attributes:
        log_odds: (H, W) float64 evidence, clamped to [l_min, l_max].
        integrated_scans: number of scans merged so far.
        dropped_scans: scans whose pose fell outside the grid.
    """

    def __init__(
        self,
        resolution: float,
        width: int,
        height: int,
        origin: Pose2D = Pose2D(0.0, 0.0, 0.0),
        params: MappingParams | None = None,
    ):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = resolution
        self.width = width
        self.height = height
        self.origin = origin
        self.params = params or MappingParams()
        self.log_odds = np.zeros((height, width), dtype=np.float64)
        self.integrated_scans = 0
        self.dropped_scans = 0

    def integrate_scan(self, pose: Pose2D, scan: LaserScan) -> None:
        """Merge one scan taken at pose.

        Cells strictly between the sensor and a beam endpoint collect free
        evidence; the endpoint cell collects occupied evidence. Beams with
        no return sweep free evidence out to range_max. The sensor's own
        cell is never touched.
        """
        ix0 = int(math.floor((pose.x - self.origin.x) / self.resolution))
        iy0 = int(math.floor((pose.y - self.origin.y) / self.resolution))
        if not (0 <= ix0 < self.width and 0 <= iy0 < self.height):
            self.dropped_scans += 1
            return

        p = self.params
        angles = pose.theta + scan.angles()
        hits = scan.hits()
        ranges = np.where(hits, scan.ranges, scan.range_max)

        empty = np.zeros((self.height, self.width), dtype=bool)
        trace = trace_rays(
            empty,
            pose.x,
            pose.y,
            angles,
            ranges,
            self.resolution,
            self.origin.x,
            self.origin.y,
            record_cells=True,
        )

        nudge = ENDPOINT_NUDGE * self.resolution
        ex = pose.x + np.cos(angles) * (ranges + nudge)
        ey = pose.y + np.sin(angles) * (ranges + nudge)
        eix = np.floor((ex - self.origin.x) / self.resolution).astype(np.int64)
        eiy = np.floor((ey - self.origin.y) / self.resolution).astype(np.int64)

        # Free evidence: every traversed cell except each beam's endpoint cell.
        valid = np.isfinite(trace.entry_t)
        not_end = (trace.cells_ix != eix[None, :]) | (trace.cells_iy != eiy[None, :])
        fmask = valid & not_end
        fx = trace.cells_ix[fmask]
        fy = trace.cells_iy[fmask]
        delta = np.zeros_like(self.log_odds)
        np.add.at(delta, (fy, fx), p.l_free)

        # Occupied evidence at the endpoint of every beam that returned.
        end_ok = hits & (eix >= 0) & (eix < self.width) & (eiy >= 0) & (eiy < self.height)
        np.add.at(delta, (eiy[end_ok], eix[end_ok]), p.l_occ)

        self.log_odds = np.clip(self.log_odds + delta, p.l_min, p.l_max)
        self.integrated_scans += 1

    def occupancy_probability(self) -> np.ndarray:
        """Per-cell occupancy probability from the accumulated log-odds."""
        return 1.0 - 1.0 / (1.0 + np.exp(self.log_odds))

    def finalize(self) -> OccupancyGrid:
        """Threshold probabilities into a tri-state grid."""
        prob = self.occupancy_probability()
        cells = np.full((self.height, self.width), UNKNOWN, dtype=np.int8)
        cells[prob >= self.params.occ_threshold] = OCCUPIED
        cells[prob <= self.params.free_threshold] = FREE
        return OccupancyGrid(self.resolution, self.width, self.height, self.origin, cells)


def save_map(grid: OccupancyGrid, path_base: str | Path,
             occ_threshold: float = OCC_THRESHOLD,
             free_threshold: float = FREE_THRESHOLD) -> tuple[Path, Path]:
    """Write <base>.pgm (binary P5) and <base>.json metadata."""
    base = Path(path_base)
    pgm_path = base.parent / (base.name + ".pgm")
    json_path = base.parent / (base.name + ".json")

    raster = np.full((grid.height, grid.width), PGM_UNKNOWN, dtype=np.uint8)
    raster[grid.cells == FREE] = PGM_FREE
    raster[grid.cells == OCCUPIED] = PGM_OCCUPIED
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    pgm_path.write_bytes(header + raster.tobytes())

    meta = {
        "resolution": grid.resolution,
        "origin": [grid.origin.x, grid.origin.y, grid.origin.theta],
        "occ_threshold": occ_threshold,
        "free_threshold": free_threshold,
    }
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return pgm_path, json_path


def _read_pgm(data: bytes) -> np.ndarray:
    pos = 0

    def token() -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise MapFormatError("unexpected end of header", pos)
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos], start

    magic, off = token()
    if magic != b"P5":
        raise MapFormatError(f"bad magic {magic!r}, expected P5", off)
    fields = []
    for name in ("width", "height", "maxval"):
        raw, off = token()
        if not raw.isdigit():
            raise MapFormatError(f"non-numeric {name} {raw!r}", off)
        fields.append((int(raw), off))
    (width, _), (height, _), (maxval, moff) = fields
    if maxval != 255:
        raise MapFormatError(f"unsupported maxval {maxval}", moff)
    if width <= 0 or height <= 0:
        raise MapFormatError("degenerate raster dimensions", moff)
    pos += 1  # single whitespace byte after maxval
    expected = width * height
    if len(data) - pos < expected:
        raise MapFormatError(
            f"raster truncated: need {expected} bytes, have {len(data) - pos}", len(data)
        )
    raster = np.frombuffer(data[pos : pos + expected], dtype=np.uint8)
    return raster.reshape(height, width)


def load_map(path_base: str | Path) -> OccupancyGrid:
    """Load a PGM + JSON map pair written by save_map."""
    base = Path(path_base)
    pgm_path = base.parent / (base.name + ".pgm")
    json_path = base.parent / (base.name + ".json")

    raster = _read_pgm(pgm_path.read_bytes())
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as e:
        raise MapFormatError(f"bad JSON sidecar: {e.msg}", e.pos) from e
    try:
        resolution = float(meta["resolution"])
        ox, oy, otheta = (float(v) for v in meta["origin"])
    except (KeyError, TypeError, ValueError) as e:
        raise MapFormatError(f"bad JSON sidecar fields: {e}", 0) from e
    if resolution <= 0:
        raise MapFormatError("resolution must be positive", 0)

    height, width = raster.shape
    cells = np.full((height, width), UNKNOWN, dtype=np.int8)
    cells[raster == PGM_FREE] = FREE
    cells[raster == PGM_OCCUPIED] = OCCUPIED
    return OccupancyGrid(resolution, width, height, Pose2D(ox, oy, otheta), cells)
