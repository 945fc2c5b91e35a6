"""Laser range scans, camera/laser grid mapping and obstacle distance.

Angles are measured counter-clockwise from the sensor's forward axis, so
positive angles look to the left. Ranges are millimetres.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CalibrationError, ScanError

MIN_RANGE_MM = 20.0
MAX_RANGE_MM = 5600.0
ARC_DEG = 240.0
STEP_DEG = 0.36
N_BEAMS = 667


class PolarSample(NamedTuple):
    rho: float    # mm
    alpha: float  # radians
    valid: bool


def in_range(rho: float) -> bool:
    return MIN_RANGE_MM <= rho <= MAX_RANGE_MM


def make_sample(rho: float, alpha: float) -> PolarSample:
    return PolarSample(float(rho), float(alpha), bool(math.isfinite(rho) and in_range(rho)))


@dataclass(frozen=True)
class LaserScan:
    samples: tuple[PolarSample, ...]

    def __post_init__(self):
        a = self.angles
        if len(a) > 1 and np.any(np.diff(a) <= 0):
            raise ScanError("scan angles must be strictly increasing")
        if len(a) and math.degrees(a[-1] - a[0]) > ARC_DEG + 1e-9:
            raise ScanError(f"scan spans more than {ARC_DEG} degrees")

    @property
    def angles(self) -> np.ndarray:
        return np.array([s.alpha for s in self.samples], dtype=np.float64)

    @property
    def ranges(self) -> np.ndarray:
        return np.array([s.rho for s in self.samples], dtype=np.float64)

    @property
    def valid(self) -> np.ndarray:
        return np.array([s.valid for s in self.samples], dtype=bool)

    def __len__(self):
        return len(self.samples)


def polar_to_cartesian(s: PolarSample) -> tuple[float, float]:
    if not s.valid:
        raise ScanError(f"cannot convert invalid sample {s}")
    return s.rho * math.cos(s.alpha), s.rho * math.sin(s.alpha)


def beam_angles_deg() -> np.ndarray:
    return -ARC_DEG / 2.0 + STEP_DEG * np.arange(N_BEAMS)


def scan_from_arrays(angles_deg: Sequence[float], ranges_mm: Sequence[float]) -> LaserScan:
    pairs = sorted(zip(angles_deg, ranges_mm), key=lambda p: p[0])
    return LaserScan(tuple(make_sample(r, math.radians(a)) for a, r in pairs))


def parse_scan(path: str | os.PathLike) -> LaserScan:
    """Read ``angle_deg,range_mm`` CSV (optional header). Out-of-range returns stay in
    the scan, marked invalid."""
    angles, ranges = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                if len(row) != 2:
                    raise ValueError
                a, r = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not angles:
                    continue  # header
                raise ScanError(f"{path}:{lineno}: unparseable scan line {','.join(row)!r}") from None
            if not math.isfinite(a):
                raise ScanError(f"{path}:{lineno}: non-finite angle")
            angles.append(a)
            ranges.append(r)
    return scan_from_arrays(angles, ranges)


def format_scan(scan: LaserScan) -> str:
    buf = io.StringIO()
    buf.write("angle_deg,range_mm\n")
    for s in scan.samples:
        buf.write(f"{math.degrees(s.alpha):.2f},{s.rho:.3f}\n")
    return buf.getvalue()


def write_scan(path: str | os.PathLike, scan: LaserScan) -> None:
    Path(path).write_text(format_scan(scan))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    """Axis-aligned obstacle in world millimetres."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError("obstacle must have positive extent")

    def hit(self, ox, oy, dx, dy) -> float:
        t_lo, t_hi = -math.inf, math.inf
        for o, d, lo, hi in ((ox, dx, self.x1, self.x2), (oy, dy, self.y1, self.y2)):
            if abs(d) < 1e-15:
                if not lo <= o <= hi:
                    return math.inf
                continue
            t1, t2 = (lo - o) / d, (hi - o) / d
            t_lo, t_hi = max(t_lo, min(t1, t2)), min(t_hi, max(t1, t2))
        if t_hi < max(t_lo, 0.0):
            return math.inf
        return t_lo if t_lo > 0 else t_hi


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("obstacle must have positive extent")

    def hit(self, ox, oy, dx, dy) -> float:
        fx, fy = self.cx - ox, self.cy - oy
        b = fx * dx + fy * dy
        disc = b * b - (fx * fx + fy * fy - self.r * self.r)
        if disc < 0:
            return math.inf
        root = math.sqrt(disc)
        for t in (b - root, b + root):
            if t > 0:
                return t
        return math.inf


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0  # radians


def simulate_scan(scene: Sequence[Rect | Circle], pose: Pose = Pose()) -> LaserScan:
    """Ray-cast every beam; misses are reported as range 0 (invalid)."""
    samples = []
    for a_deg in beam_angles_deg():
        a = math.radians(a_deg)
        dx, dy = math.cos(pose.heading + a), math.sin(pose.heading + a)
        t = min((ob.hit(pose.x, pose.y, dx, dy) for ob in scene), default=math.inf)
        samples.append(make_sample(t if math.isfinite(t) else 0.0, a))
    return LaserScan(tuple(samples))


def obstacle_from_dict(d: dict) -> Rect | Circle:
    kind = d.get("type", "rect")
    if kind == "rect":
        return Rect(*(float(d[k]) for k in ("x1", "y1", "x2", "y2")))
    if kind == "circle":
        return Circle(float(d["cx"]), float(d["cy"]), float(d["r"]))
    raise ValueError(f"unknown obstacle type {kind!r}")


# ---------------------------------------------------------------------------
# Grid mapping
# ---------------------------------------------------------------------------

def pixel_to_camera_cell(q: float, r: float, image_hw: tuple[int, int],
                         grid: tuple[int, int] = (3, 3)) -> tuple[int, int]:
    """Camera-grid cell ``(row, col)`` holding pixel column ``q``, row ``r``."""
    h, w = image_hw
    rows, cols = grid
    if not (0 <= q < w and 0 <= r < h):
        raise ValueError(f"pixel ({q}, {r}) outside {w}x{h} image")
    return min(int(r * rows // h), rows - 1), min(int(q * cols // w), cols - 1)


@dataclass
class GridCalibration:
    camera_grid: tuple[int, int] = (3, 3)
    laser_bands: int = 3
    arc_deg: tuple[float, float] = (-ARC_DEG / 2.0, ARC_DEG / 2.0)
    table: dict[tuple[int, int], int] = field(default_factory=dict)

    def band_limits(self, band: int) -> tuple[float, float]:
        lo, hi = self.arc_deg
        width = (hi - lo) / self.laser_bands
        return lo + band * width, lo + (band + 1) * width

    def laser_band(self, cell: tuple[int, int]) -> int:
        try:
            return self.table[tuple(cell)]
        except KeyError:
            raise CalibrationError(f"camera cell {tuple(cell)} is not calibrated") from None


def default_calibration(camera_grid=(3, 3), laser_bands: int = 3) -> GridCalibration:
    """Left image columns look at positive (left) laser angles."""
    rows, cols = camera_grid
    table = {}
    for rr in range(rows):
        for cc in range(cols):
            table[(rr, cc)] = laser_bands - 1 - min(cc * laser_bands // cols, laser_bands - 1)
    return GridCalibration(tuple(camera_grid), laser_bands, (-ARC_DEG / 2.0, ARC_DEG / 2.0), table)


def parse_calibration(text: str) -> GridCalibration:
    """Parse ``row col -> band`` lines plus optional ``camera_grid R C``,
    ``laser_bands N`` and ``arc LO HI`` directives."""
    cal = GridCalibration()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if "->" in line:
                left, right = line.split("->")
                rr, cc = (int(v) for v in left.split())
                cal.table[(rr, cc)] = int(right)
                continue
            key, *vals = line.split()
            if key == "camera_grid":
                cal.camera_grid = (int(vals[0]), int(vals[1]))
            elif key == "laser_bands":
                cal.laser_bands = int(vals[0])
            elif key == "arc":
                cal.arc_deg = (float(vals[0]), float(vals[1]))
            else:
                raise ValueError(key)
        except (ValueError, IndexError):
            raise CalibrationError(f"line {lineno}: cannot parse {raw!r}") from None
    for cell, band in cal.table.items():
        if not 0 <= band < cal.laser_bands:
            raise CalibrationError(f"cell {cell} maps to missing band {band}")
    return cal


def load_calibration(path: str | os.PathLike) -> GridCalibration:
    return parse_calibration(Path(path).read_text())


def format_calibration(cal: GridCalibration) -> str:
    lines = [f"camera_grid {cal.camera_grid[0]} {cal.camera_grid[1]}",
             f"laser_bands {cal.laser_bands}",
             f"arc {cal.arc_deg[0]:g} {cal.arc_deg[1]:g}"]
    lines += [f"{r} {c} -> {b}" for (r, c), b in sorted(cal.table.items())]
    return "\n".join(lines) + "\n"


class Ranging(NamedTuple):
    distance_mm: float | None  # None: no valid return in the band
    band: int
    cell: tuple[int, int]


def band_distance(scan: LaserScan, lo_deg: float, hi_deg: float, last: bool = False) -> float | None:
    """Nearest valid range with angle in ``[lo, hi)`` (``[lo, hi]`` when ``last``)."""
    a = np.degrees(scan.angles)
    inside = (a >= lo_deg) & ((a <= hi_deg) if last else (a < hi_deg))
    sel = inside & scan.valid
    if not sel.any():
        return None
    return float(scan.ranges[sel].min())


def map_to_distance(q: float, r: float, image_hw: tuple[int, int], calib: GridCalibration,
                    scan: LaserScan) -> Ranging:
    """Distance of the object seen at pixel ``(q, r)`` from its mapped laser band."""
    if len(scan) == 0:
        raise ScanError("empty scan")
    cell = pixel_to_camera_cell(q, r, image_hw, calib.camera_grid)
    band = calib.laser_band(cell)
    lo, hi = calib.band_limits(band)
    return Ranging(band_distance(scan, lo, hi, last=band == calib.laser_bands - 1), band, cell)
