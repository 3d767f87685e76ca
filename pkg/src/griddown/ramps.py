"""Hub-height power conversion and wind-power ramp detection.

10 m speeds are extrapolated to hub height with the neutral-stability
logarithmic profile, mapped to normalized power through a generic turbine
curve (cubic between cut-in and rated), and scanned for ramps: changes of at
least a threshold fraction of nominal power between two samples no more than
a window apart.  Overlapping same-direction detections merge into the single
strongest event.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidRoughness, OutOfExtent, SeriesTooShort
from .grids import GridSpec, cell_centers, points_in_extent

DEFAULT_ROUGHNESS_M = 0.03  # open terrain
DEFAULT_HUB_HEIGHT_M = 80.0
REFERENCE_HEIGHT_M = 10.0


@dataclass(frozen=True)
class PowerCurve:
    """Generic normalized turbine curve: cubic ramp-up, flat rated band."""

    cut_in: float = 3.0
    rated: float = 12.0
    cut_out: float = 25.0

    def __post_init__(self):
        if not (0 < self.cut_in < self.rated <= self.cut_out):
            raise ValueError("need 0 < cut_in < rated <= cut_out")


def to_power(speed, curve: PowerCurve = PowerCurve()):
    """Normalized power in [0, 1] for hub-height speeds (scalar or array)."""
    v = np.asarray(speed, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("wind speed must be nonnegative")
    num = v**3 - curve.cut_in**3
    den = curve.rated**3 - curve.cut_in**3
    partial = np.clip(num / den, 0.0, 1.0)
    out = np.where(v >= curve.cut_out, 0.0, np.where(v >= curve.rated, 1.0, partial))
    out = np.where(v < curve.cut_in, 0.0, out)
    return float(out) if np.isscalar(speed) else out


def log_law_extrapolate(
    speed,
    roughness_m: float,
    target_height_m: float = DEFAULT_HUB_HEIGHT_M,
    ref_height_m: float = REFERENCE_HEIGHT_M,
):
    """Neutral-stability log-profile scaling from ref height to hub height."""
    if roughness_m <= 0:
        raise InvalidRoughness(f"roughness must be > 0, got {roughness_m}")
    if roughness_m >= ref_height_m:
        raise InvalidRoughness(
            f"roughness {roughness_m} must be below the reference height {ref_height_m}"
        )
    if target_height_m <= roughness_m:
        raise InvalidRoughness("target height must exceed the roughness length")
    factor = math.log(target_height_m / roughness_m) / math.log(ref_height_m / roughness_m)
    v = np.asarray(speed, dtype=np.float64) * factor
    return float(v) if np.isscalar(speed) else v


def extract_series(fields: np.ndarray, grid: GridSpec, location_xy) -> np.ndarray:
    """Per-hour value of the grid cell nearest to a fixed location."""
    point = np.asarray(location_xy, dtype=np.float64).reshape(1, 2)
    if not bool(points_in_extent(grid, point)[0]):
        raise OutOfExtent(f"location {tuple(point[0])} is outside the grid extent")
    centers = cell_centers(grid).reshape(-1, 2)
    d2 = ((centers - point[0]) ** 2).sum(axis=1)
    flat = int(np.argmin(d2))  # ties: lowest row, then lowest column
    arr = np.asarray(fields)
    return arr.reshape(arr.shape[0], -1)[:, flat]


@dataclass(frozen=True)
class RampEvent:
    center_time: float  # hours (midpoint of the change interval)
    direction: str  # "up" | "down"
    magnitude: float  # fraction of nominal power
    window_h: int  # length of the change interval in hours
    start: int
    end: int


def detect_ramps(
    power: np.ndarray, threshold: float = 0.70, window_h: int = 2
) -> list[RampEvent]:
    """Endpoint power changes >= threshold within the window, merged.

    Every (start t, span d <= window_h) pair is examined; overlapping
    same-direction detections collapse to the one with maximum magnitude
    (ties: shortest span, then earliest start).  Detection depends only on
    power differences, so adding a constant to the series changes nothing.
    """
    p = np.asarray(power, dtype=np.float64)
    if len(p) < window_h + 1:
        raise SeriesTooShort(
            f"series of length {len(p)} cannot hold a {window_h} h window"
        )
    raw = []
    for t in range(len(p)):
        for d in range(1, window_h + 1):
            if t + d >= len(p):
                continue
            change = p[t + d] - p[t]
            if abs(change) >= threshold:
                raw.append(
                    RampEvent(
                        center_time=t + d / 2.0,
                        direction="up" if change > 0 else "down",
                        magnitude=abs(change),
                        window_h=d,
                        start=t,
                        end=t + d,
                    )
                )
    merged: list[RampEvent] = []
    for direction in ("up", "down"):
        group = sorted(
            (e for e in raw if e.direction == direction), key=lambda e: (e.start, e.end)
        )
        cluster: list[RampEvent] = []
        last_end = None
        for e in group:
            if last_end is None or e.start <= last_end:
                cluster.append(e)
                last_end = e.end if last_end is None else max(last_end, e.end)
            else:
                merged.append(_strongest(cluster))
                cluster = [e]
                last_end = e.end
        if cluster:
            merged.append(_strongest(cluster))
    merged.sort(key=lambda e: e.center_time)
    return merged


def _strongest(cluster: list[RampEvent]) -> RampEvent:
    return min(cluster, key=lambda e: (-e.magnitude, e.window_h, e.start))


@dataclass
class ConcordanceCounts:
    hits: dict
    misses: dict
    false_alarms: dict

    def totals(self) -> dict:
        return {
            "hits": sum(self.hits.values()),
            "misses": sum(self.misses.values()),
            "false_alarms": sum(self.false_alarms.values()),
        }


def ramp_concordance(
    truth_power: np.ndarray,
    candidate_power: np.ndarray,
    threshold: float = 0.70,
    window_h: int = 2,
) -> ConcordanceCounts:
    """Match detected events between two aligned power series.

    Events pair up when their centers are within the window and directions
    agree (closest center first).  Unmatched truth events count as misses,
    unmatched candidate events as false alarms; all tallies per direction.
    """
    if len(truth_power) != len(candidate_power):
        raise ValueError("series must be aligned")
    truth_events = detect_ramps(truth_power, threshold, window_h)
    cand_events = detect_ramps(candidate_power, threshold, window_h)
    hits = {"up": 0, "down": 0}
    misses = {"up": 0, "down": 0}
    false_alarms = {"up": 0, "down": 0}
    unmatched = list(cand_events)
    for te in truth_events:
        best, best_dt = None, None
        for ce in unmatched:
            if ce.direction != te.direction:
                continue
            dt = abs(ce.center_time - te.center_time)
            if dt <= window_h and (best is None or dt < best_dt):
                best, best_dt = ce, dt
        if best is not None:
            hits[te.direction] += 1
            unmatched.remove(best)
        else:
            misses[te.direction] += 1
    for ce in unmatched:
        false_alarms[ce.direction] += 1
    return ConcordanceCounts(hits=hits, misses=misses, false_alarms=false_alarms)


def speeds_to_power_series(
    speeds_10m: np.ndarray,
    roughness_m: float = DEFAULT_ROUGHNESS_M,
    hub_height_m: float = DEFAULT_HUB_HEIGHT_M,
    curve: PowerCurve = PowerCurve(),
) -> np.ndarray:
    """10 m speed series -> hub-height normalized power series."""
    hub = log_law_extrapolate(np.asarray(speeds_10m, dtype=np.float64), roughness_m, hub_height_m)
    return to_power(hub, curve)


def read_speed_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Two-column CSV (iso_hour, speed_mps) with a header row."""
    hours, speeds = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip().lower() for h in header[:2]] != ["iso_hour", "speed_mps"]:
            raise ValueError(f"expected header iso_hour,speed_mps, got {header}")
        for row in reader:
            if not row:
                continue
            hours.append(row[0])
            speeds.append(float(row[1]))
    return hours, np.asarray(speeds, dtype=np.float64)


def write_events_csv(events: list[RampEvent], hours: list[str], path: str | Path) -> None:
    """Events as CSV (center_hour, direction, magnitude, window_h).

    ``center_hour`` interpolates between the two bracketing input labels when
    an event centers on a half hour.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["center_hour", "direction", "magnitude", "window_h"])
        for e in events:
            idx = int(e.center_time)
            label = hours[idx] if float(idx) == e.center_time else f"{hours[idx]}+30min"
            w.writerow([label, e.direction, f"{e.magnitude:.4f}", e.window_h])
