"""Reading highD track files and turning them into state-action pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ACTIONS_1D, ACTIONS_2D, FEATURES_1D, FEATURES_2D, DataError, Samples

TTC_CAP = 50.0

REQUIRED_COLUMNS = (
    "frame", "id", "x", "laneId", "xVelocity", "yVelocity",
    "xAcceleration", "yAcceleration", "dhw", "thw", "ttc", "precedingId",
)
INT_COLUMNS = {"frame", "id", "laneId", "precedingId"}


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    vehicle_id: int
    x: float
    lane_id: int
    x_velocity: float
    y_velocity: float
    x_acceleration: float
    y_acceleration: float
    dhw: float
    thw: float
    ttc: float
    preceding_id: int


@dataclass
class Recording:
    records: list
    frame_rate: float
    # lane ids per carriageway, from the meta lane markings (None if absent)
    upper_lanes: tuple = None
    lower_lanes: tuple = None
    source: str = ""


@dataclass
class SkipReport:
    dangling_leader: int = 0
    invalid_gap: int = 0
    details: list = field(default_factory=list)

    @property
    def total(self):
        return self.dangling_leader + self.invalid_gap

    def to_dict(self):
        return {"dangling_leader": self.dangling_leader, "invalid_gap": self.invalid_gap}


def _parse_number(text, column, line, path):
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"{path}: row {line}: non-numeric value {text!r} in column {column!r}"
        ) from None
    if column in INT_COLUMNS:
        if not value.is_integer():
            raise DataError(f"{path}: row {line}: expected an integer in column {column!r}, got {text!r}")
        return int(value)
    return value


def _read_meta(meta_path):
    with Path(meta_path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "frameRate" not in reader.fieldnames:
            raise DataError(f"{meta_path}: missing required column 'frameRate'")
        row = next(reader, None)
    if row is None:
        raise DataError(f"{meta_path}: no data row")
    frame_rate = _parse_number(row["frameRate"], "frameRate", 2, meta_path)
    if not frame_rate > 0:
        raise DataError(f"{meta_path}: frameRate must be positive")

    def lanes(key, first_id):
        text = (row.get(key) or "").strip()
        if not text:
            return None
        n_lanes = len([t for t in text.split(";") if t.strip()]) - 1
        return tuple(range(first_id, first_id + n_lanes))

    upper = lanes("upperLaneMarkings", 2)
    lower = lanes("lowerLaneMarkings", (upper[-1] + 2) if upper else 2)
    return frame_rate, upper, lower


def parse_highd(tracks_path, meta_path):
    """Read a highD ``tracks`` CSV and its ``recordingMeta`` CSV.

    Columns are located by header name; extra columns are ignored.

    Returns
    -------
    Recording
        Records in file order plus the frame rate and lane inventory.
    """
    tracks_path = Path(tracks_path)
    frame_rate, upper, lower = _read_meta(meta_path)
    records = []
    with tracks_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{tracks_path}: missing header row")
        header = [h.strip() for h in header]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"{tracks_path}: missing required column {col!r}")
        pos = {col: header.index(col) for col in REQUIRED_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = {c: _parse_number(row[i].strip(), c, line, tracks_path) for c, i in pos.items()}
            if vals["frame"] < 0:
                raise DataError(f"{tracks_path}: row {line}: negative frame")
            records.append(TrackRecord(
                vals["frame"], vals["id"], vals["x"], vals["laneId"],
                vals["xVelocity"], vals["yVelocity"],
                vals["xAcceleration"], vals["yAcceleration"],
                vals["dhw"], vals["thw"], vals["ttc"], vals["precedingId"],
            ))
    return Recording(records, frame_rate, upper, lower, str(tracks_path))


def _lane_inventory(recording):
    """Lane ids per travel direction (+1 = increasing x, -1 = decreasing x)."""
    if recording.upper_lanes is not None and recording.lower_lanes is not None:
        return {-1: recording.upper_lanes, 1: recording.lower_lanes}
    seen = {1: set(), -1: set()}
    for r in recording.records:
        seen[1 if r.x_velocity >= 0 else -1].add(r.lane_id)
    return {k: tuple(sorted(v)) for k, v in seen.items()}


def _lanes_either_side(lane_id, direction, inventory):
    lanes = inventory.get(direction, ())
    lower_ids = sum(1 for l in lanes if l < lane_id)
    higher_ids = sum(1 for l in lanes if l > lane_id)
    # lane ids grow downward in image coordinates; for +x travel "left" is up
    return (lower_ids, higher_ids) if direction > 0 else (higher_ids, lower_ids)


def extract_pairs(recording, dims=1, ttc_cap=TTC_CAP, frame_stride=1):
    """Build one state-action pair per (vehicle, frame) that has a leader.

    Speeds are taken as magnitudes and accelerations are expressed in the
    vehicle's direction of travel, so both carriageways share one frame.

    Returns
    -------
    Samples, SkipReport
    """
    if dims not in (1, 2):
        raise ValueError(f"dims must be 1 or 2, got {dims}")
    if not isinstance(recording, Recording):
        recording = Recording(list(recording), 25.0)
    by_key = {(r.vehicle_id, r.frame): r for r in recording.records}
    inventory = _lane_inventory(recording) if dims == 2 else None
    states, actions = [], []
    skips = SkipReport()
    for r in recording.records:
        if r.preceding_id == 0 or r.frame % frame_stride:
            continue
        if not (math.isfinite(r.dhw) and math.isfinite(r.thw)) or r.dhw <= 0:
            skips.invalid_gap += 1
            skips.details.append(("invalid_gap", r.vehicle_id, r.frame))
            continue
        leader = by_key.get((r.preceding_id, r.frame))
        if leader is None:
            skips.dangling_leader += 1
            skips.details.append(("dangling_leader", r.vehicle_id, r.frame))
            continue
        direction = 1.0 if r.x_velocity >= 0 else -1.0
        thw = r.thw if r.thw > 0 else ttc_cap
        ttc = r.ttc if r.ttc > 0 else ttc_cap
        row = [r.dhw, min(thw, ttc_cap), min(ttc, ttc_cap), abs(r.x_velocity), abs(leader.x_velocity)]
        act = [direction * r.x_acceleration]
        if dims == 2:
            row.extend(_lanes_either_side(r.lane_id, int(direction), inventory))
            act.append(direction * r.y_acceleration)
        states.append(row)
        actions.append(act)
    features = FEATURES_2D if dims == 2 else FEATURES_1D
    names = ACTIONS_2D if dims == 2 else ACTIONS_1D
    samples = Samples(
        np.asarray(states, dtype=float).reshape(-1, len(features)),
        np.asarray(actions, dtype=float).reshape(-1, dims),
        features,
        names,
    )
    return samples, skips
