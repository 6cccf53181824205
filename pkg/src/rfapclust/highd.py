"""Scenario extraction from highD-style CSV recordings.

Each ego track contributes at most one scenario, triggered at the first
frame where it has a preceding vehicle and a time headway strictly below
the threshold.  Grids are ego-centric and fixed at the trigger frame; the
ego's driving direction is rotated onto +x.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .scenario import HIGHD_GRID, Box, GridConfig, ScenarioDataset, build_grid_frame

log = logging.getLogger(__name__)

TRACK_COLUMNS = ("frame", "id", "x", "y", "width", "height", "xVelocity",
                 "thw", "precedingId", "laneId")
META_COLUMNS = ("frameRate",)


@dataclass
class IngestReport:
    triggers: int = 0
    skipped_history: int = 0
    t0_frames: dict = field(default_factory=dict)


def _read_rows(path: Path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows = []
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{path}:{reader.line_num}: wrong number of fields")
            rows.append((reader.line_num, row))
        return rows


def _num(path, line, row, key, cast=float):
    try:
        value = cast(row[key])
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {key}={row[key]!r}") from None
    if cast is float and not math.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite {key}")
    return value


def _frame_offsets(grid: GridConfig, frame_rate: float) -> list[int]:
    # frames back from t0, oldest first; half-frames round up
    return [int(math.floor(k * grid.dt * frame_rate + 0.5))
            for k in range(grid.n_timesteps - 1, -1, -1)]


def _markings(value: str) -> list[float]:
    value = (value or "").strip()
    return [float(v) for v in value.split(";") if v.strip()] if value else []


def ingest_highd(tracks_file, recording_meta_file, config: GridConfig = HIGHD_GRID,
                 thw_threshold: float = 4.0, report: IngestReport | None = None) -> ScenarioDataset:
    """Extract one scenario per triggering ego track.

    Returns an unlabelled dataset (ground truth unknown, stored as -1).
    Pass an :class:`IngestReport` to receive trigger/skip counts.
    """
    tracks_file, recording_meta_file = Path(tracks_file), Path(recording_meta_file)
    for p in (tracks_file, recording_meta_file):
        if not p.exists():
            raise DataError(f"{p} not found")
    report = report if report is not None else IngestReport()

    meta_rows = _read_rows(recording_meta_file, META_COLUMNS)
    if not meta_rows:
        raise DataError(f"{recording_meta_file}: no recording row")
    line, meta = meta_rows[0]
    frame_rate = _num(recording_meta_file, line, meta, "frameRate")
    upper = _markings(meta.get("upperLaneMarkings", ""))
    lower = _markings(meta.get("lowerLaneMarkings", ""))

    by_track: dict[int, dict[int, dict]] = defaultdict(dict)
    by_frame: dict[int, list[dict]] = defaultdict(list)
    for line, row in _read_rows(tracks_file, TRACK_COLUMNS):
        rec = {
            "frame": _num(tracks_file, line, row, "frame", int),
            "id": _num(tracks_file, line, row, "id", int),
            "precedingId": _num(tracks_file, line, row, "precedingId", int),
        }
        for key in ("x", "y", "width", "height", "xVelocity", "thw"):
            rec[key] = _num(tracks_file, line, row, key)
        by_track[rec["id"]][rec["frame"]] = rec
        by_frame[rec["frame"]].append(rec)

    offsets = _frame_offsets(config, frame_rate)
    tensors, ids = [], []
    for track_id in sorted(by_track):
        frames = by_track[track_id]
        t0 = next((f for f in sorted(frames)
                   if frames[f]["precedingId"] != 0 and 0 < frames[f]["thw"] < thw_threshold), None)
        if t0 is None:
            continue
        report.triggers += 1
        if any(t0 - off not in frames for off in offsets):
            report.skipped_history += 1
            continue
        ego = frames[t0]
        sign = 1.0 if ego["xVelocity"] >= 0 else -1.0
        cx = ego["x"] + ego["width"] / 2
        cy = ego["y"] + ego["height"] / 2

        def to_ego(rec):
            # highD y grows downwards; lateral axis is positive to the driver's left
            lon = sign * (rec["x"] + rec["width"] / 2 - cx)
            lat = -sign * (rec["y"] + rec["height"] / 2 - cy)
            return Box(lon, lat, rec["width"], rec["height"])

        marks = lower if sign > 0 else upper
        visible = None
        if len(marks) >= 2:
            lats = sorted(-sign * (m - cy) for m in (min(marks), max(marks)))
            visible = (lats[0], lats[1])
        frames_out = []
        for off in offsets:
            boxes = [to_ego(r) for r in by_frame[t0 - off]]
            frames_out.append(build_grid_frame(boxes, (0.0, 0.0), config, visible))
        tensors.append(np.stack(frames_out))
        ids.append(f"track{track_id}-f{t0}")
        report.t0_frames[track_id] = t0

    log.info("highD ingest: %d triggers, %d skipped for short history",
             report.triggers, report.skipped_history)
    x = np.asarray(tensors, dtype=np.float32).reshape((-1,) + config.shape)
    return ScenarioDataset(x, np.full(len(ids), -1), ids, [], config)
