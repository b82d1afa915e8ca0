"""Detection records, confidence filtering, NMS and per-tick batching.

Detections arrive either from per-camera MOTChallenge-style CSV files
(``frame,id,x,y,w,h,conf,class`` with id == -1 for raw detections) or from the
scenario simulator.  Embeddings, when provided as files, are row-aligned with
the CSV (see :mod:`mcvt.reid` for the binary format).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DuplicateCamera


class VehicleClass(IntEnum):
    CAR = 1
    BUS = 2
    TRUCK = 3
    VAN = 4
    SUV = 5
    OTHER = 6

    @classmethod
    def from_value(cls, value) -> "VehicleClass":
        try:
            return cls(int(value))
        except ValueError:
            return cls.OTHER


@dataclass(frozen=True)
class Detection:
    """One per-frame vehicle observation: corner box, confidence, class label."""

    x1: float
    y1: float
    x2: float
    y2: float
    alpha: float
    beta: VehicleClass = VehicleClass.CAR

    def __post_init__(self):
        if not all(map(math.isfinite, (self.x1, self.y1, self.x2, self.y2, self.alpha))):
            raise ValueError("detection fields must be finite")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"confidence {self.alpha} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class FrameRecord:
    """All detections of one camera frame, with optional per-detection embeddings."""

    camera: str
    frame_index: int
    timestamp: float
    detections: list[Detection] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # (n_detections, D), unit rows

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if self.embeddings is not None and len(self.embeddings) != len(self.detections):
            raise ValueError(
                f"{len(self.embeddings)} embeddings for {len(self.detections)} detections"
            )

    def select(self, indices) -> "FrameRecord":
        """New record restricted to the given detection indices (order kept)."""
        dets = [self.detections[i] for i in indices]
        emb = self.embeddings[list(indices)] if self.embeddings is not None else None
        return FrameRecord(self.camera, self.frame_index, self.timestamp, dets, emb)


@dataclass
class TickBatch:
    """Frames from all ready cameras at one tick, at most one per camera."""

    tick: int
    frames: list[FrameRecord] = field(default_factory=list)


def filter_confidence(dets: list[Detection], alpha_min: float) -> list[Detection]:
    """Keep detections with alpha >= alpha_min, preserving order."""
    return [d for d in dets if d.alpha >= alpha_min]


def filter_confidence_indices(dets: list[Detection], alpha_min: float) -> list[int]:
    return [i for i, d in enumerate(dets) if d.alpha >= alpha_min]


def iou(a: Detection, b: Detection) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms_indices(dets: list[Detection], iou_thresh: float) -> list[int]:
    """Greedy class-agnostic NMS; returns indices of kept boxes.

    Boxes are visited by descending confidence (ties broken by smaller
    (x1, y1), then input order, for determinism); each kept box suppresses
    remaining boxes overlapping it with iou > iou_thresh.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].alpha, dets[i].x1, dets[i].y1, i))
    kept: list[int] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if not suppressed[j] and j != i and iou(dets[i], dets[j]) > iou_thresh:
                suppressed[j] = True
    return kept


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy class-agnostic NMS over a detection list."""
    return [dets[i] for i in nms_indices(dets, iou_thresh)]


def batch_frames(pending: list[FrameRecord], tick: int) -> TickBatch:
    """Batch at most one ready frame per camera, ordered by camera id."""
    seen = set()
    for fr in pending:
        if fr.camera in seen:
            raise DuplicateCamera(fr.camera)
        seen.add(fr.camera)
    return TickBatch(tick=tick, frames=sorted(pending, key=lambda fr: fr.camera))


def read_detection_csv(path) -> dict[int, list[Detection]]:
    """Read a per-camera detection CSV into frame_index -> detections.

    Row layout is ``frame,id,x,y,w,h,conf,class`` with x, y the top-left
    corner.  Rows keep file order within a frame so embedding files stay
    aligned.
    """
    frames: dict[int, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            frame = int(row[0])
            x, y, w, h = (float(v) for v in row[2:6])
            conf = float(row[6]) if len(row) > 6 else 1.0
            beta = VehicleClass.from_value(row[7]) if len(row) > 7 else VehicleClass.CAR
            det = Detection(x1=x, y1=y, x2=x + w, y2=y + h, alpha=conf, beta=beta)
            frames.setdefault(frame, []).append(det)
    return frames


def write_detection_csv(path, frames: dict[int, list[Detection]]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for frame in sorted(frames):
            for d in frames[frame]:
                writer.writerow(
                    [frame, -1, f"{d.x1:.4f}", f"{d.y1:.4f}", f"{d.width:.4f}",
                     f"{d.height:.4f}", f"{d.alpha:.4f}", int(d.beta)]
                )
