"""Single-camera tracking: gated appearance + IoU association and track lifecycle.

A DeepSORT-style tracker over the bottom-center state space of
:mod:`mcvt.kalman`.  Confirmed tracks are matched through an appearance
cascade (recent-feature gallery, Mahalanobis gating, Hungarian assignment per
miss-age group); leftovers and tentative tracks fall through to IoU matching.
Tracks that stay unmatched longer than ``max_age`` frames are concluded and
summarized into a single embedding plus start/end time-location metadata for
the multi-camera stage.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kalman
from .errors import EmptyGallery, OutOfOrderFrame
from .geo import GeoPoint, Homography, pixel_to_geo
from .ingest import Detection, FrameRecord, VehicleClass, iou
from .kalman import KalmanState, observation_to_box, to_observation
from .reid import l2_normalize, temporal_aggregate

_INFEASIBLE = 1e5


class TrackStatus(Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass
class TrackerParams:
    n_init: int = 3
    max_age: int = 30
    matching_threshold: float = 0.3  # appearance cost gate
    iou_max_cost: float = 0.7
    gallery_budget: int = 100
    gating_threshold: float = kalman.GATING_THRESHOLD


@dataclass
class SCTrack:
    """A live single-camera track."""

    track_id: int
    camera: str
    state: KalmanState
    status: TrackStatus = TrackStatus.TENTATIVE
    hits: int = 1
    time_since_update: int = 0
    boxes: list[tuple[int, Detection]] = field(default_factory=list)
    features: list[tuple[int, np.ndarray]] = field(default_factory=list)
    gallery: deque = field(default_factory=deque)

    def predicted_box(self) -> tuple[float, float, float, float]:
        u, v, r, h = self.state.mean[:4]
        return observation_to_box(u, v, r, h)


@dataclass
class ConcludedTrack:
    """A finished single-camera track, summarized for cross-camera matching."""

    camera: str
    track_id: int
    embedding: np.ndarray  # unit vector
    t_s: float
    t_e: float
    l_s: GeoPoint
    l_e: GeoPoint
    class_label: VehicleClass
    boxes: list[tuple[int, Detection]]


def appearance_cost(gallery, embedding: np.ndarray) -> float:
    """Smallest cosine-based cost against the gallery: min(1 - <g, e>).

    For unit vectors this equals min ||g - e||^2 / 2; candidates match when
    the cost is at most the 0.3 matching threshold.
    """
    if len(gallery) == 0:
        raise EmptyGallery("appearance cost needs a non-empty gallery")
    g = np.asarray(gallery)
    return float(np.min(1.0 - g @ np.asarray(embedding)))


def _min_cost_matching(cost: np.ndarray, max_cost: float):
    """Hungarian assignment dropping pairs above max_cost.

    Returns (matches, unmatched_rows, unmatched_cols) with index lists
    relative to the cost matrix.
    """
    if cost.size == 0:
        return [], list(range(cost.shape[0])), list(range(cost.shape[1]))
    bounded = np.where(cost > max_cost, _INFEASIBLE, cost)
    rows, cols = linear_sum_assignment(bounded)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= max_cost]
    matched_r = {r for r, _ in matches}
    matched_c = {c for _, c in matches}
    unmatched_rows = [r for r in range(cost.shape[0]) if r not in matched_r]
    unmatched_cols = [c for c in range(cost.shape[1]) if c not in matched_c]
    return matches, unmatched_rows, unmatched_cols


def associate(
    tracks: list[SCTrack],
    frame: FrameRecord,
    params: TrackerParams | None = None,
):
    """Two-stage detection-to-track association for one frame.

    Stage 1 runs the matching cascade over confirmed tracks grouped by
    ascending time_since_update: appearance cost with Mahalanobis gating,
    Hungarian per group.  Stage 2 matches all remaining tracks (tentative
    included) to remaining detections by IoU cost.  Returns
    (matches, unmatched_track_indices, unmatched_detection_indices) with
    matches as (track_index, detection_index) pairs.
    """
    params = params or TrackerParams()
    n_det = len(frame.detections)
    if n_det and frame.embeddings is None:
        raise ValueError("frame detections must carry embeddings for association")

    confirmed = [i for i, t in enumerate(tracks) if t.status is TrackStatus.CONFIRMED]
    others = [i for i, t in enumerate(tracks) if t.status is not TrackStatus.CONFIRMED]

    matches: list[tuple[int, int]] = []
    free_dets = list(range(n_det))

    # Stage 1: appearance cascade, youngest miss-age first.
    for age in sorted({tracks[i].time_since_update for i in confirmed}):
        if not free_dets:
            break
        group = [i for i in confirmed if tracks[i].time_since_update == age]
        cost = np.zeros((len(group), len(free_dets)))
        for gi, ti in enumerate(group):
            track = tracks[ti]
            for dj, di in enumerate(free_dets):
                c = appearance_cost(track.gallery, frame.embeddings[di])
                if kalman.gating_distance(track.state, to_observation(frame.detections[di])) > params.gating_threshold:
                    c = _INFEASIBLE
                cost[gi, dj] = c
        got, _, _ = _min_cost_matching(cost, params.matching_threshold)
        for gi, dj in got:
            matches.append((group[gi], free_dets[dj]))
        taken = {free_dets[dj] for _, dj in got}
        free_dets = [d for d in free_dets if d not in taken]

    # Stage 2: IoU assignment for everything left, tentative tracks included.
    matched_tracks = {t for t, _ in matches}
    remaining = [i for i in confirmed if i not in matched_tracks] + others
    if remaining and free_dets:
        cost = np.ones((len(remaining), len(free_dets)))
        for ri, ti in enumerate(remaining):
            x1, y1, x2, y2 = tracks[ti].predicted_box()
            if x2 <= x1 or y2 <= y1:
                continue
            pred = Detection(x1, y1, x2, y2, alpha=1.0)
            for dj, di in enumerate(free_dets):
                cost[ri, dj] = 1.0 - iou(pred, frame.detections[di])
        got, _, _ = _min_cost_matching(cost, params.iou_max_cost)
        for ri, dj in got:
            matches.append((remaining[ri], free_dets[dj]))
        taken = {free_dets[dj] for _, dj in got}
        free_dets = [d for d in free_dets if d not in taken]

    matched_tracks = {t for t, _ in matches}
    unmatched_tracks = [i for i in range(len(tracks)) if i not in matched_tracks]
    return sorted(matches), unmatched_tracks, free_dets


def majority_class(boxes: list[tuple[int, Detection]]) -> VehicleClass:
    """Most frequent per-frame label; ties go to the label seen earliest."""
    counts = Counter(d.beta for _, d in boxes)
    first_seen = {}
    for frame, d in boxes:
        first_seen.setdefault(d.beta, frame)
    return min(counts, key=lambda c: (-counts[c], first_seen[c]))


class SingleCameraTracker:
    """Owns all live tracks of one camera; one step per arriving frame.

    ``aggregator`` turns the (L, D) matrix of a track's frame-level features
    into its single unit embedding; the default is the uniform temporal
    aggregate (plain normalized mean).

    Without a calibration homography a flat 1 microdegree-per-pixel chart is
    used (about 0.11 m per pixel), which keeps any realistic pixel coordinate
    inside the valid lat/lon ranges; a plain identity would push bottom edges
    beyond 90 "degrees" on a 720 px frame.
    """

    DEFAULT_CHART = [[1e-6, 0.0, 0.0], [0.0, 1e-6, 0.0], [0.0, 0.0, 1.0]]

    def __init__(
        self,
        camera: str,
        fps: float,
        homography: Homography | None = None,
        params: TrackerParams | None = None,
        aggregator=None,
    ):
        self.camera = camera
        self.fps = fps
        self.homography = homography or Homography(self.DEFAULT_CHART)
        self.params = params or TrackerParams()
        self.aggregator = aggregator or (lambda rows: temporal_aggregate(rows))
        self.tracks: list[SCTrack] = []
        self._next_id = 1
        self._last_frame: int | None = None

    def step(self, frame: FrameRecord) -> tuple[list[SCTrack], list[ConcludedTrack]]:
        """Advance one frame: predict, associate, update, manage lifecycle.

        Returns the active tracks and any tracks concluded this step.  Frames
        must arrive with strictly increasing frame_index (gaps allowed).
        """
        if self._last_frame is not None and frame.frame_index <= self._last_frame:
            raise OutOfOrderFrame(
                f"camera {self.camera}: frame {frame.frame_index} after {self._last_frame}"
            )
        self._last_frame = frame.frame_index

        for track in self.tracks:
            track.state = kalman.kf_predict(track.state)
            track.time_since_update += 1

        matches, unmatched_tracks, unmatched_dets = associate(self.tracks, frame, self.params)

        for ti, di in matches:
            self._update_track(self.tracks[ti], frame, di)

        concluded: list[ConcludedTrack] = []
        survivors: list[SCTrack] = []
        for i, track in enumerate(self.tracks):
            if i in {t for t, _ in matches}:
                survivors.append(track)
                continue
            if track.status is TrackStatus.TENTATIVE:
                track.status = TrackStatus.DELETED  # missed before confirmation
            elif track.time_since_update > self.params.max_age:
                concluded.append(self._conclude(track))
                track.status = TrackStatus.DELETED
            else:
                survivors.append(track)
        self.tracks = survivors

        for di in unmatched_dets:
            self.tracks.append(self._initiate(frame, di))

        return self.tracks, concluded

    def finish(self) -> list[ConcludedTrack]:
        """End of stream: conclude all confirmed tracks, drop tentative ones."""
        concluded = [
            self._conclude(t) for t in self.tracks if t.status is TrackStatus.CONFIRMED
        ]
        self.tracks = []
        return concluded

    def _initiate(self, frame: FrameRecord, di: int) -> SCTrack:
        det = frame.detections[di]
        track = SCTrack(
            track_id=self._next_id,
            camera=self.camera,
            state=kalman.kf_initiate(to_observation(det)),
            boxes=[(frame.frame_index, det)],
            gallery=deque(maxlen=self.params.gallery_budget),
        )
        self._next_id += 1
        emb = np.array(frame.embeddings[di], dtype=float)
        track.features.append((frame.frame_index, emb))
        track.gallery.append(emb)
        return track

    def _update_track(self, track: SCTrack, frame: FrameRecord, di: int) -> None:
        det = frame.detections[di]
        track.state = kalman.kf_update(track.state, to_observation(det))
        track.boxes.append((frame.frame_index, det))
        emb = np.array(frame.embeddings[di], dtype=float)
        track.features.append((frame.frame_index, emb))
        track.gallery.append(emb)
        track.hits += 1
        track.time_since_update = 0
        if track.status is TrackStatus.TENTATIVE and track.hits >= self.params.n_init:
            track.status = TrackStatus.CONFIRMED

    def _conclude(self, track: SCTrack) -> ConcludedTrack:
        rows = np.stack([f for _, f in track.features])
        embedding = l2_normalize(self.aggregator(rows))
        first_frame, first_det = track.boxes[0]
        last_frame, last_det = track.boxes[-1]

        def bottom_center(det: Detection) -> GeoPoint:
            from .geo import PixelPoint

            return pixel_to_geo(
                self.homography, PixelPoint((det.x1 + det.x2) / 2.0, det.y2)
            )

        return ConcludedTrack(
            camera=track.camera,
            track_id=track.track_id,
            embedding=embedding,
            t_s=first_frame / self.fps,
            t_e=last_frame / self.fps,
            l_s=bottom_center(first_det),
            l_e=bottom_center(last_det),
            class_label=majority_class(track.boxes),
            boxes=list(track.boxes),
        )
