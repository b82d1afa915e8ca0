"""Tracking evaluation: CLEAR MOTA and identity scores (IDP/IDR/IDF1).

Trajectories are dicts mapping a track/identity id to a list of
(camera, frame, box) observations.  Single-camera evaluation uses one camera
key; multi-camera evaluation scores the union of per-camera frames with
global ids.  Boxes match when IoU >= 0.5 (MOTChallenge convention).

The identity metrics follow the truth-to-result matching of Ristani et al.:
a min-cost bipartite assignment between ground-truth and predicted ids over
the whole sequence, with per-frame miss counts as costs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ingest import Detection, iou

# id -> [(camera, frame, box), ...]
TrajectorySet = dict[int, list[tuple[str, int, Detection]]]

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class MotSummary:
    mota: float
    idp: float
    idr: float
    idf1: float
    fp: int
    fn: int
    id_switches: int
    num_gt: int
    idtp: int
    idfp: int
    idfn: int


def _by_frame(traj: TrajectorySet) -> dict[tuple[str, int], dict[int, Detection]]:
    """Pivot id-major trajectories into per-(camera, frame) id->box maps."""
    frames: dict[tuple[str, int], dict[int, Detection]] = {}
    for tid, entries in traj.items():
        for camera, frame, box in entries:
            slot = frames.setdefault((camera, frame), {})
            if tid in slot:
                raise ValueError(
                    f"id {tid} appears twice in camera {camera!r} frame {frame}"
                )
            slot[tid] = box
    return frames


def _match_frame(
    gt_boxes: dict[int, Detection],
    pred_boxes: dict[int, Detection],
    carried: dict[int, int],
    thresh: float,
) -> dict[int, int]:
    """One frame of CLEAR matching: keep carried pairs still valid, then Hungarian."""
    matches: dict[int, int] = {}
    used_pred = set()
    for gid, pid in carried.items():
        if gid in gt_boxes and pid in pred_boxes and iou(gt_boxes[gid], pred_boxes[pid]) >= thresh:
            matches[gid] = pid
            used_pred.add(pid)

    free_gt = sorted(g for g in gt_boxes if g not in matches)
    free_pred = sorted(p for p in pred_boxes if p not in used_pred)
    if free_gt and free_pred:
        cost = np.ones((len(free_gt), len(free_pred)))
        for i, gid in enumerate(free_gt):
            for j, pid in enumerate(free_pred):
                cost[i, j] = 1.0 - iou(gt_boxes[gid], pred_boxes[pid])
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            if cost[i, j] <= 1.0 - thresh:
                matches[free_gt[i]] = free_pred[j]
    return matches


def evaluate_mota(
    gt: TrajectorySet, pred: TrajectorySet, iou_thresh: float = IOU_THRESHOLD
) -> MotSummary:
    """Full summary: CLEAR counts (FP/FN/switches/MOTA) plus identity scores.

    Matching carries over frame to frame per camera; an id switch is counted
    when a ground-truth id is matched to a different prediction than its last
    known one.  MOTA = 1 − (FP + FN + IDSW) / num_gt.
    """
    gt_frames = _by_frame(gt)
    pred_frames = _by_frame(pred)
    keys = sorted(set(gt_frames) | set(pred_frames))

    fp = fn = idsw = num_gt = 0
    carried: dict[str, dict[int, int]] = {}
    last_known: dict[tuple[str, int], int] = {}
    for key in keys:
        camera, _ = key
        gt_boxes = gt_frames.get(key, {})
        pred_boxes = pred_frames.get(key, {})
        matches = _match_frame(gt_boxes, pred_boxes, carried.get(camera, {}), iou_thresh)
        for gid, pid in matches.items():
            prev = last_known.get((camera, gid))
            if prev is not None and prev != pid:
                idsw += 1
            last_known[(camera, gid)] = pid
        fp += len(pred_boxes) - len(matches)
        fn += len(gt_boxes) - len(matches)
        num_gt += len(gt_boxes)
        carried[camera] = matches

    if num_gt > 0:
        mota = 1.0 - (fp + fn + idsw) / num_gt
    else:
        mota = 1.0 if fp == 0 else 0.0

    idp, idr, idf1, idtp, idfp, idfn = _identity_counts(gt, pred, iou_thresh)
    return MotSummary(
        mota=mota,
        idp=idp,
        idr=idr,
        idf1=idf1,
        fp=fp,
        fn=fn,
        id_switches=idsw,
        num_gt=num_gt,
        idtp=idtp,
        idfp=idfp,
        idfn=idfn,
    )


def evaluate_identity(
    gt: TrajectorySet, pred: TrajectorySet, iou_thresh: float = IOU_THRESHOLD
) -> tuple[float, float, float]:
    """(IDP, IDR, IDF1) under the optimal global id correspondence."""
    idp, idr, idf1, _, _, _ = _identity_counts(gt, pred, iou_thresh)
    return idp, idr, idf1


def _identity_counts(gt: TrajectorySet, pred: TrajectorySet, thresh: float):
    gt_ids = sorted(gt)
    pred_ids = sorted(pred)
    n_gt, n_pred = len(gt_ids), len(pred_ids)
    gt_len = {g: len(gt[g]) for g in gt_ids}
    pred_len = {p: len(pred[p]) for p in pred_ids}
    total_gt = sum(gt_len.values())
    total_pred = sum(pred_len.values())

    pred_frames: dict[int, dict[tuple[str, int], Detection]] = {
        p: {(camera, frame): box for camera, frame, box in pred[p]} for p in pred_ids
    }
    overlap = np.zeros((n_gt, n_pred), dtype=int)
    for i, g in enumerate(gt_ids):
        for camera, frame, box in gt[g]:
            for j, p in enumerate(pred_ids):
                other = pred_frames[p].get((camera, frame))
                if other is not None and iou(box, other) >= thresh:
                    overlap[i, j] += 1

    # (n_gt + n_pred) x (n_pred + n_gt) assignment: real pairs top-left,
    # per-id dummies on the diagonals, zero cost in the spillover block.
    big = float(total_gt + total_pred + 1)
    cost = np.full((n_gt + n_pred, n_pred + n_gt), big)
    for i, g in enumerate(gt_ids):
        for j, p in enumerate(pred_ids):
            cost[i, j] = gt_len[g] + pred_len[p] - 2 * overlap[i, j]
        cost[i, n_pred + i] = gt_len[g]
    for j, p in enumerate(pred_ids):
        cost[n_gt + j, j] = pred_len[p]
    cost[n_gt:, n_pred:] = 0.0

    idtp = 0
    if cost.size:
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            if r < n_gt and c < n_pred:
                idtp += int(overlap[r, c])
    idfp = total_pred - idtp
    idfn = total_gt - idtp
    idp = idtp / total_pred if total_pred else 0.0
    idr = idtp / total_gt if total_gt else 0.0
    idf1 = 2 * idtp / (total_gt + total_pred) if total_gt + total_pred else 0.0
    return idp, idr, idf1, idtp, idfp, idfn


def load_mot_trajectories(path, camera: str = "") -> TrajectorySet:
    """Read `frame,id,x,y,w,h,...` rows (MOTChallenge shape, 1-based or 0-based
    frames both fine — values are kept as written)."""
    traj: TrajectorySet = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            frame, tid = int(row[0]), int(row[1])
            x, y, w, h = (float(v) for v in row[2:6])
            det = Detection(x, y, x + w, y + h, alpha=1.0)
            traj.setdefault(tid, []).append((camera, frame, det))
    return traj


def load_global_trajectories(path) -> TrajectorySet:
    """Read `camera,frame,global_id,x,y,w,h` rows."""
    traj: TrajectorySet = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            camera, frame, gid = row[0], int(row[1]), int(row[2])
            x, y, w, h = (float(v) for v in row[3:7])
            det = Detection(x, y, x + w, y + h, alpha=1.0)
            traj.setdefault(gid, []).append((camera, frame, det))
    return traj


def write_global_trajectories(path, traj: TrajectorySet) -> None:
    """Write `camera,frame,global_id,x,y,w,h` rows in deterministic order."""
    rows = []
    for gid, entries in traj.items():
        for camera, frame, box in entries:
            rows.append(
                (
                    camera,
                    frame,
                    gid,
                    box.x1,
                    box.y1,
                    box.x2 - box.x1,
                    box.y2 - box.y1,
                )
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for camera, frame, gid, x, y, w, h in rows:
            writer.writerow([camera, frame, gid, f"{x:.4f}", f"{y:.4f}", f"{w:.4f}", f"{h:.4f}"])
