"""Deterministic synthetic traffic scenarios for desk-scale testing.

Generates vehicles driving through a chain (or grid) of cameras along
straight roads, projects their ground-contact points into each camera's image
through the camera homography, and renders noisy detection streams with
identity-clustered embeddings from a prototype oracle.  Everything is a pure
function of (seed, config): randomness uses counter-based Philox streams with
one stream per role and per (camera, frame), so parallel rendering cannot
change the output.

Geometry: cameras sit 150 m apart with 60 m-long non-overlapping viewports
(90 m blind gap between neighbours), roads carry one lane per direction
offset 2.5 m from the centerline, and the flat-earth conversion uses the
spherical meridian degree (~111,194.93 m) on both axes at latitude ~0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidLayout, UnknownIdentity
from .geo import (
    CameraInfo,
    GeoPoint,
    Homography,
    PixelPoint,
    geo_to_pixel,
    make_topology,
    topology_from_dict,
    topology_to_dict,
)
from .ingest import Detection, FrameRecord, VehicleClass, write_detection_csv
from .reid import read_embedding_block, write_embedding_block

METERS_PER_DEGREE = math.pi * 6_371_000.0 / 180.0  # meridian degree, ~111194.93 m

CAM_SPACING_M = 150.0
VIEW_LENGTH_M = 60.0
VIEW_WIDTH_M = 12.0
ROW_SPACING_M = 600.0  # grid layout: latitude gap between parallel roads
LANE_OFFSET_M = 2.5
IMAGE_SIZE = (1280, 720)
SPEED_RANGE = (8.0, 14.0)  # m/s

_CLASS_CHOICES = [VehicleClass.CAR, VehicleClass.BUS, VehicleClass.TRUCK,
                  VehicleClass.VAN, VehicleClass.SUV]
_CLASS_WEIGHTS = [0.60, 0.08, 0.12, 0.08, 0.12]
_CLASS_LENGTH_M = {
    VehicleClass.CAR: 4.5,
    VehicleClass.BUS: 11.0,
    VehicleClass.TRUCK: 8.5,
    VehicleClass.VAN: 5.5,
    VehicleClass.SUV: 5.0,
    VehicleClass.OTHER: 4.5,
}
_BOX_ASPECT = 0.72  # box height as a fraction of its width

# Philox stream tags (first spawn_key element)
_TAG_VEHICLES = 0
_TAG_PROTOTYPES = 1
_TAG_RENDER = 2


def _stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based RNG stream, reproducible across platforms and threads."""
    return np.random.Generator(
        np.random.Philox(seed=np.random.SeedSequence(entropy=seed, spawn_key=key))
    )


@dataclass(frozen=True)
class VehicleSpec:
    global_id: int
    row: int
    entry_time: float
    speed: float  # m/s along the road
    direction: int  # +1 eastbound, -1 westbound
    lane_offset_m: float
    length_m: float
    vehicle_class: VehicleClass

    def position_m(self, t: float, road_length: float) -> float | None:
        """Distance from the road's west end at time t, None when off the road."""
        if t < self.entry_time:
            return None
        travelled = self.speed * (t - self.entry_time)
        x = travelled if self.direction > 0 else road_length - travelled
        if 0.0 <= x <= road_length:
            return x
        return None

    def path(self, road_length: float) -> list[tuple[float, GeoPoint]]:
        """Entry and exit waypoints (piecewise-linear, constant speed)."""
        x0 = 0.0 if self.direction > 0 else road_length
        x1 = road_length - x0
        lat = (self.row * ROW_SPACING_M + self.lane_offset_m) / METERS_PER_DEGREE
        t1 = self.entry_time + road_length / self.speed
        return [
            (self.entry_time, GeoPoint(lat, x0 / METERS_PER_DEGREE)),
            (t1, GeoPoint(lat, x1 / METERS_PER_DEGREE)),
        ]


@dataclass
class Scenario:
    seed: int
    layout: str
    rows: int
    cols: int
    fps: float
    duration_s: float
    image_size: tuple[int, int]
    embed_dim: int
    vehicles: list[VehicleSpec]
    topology: object = None

    def __post_init__(self):
        if self.topology is None:
            self.topology = _build_topology(self.rows, self.cols, self.fps)

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def road_length(self) -> float:
        return self.cols * CAM_SPACING_M

    @property
    def camera_ids(self) -> list[str]:
        return sorted(self.topology.cameras)


def _camera_id(index: int) -> str:
    return f"c{index + 1:03d}"


def _camera_geometry(index: int, rows: int, cols: int):
    """(row, x-center of the viewport in metres, road latitude in metres)."""
    row, col = divmod(index, cols)
    return row, (col + 0.5) * CAM_SPACING_M, row * ROW_SPACING_M


def _build_topology(rows: int, cols: int, fps: float):
    n = rows * cols
    width, height = IMAGE_SIZE
    cameras = []
    for k in range(n):
        row, x_center, lat_m = _camera_geometry(k, rows, cols)
        lon_w = (x_center - VIEW_LENGTH_M / 2.0) / METERS_PER_DEGREE
        lon_e = (x_center + VIEW_LENGTH_M / 2.0) / METERS_PER_DEGREE
        lat_s = (lat_m - VIEW_WIDTH_M / 2.0) / METERS_PER_DEGREE
        lat_n = (lat_m + VIEW_WIDTH_M / 2.0) / METERS_PER_DEGREE
        # Affine pixel -> (lon, lat): x spans the viewport west-east, y south-north.
        h = Homography(
            [
                [(lon_e - lon_w) / width, 0.0, lon_w],
                [0.0, (lat_n - lat_s) / height, lat_s],
                [0.0, 0.0, 1.0],
            ]
        )
        cameras.append(
            CameraInfo(
                id=_camera_id(k),
                position=GeoPoint(lat_m / METERS_PER_DEGREE, x_center / METERS_PER_DEGREE),
                homography=h,
                fps=fps,
            )
        )
    adjacent = []
    for k in range(n):
        row, col = divmod(k, cols)
        if col + 1 < cols:
            adjacent.append((_camera_id(k), _camera_id(k + 1)))
        if row + 1 < rows:
            adjacent.append((_camera_id(k), _camera_id(k + cols)))
    return make_topology(cameras, adjacent)


def gen_scenario(
    seed: int,
    n_cams: int,
    n_vehicles: int,
    duration_s: float,
    fps: float = 10.0,
    layout: str = "corridor",
    embed_dim: int = 64,
):
    """Deterministic scenario plus its ground truth.

    Corridor: one west-east road through a chain of adjacent cameras.
    Grid: the cameras arranged in rows of parallel corridors (adjacency is the
    4-neighbourhood); each vehicle drives along one row.
    """
    if n_cams < 1:
        raise ValueError(f"need at least one camera, got {n_cams}")
    if n_vehicles < 0:
        raise ValueError(f"vehicle count must be >= 0, got {n_vehicles}")
    if duration_s <= 0 or fps <= 0:
        raise ValueError("duration_s and fps must be positive")
    if layout == "corridor":
        rows, cols = 1, n_cams
    elif layout == "grid":
        cols = max(1, math.ceil(math.sqrt(n_cams)))
        rows = math.ceil(n_cams / cols)
        if rows * cols != n_cams:
            raise InvalidLayout(
                f"grid layout needs rows*cols == n_cams; {n_cams} is not {rows}x{cols}"
            )
    else:
        raise InvalidLayout(f"unknown layout {layout!r} (expected corridor or grid)")

    rng = _stream(seed, _TAG_VEHICLES)
    per_direction = max(1, math.ceil(n_vehicles / 2))
    stagger = 0.85 * duration_s / per_direction
    counters = {1: 0, -1: 0}
    vehicles = []
    for i in range(n_vehicles):
        direction = 1 if i % 2 == 0 else -1
        j = counters[direction]
        counters[direction] += 1
        entry = j * stagger + rng.uniform(0.0, stagger / 2.0)
        speed = rng.uniform(*SPEED_RANGE)
        row = int(rng.integers(rows))
        cls = _CLASS_CHOICES[rng.choice(len(_CLASS_CHOICES), p=_CLASS_WEIGHTS)]
        vehicles.append(
            VehicleSpec(
                global_id=i + 1,
                row=row,
                entry_time=float(entry),
                speed=float(speed),
                direction=direction,
                lane_offset_m=-LANE_OFFSET_M * direction,
                length_m=_CLASS_LENGTH_M[cls],
                vehicle_class=cls,
            )
        )
    scenario = Scenario(
        seed=seed,
        layout=layout,
        rows=rows,
        cols=cols,
        fps=fps,
        duration_s=duration_s,
        image_size=IMAGE_SIZE,
        embed_dim=embed_dim,
        vehicles=vehicles,
    )
    return scenario, ground_truth(scenario)


@dataclass
class GroundTruth:
    """Per camera, per frame: the (global_id, box) pairs fully in view."""

    boxes: dict[str, dict[int, list[tuple[int, Detection]]]]
    n_frames: int

    def trajectories(self) -> dict[int, list[tuple[str, int, Detection]]]:
        traj: dict[int, list] = {}
        for camera in sorted(self.boxes):
            for frame in sorted(self.boxes[camera]):
                for gid, det in self.boxes[camera][frame]:
                    traj.setdefault(gid, []).append((camera, frame, det))
        return traj


def ground_truth(scenario: Scenario) -> GroundTruth:
    """Project every vehicle through every camera it crosses, frame by frame."""
    width, height = scenario.image_size
    road_len = scenario.road_length
    boxes: dict[str, dict[int, list[tuple[int, Detection]]]] = {
        cid: {} for cid in scenario.camera_ids
    }
    for k, cid in enumerate(scenario.camera_ids):
        cam = scenario.topology.cameras[cid]
        row, x_center, lat_m = _camera_geometry(k, scenario.rows, scenario.cols)
        x_lo, x_hi = x_center - VIEW_LENGTH_M / 2.0, x_center + VIEW_LENGTH_M / 2.0
        for veh in scenario.vehicles:
            if veh.row != row:
                continue
            for frame in _frames_in_view(veh, x_lo, x_hi, scenario):
                x = veh.position_m(frame / scenario.fps, road_len)
                if x is None or not x_lo <= x <= x_hi:
                    continue
                point = GeoPoint(
                    (lat_m + veh.lane_offset_m) / METERS_PER_DEGREE,
                    x / METERS_PER_DEGREE,
                )
                px = geo_to_pixel(cam.homography, point)
                w_px = veh.length_m * width / VIEW_LENGTH_M
                h_px = _BOX_ASPECT * w_px
                x1, y1 = px.x - w_px / 2.0, px.y - h_px
                x2, y2 = px.x + w_px / 2.0, px.y
                if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
                    continue  # only fully visible boxes are ground truth
                det = Detection(x1, y1, x2, y2, alpha=1.0, beta=veh.vehicle_class)
                boxes[cid].setdefault(frame, []).append((veh.global_id, det))
    return GroundTruth(boxes=boxes, n_frames=scenario.n_frames)


def _frames_in_view(veh: VehicleSpec, x_lo: float, x_hi: float, scenario: Scenario):
    """Frame indices when the vehicle's ground point can be inside [x_lo, x_hi]."""
    if veh.direction > 0:
        t_in = veh.entry_time + x_lo / veh.speed
        t_out = veh.entry_time + x_hi / veh.speed
    else:
        road_len = scenario.road_length
        t_in = veh.entry_time + (road_len - x_hi) / veh.speed
        t_out = veh.entry_time + (road_len - x_lo) / veh.speed
    first = max(0, math.ceil(t_in * scenario.fps))
    last = min(scenario.n_frames - 1, math.floor(t_out * scenario.fps))
    return range(first, last + 1)


@dataclass(frozen=True)
class NoiseProfile:
    box_jitter_std: float = 0.0  # pixels, applied to the box center
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0  # expected spurious boxes per frame
    embedding_noise_std: float = 0.0

    def __post_init__(self):
        if self.box_jitter_std < 0 or self.embedding_noise_std < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if not 0.0 <= self.miss_rate < 1.0:
            raise ValueError(f"miss_rate must be in [0, 1), got {self.miss_rate}")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")


class EmbeddingOracle:
    """Identity-clustered unit vectors standing in for a trained CNN.

    Prototypes are Gram-Schmidt orthonormalized random draws while the
    identity count fits in the dimension (pairwise dot products exactly 0),
    plain unit-sphere draws otherwise.  A draw perturbs the prototype with
    iid Gaussian noise of the given std and re-normalizes.
    """

    def __init__(self, identities, dim: int = 64, sigma: float = 0.0, seed: int = 0):
        identities = sorted(identities)
        rng = _stream(seed, _TAG_PROTOTYPES)
        raw = rng.standard_normal((len(identities), dim))
        vecs = []
        for rowvec in raw:
            v = rowvec.copy()
            if len(vecs) < dim:
                for p in vecs:
                    v -= (v @ p) * p
            norm = np.linalg.norm(v)
            if norm < 1e-12:
                raise ValueError("degenerate prototype draw")
            vecs.append(v / norm)
        self.dim = dim
        self.sigma = sigma
        self.prototypes = dict(zip(identities, vecs))

    def prototype(self, identity) -> np.ndarray:
        try:
            return self.prototypes[identity]
        except KeyError:
            raise UnknownIdentity(f"no prototype for identity {identity!r}") from None

    def oracle_embedding(self, identity, draw=None, sigma: float | None = None) -> np.ndarray:
        """Unit embedding for the identity; `draw` is a Generator or int seed."""
        proto = self.prototype(identity)
        sigma = self.sigma if sigma is None else sigma
        if sigma == 0.0:
            return proto.copy()
        rng = draw if isinstance(draw, np.random.Generator) else _stream(draw or 0, _TAG_RENDER)
        noisy = proto + sigma * rng.standard_normal(self.dim)
        return noisy / np.linalg.norm(noisy)


def render_detections(
    scenario: Scenario,
    gt: GroundTruth,
    profile: NoiseProfile,
    oracle: EmbeddingOracle | None = None,
    seed: int | None = None,
) -> dict[str, list[FrameRecord]]:
    """Noisy per-camera detection streams (one FrameRecord per frame, gaps kept).

    Each GT box is independently dropped with miss_rate, the survivors'
    centers are jittered, Poisson false positives get random boxes with fresh
    random embeddings, and true boxes carry oracle embeddings of their id.
    Each (camera, frame) owns its RNG stream, so rendering order is free.
    """
    seed = scenario.seed if seed is None else seed
    if oracle is None:
        oracle = EmbeddingOracle(
            [v.global_id for v in scenario.vehicles],
            dim=scenario.embed_dim,
            sigma=profile.embedding_noise_std,
            seed=seed,
        )
    width, height = scenario.image_size
    streams: dict[str, list[FrameRecord]] = {}
    for cam_index, cid in enumerate(scenario.camera_ids):
        frames = []
        per_frame = gt.boxes.get(cid, {})
        for frame in range(scenario.n_frames):
            rng = _stream(seed, _TAG_RENDER, cam_index, frame)
            dets: list[Detection] = []
            embs: list[np.ndarray] = []
            for gid, box in per_frame.get(frame, []):
                if profile.miss_rate > 0.0 and rng.random() < profile.miss_rate:
                    continue
                if profile.box_jitter_std > 0.0:
                    dx, dy = rng.normal(0.0, profile.box_jitter_std, size=2)
                    box = Detection(
                        box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy,
                        alpha=box.alpha, beta=box.beta,
                    )
                dets.append(box)
                embs.append(oracle.oracle_embedding(gid, draw=rng))
            if profile.false_positive_rate > 0.0:
                for _ in range(rng.poisson(profile.false_positive_rate)):
                    w_px = rng.uniform(60.0, 140.0)
                    h_px = _BOX_ASPECT * w_px
                    cx = rng.uniform(w_px / 2.0, width - w_px / 2.0)
                    cy = rng.uniform(h_px, height)
                    dets.append(
                        Detection(
                            cx - w_px / 2.0, cy - h_px, cx + w_px / 2.0, cy,
                            alpha=float(rng.uniform(0.5, 1.0)),
                            beta=VehicleClass.from_value(int(rng.integers(1, 7))),
                        )
                    )
                    fake = rng.standard_normal(oracle.dim)
                    embs.append(fake / np.linalg.norm(fake))
            frames.append(
                FrameRecord(
                    camera=cid,
                    frame_index=frame,
                    timestamp=frame / scenario.fps,
                    detections=dets,
                    embeddings=np.stack(embs) if embs else None,
                )
            )
        streams[cid] = frames
    return streams


def _scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "topology": topology_to_dict(scenario.topology),
        "sim": {
            "seed": scenario.seed,
            "layout": scenario.layout,
            "rows": scenario.rows,
            "cols": scenario.cols,
            "fps": scenario.fps,
            "duration_s": scenario.duration_s,
            "image_size": list(scenario.image_size),
            "embed_dim": scenario.embed_dim,
            "vehicles": [
                {
                    "global_id": v.global_id,
                    "row": v.row,
                    "entry_time": v.entry_time,
                    "speed": v.speed,
                    "direction": v.direction,
                    "lane_offset_m": v.lane_offset_m,
                    "length_m": v.length_m,
                    "class": int(v.vehicle_class),
                }
                for v in scenario.vehicles
            ],
        },
    }


def _scenario_from_dict(data: dict) -> Scenario:
    sim = data["sim"]
    vehicles = [
        VehicleSpec(
            global_id=v["global_id"],
            row=v["row"],
            entry_time=v["entry_time"],
            speed=v["speed"],
            direction=v["direction"],
            lane_offset_m=v["lane_offset_m"],
            length_m=v["length_m"],
            vehicle_class=VehicleClass.from_value(v["class"]),
        )
        for v in sim["vehicles"]
    ]
    return Scenario(
        seed=sim["seed"],
        layout=sim["layout"],
        rows=sim["rows"],
        cols=sim["cols"],
        fps=sim["fps"],
        duration_s=sim["duration_s"],
        image_size=tuple(sim["image_size"]),
        embed_dim=sim["embed_dim"],
        vehicles=vehicles,
        topology=topology_from_dict(data["topology"]),
    )


def write_scenario_dir(
    scenario: Scenario,
    gt: GroundTruth,
    streams: dict[str, list[FrameRecord]],
    outdir,
) -> None:
    """Write scenario.json plus per-camera GT/detection CSVs and embeddings.

    GT rows use the MOTChallenge shape `frame,id,x,y,w,h,1,class,1`;
    embedding rows align with detection CSV rows in (frame, row) order.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "scenario.json").write_text(
        json.dumps(_scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"
    )
    for cid in scenario.camera_ids:
        with open(outdir / f"gt_{cid}.csv", "w", newline="") as fh:
            for frame in sorted(gt.boxes.get(cid, {})):
                for gid, d in gt.boxes[cid][frame]:
                    fh.write(
                        f"{frame},{gid},{d.x1:.4f},{d.y1:.4f},"
                        f"{d.width:.4f},{d.height:.4f},1,{int(d.beta)},1\n"
                    )
        records = streams[cid]
        write_detection_csv(
            outdir / f"det_{cid}.csv",
            {r.frame_index: r.detections for r in records if r.detections},
        )
        rows = [r.embeddings for r in records if r.embeddings is not None]
        stacked = np.vstack(rows) if rows else np.zeros((0, scenario.embed_dim))
        with open(outdir / f"emb_{cid}.bin", "wb") as fh:
            write_embedding_block(fh, stacked)


def load_scenario_dir(outdir) -> tuple[Scenario, dict[str, list[FrameRecord]]]:
    """Read a written scenario directory back into streams (float32 embeddings)."""
    outdir = Path(outdir)
    scenario = _scenario_from_dict(json.loads((outdir / "scenario.json").read_text()))
    from .ingest import read_detection_csv

    streams: dict[str, list[FrameRecord]] = {}
    for cid in scenario.camera_ids:
        frames = read_detection_csv(outdir / f"det_{cid}.csv")
        with open(outdir / f"emb_{cid}.bin", "rb") as fh:
            emb = read_embedding_block(fh)
        cursor = 0
        records = []
        for frame in range(scenario.n_frames):
            dets = frames.get(frame, [])
            rows = emb[cursor : cursor + len(dets)] if dets else None
            cursor += len(dets)
            records.append(
                FrameRecord(cid, frame, frame / scenario.fps, dets, rows)
            )
        if cursor != emb.shape[0]:
            raise ValueError(
                f"camera {cid}: {emb.shape[0]} embeddings for {cursor} detections"
            )
        streams[cid] = records
    return scenario, streams


def load_ground_truth(outdir, scenario: Scenario) -> dict[int, list]:
    """Merge the per-camera GT CSVs into one global-id trajectory set."""
    from .metrics import load_mot_trajectories

    outdir = Path(outdir)
    traj: dict[int, list] = {}
    for cid in scenario.camera_ids:
        per = load_mot_trajectories(outdir / f"gt_{cid}.csv", camera=cid)
        for gid, entries in per.items():
            traj.setdefault(gid, []).extend(entries)
    return traj
