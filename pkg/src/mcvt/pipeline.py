"""End-to-end orchestration: sources -> per-camera trackers -> supervisor.

Offline mode replays every frame tick by tick: all cameras advance one frame,
the embedding provider is consulted once per tick, concluded tracks flow to
the cross-camera supervisor at its tick period, and nothing is ever dropped —
output is a pure function of the config and identical for any worker count.

Real-time mode paces each camera at its fps through a bounded queue holding
two seconds of frames.  When a consumer falls behind, the oldest queued frame
is dropped so processing stays near live time; drops are reported.  The
provider is serialized behind a lock in both modes (it stands in for a shared
GPU inference service).
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simkit
from .errors import ConfigError, SourceMissing
from .geo import CameraTopology
from .ingest import FrameRecord, TickBatch, filter_confidence_indices, nms_indices
from .mct import (
    MctConfig,
    MultiCameraStore,
    identities_to_trajectories,
    summarize_identities,
    supervisor_tick,
)
from .metrics import write_global_trajectories
from .reid import TemporalScorer, temporal_aggregate
from .sct import SingleCameraTracker, TrackerParams

QUEUE_SECONDS = 2.0  # bounded-queue capacity in real-time mode


@dataclass
class PipelineConfig:
    scenario_dir: str | None = None  # read a written scenario directory
    sim: dict | None = None  # or generate+render in memory (gen_scenario kwargs + "noise")
    alpha_min: float = 0.1
    nms_iou: float | None = None  # None disables the NMS stage
    tracker: TrackerParams = field(default_factory=TrackerParams)
    mct: MctConfig = field(default_factory=MctConfig)
    real_time: bool = False
    workers: int = 1
    out_dir: str | None = None
    scorer_path: str | None = None  # learned temporal scorer weights (EMB1 x2)
    provider_delay_s: float = 0.0  # testing hook: slow embedding service
    stall_timeout_s: float = 5.0  # real-time: stalled source treated as end-of-stream

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= 1.0:
            raise ConfigError(f"alpha_min must be in [0, 1], got {self.alpha_min}")
        if self.nms_iou is not None and not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if (self.scenario_dir is None) == (self.sim is None):
            raise ConfigError("exactly one of scenario_dir or sim must be set")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        try:
            tracker = TrackerParams(**data.pop("tracker", {}))
            mct = MctConfig(**data.pop("mct", {}))
            return cls(tracker=tracker, mct=mct, **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


@dataclass
class RunReport:
    frames: dict[str, int]
    dropped: dict[str, int]
    n_concluded: int
    n_identities: int
    wall_time_s: float
    latency_p50_ms: float
    latency_p99_ms: float
    latency_max_ms: float
    real_time: bool
    identities: list = field(default_factory=list, repr=False)
    latencies_s: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "dropped": self.dropped,
            "n_concluded": self.n_concluded,
            "n_identities": self.n_identities,
            "wall_time_s": self.wall_time_s,
            "latency_p50_ms": self.latency_p50_ms,
            "latency_p99_ms": self.latency_p99_ms,
            "latency_max_ms": self.latency_max_ms,
            "real_time": self.real_time,
        }


class PassThroughProvider:
    """Uses the embeddings already attached to each frame (oracle/file source)."""

    def __call__(self, batch: TickBatch):
        return [frame.embeddings for frame in batch.frames]


class DelayProvider(PassThroughProvider):
    """Pass-through plus a fixed sleep per request; models a slow GPU service."""

    def __init__(self, delay_s: float):
        self.delay_s = delay_s

    def __call__(self, batch: TickBatch):
        if self.delay_s > 0.0:
            time.sleep(self.delay_s)
        return super().__call__(batch)


def _load_source(cfg: PipelineConfig):
    """Resolve the config into (topology, per-camera streams, fps, n_frames)."""
    if cfg.scenario_dir is not None:
        directory = Path(cfg.scenario_dir)
        if not (directory / "scenario.json").exists():
            raise SourceMissing(f"no scenario.json under {directory}")
        scenario, streams = simkit.load_scenario_dir(directory)
    else:
        sim = dict(cfg.sim)
        noise = sim.pop("noise", {})
        try:
            scenario, gt = simkit.gen_scenario(**sim)
            profile = simkit.NoiseProfile(**noise)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sim config: {exc}") from exc
        streams = simkit.render_detections(scenario, gt, profile)
    return scenario.topology, streams, scenario.fps, scenario.n_frames


def _worker_count(cfg: PipelineConfig, n_cams: int) -> int:
    cap = os.environ.get("MCT_THREADS")
    limit = int(cap) if cap else cfg.workers
    return max(1, min(cfg.workers, limit, n_cams))


def _prepare(frame: FrameRecord, cfg: PipelineConfig) -> FrameRecord:
    """Confidence filter then optional NMS, embeddings kept aligned."""
    keep = filter_confidence_indices(frame.detections, cfg.alpha_min)
    record = frame.select(keep)
    if cfg.nms_iou is not None and record.detections:
        record = record.select(nms_indices(record.detections, cfg.nms_iou))
    return record


def _build_trackers(topo: CameraTopology, fps: float, cfg: PipelineConfig):
    if cfg.scorer_path is not None:
        scorer = TemporalScorer.load(cfg.scorer_path)
    else:
        scorer = TemporalScorer()
    aggregator = lambda rows: temporal_aggregate(rows, scorer)  # noqa: E731
    return {
        cid: SingleCameraTracker(
            camera=cid,
            fps=fps,
            homography=topo.cameras[cid].homography,
            params=cfg.tracker,
            aggregator=aggregator,
        )
        for cid in sorted(topo.cameras)
    }


def run(cfg: PipelineConfig, provider=None) -> RunReport:
    """Execute the pipeline; returns the report (identities attached).

    When out_dir is set, writes global_tracks.csv, identities.json,
    report.json, and one sct_<camera>.csv per camera.
    """
    topo, streams, fps, n_frames = _load_source(cfg)
    if provider is None:
        provider = DelayProvider(cfg.provider_delay_s) if cfg.provider_delay_s else PassThroughProvider()
    trackers = _build_trackers(topo, fps, cfg)
    started = time.perf_counter()
    if cfg.real_time:
        report = _run_real_time(cfg, topo, streams, fps, n_frames, trackers, provider)
    else:
        report = _run_offline(cfg, topo, streams, fps, n_frames, trackers, provider)
    report.wall_time_s = time.perf_counter() - started

    if cfg.out_dir is not None:
        _write_outputs(cfg, report)
    return report


def _supervise_loop_state(cfg: PipelineConfig):
    return MultiCameraStore(), [], []


def _run_offline(cfg, topo, streams, fps, n_frames, trackers, provider):
    cameras = sorted(streams)
    n_workers = _worker_count(cfg, len(cameras))
    sup_every = max(1, int(round(cfg.mct.tick_period * fps)))
    store, pending, finished = _supervise_loop_state(cfg)
    concluded_all: dict[str, list] = {cid: [] for cid in cameras}
    latencies = []

    def step_camera(cid: str, record: FrameRecord):
        _, concluded = trackers[cid].step(record)
        return concluded

    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        for frame_idx in range(n_frames):
            tick_started = time.perf_counter()
            prepared = {cid: _prepare(streams[cid][frame_idx], cfg) for cid in cameras}
            batch = TickBatch(tick=frame_idx, frames=[prepared[cid] for cid in cameras])
            for record, emb in zip(batch.frames, provider(batch)):
                if record.detections and emb is None:
                    raise SourceMissing(
                        f"camera {record.camera}: detections without embeddings"
                    )
                record.embeddings = emb
            if pool is not None:
                results = list(pool.map(step_camera, cameras, batch.frames))
            else:
                results = [step_camera(cid, rec) for cid, rec in zip(cameras, batch.frames)]
            for cid, concluded in zip(cameras, results):
                concluded_all[cid].extend(concluded)
                pending.extend(concluded)
            if (frame_idx + 1) % sup_every == 0:
                now = frame_idx / fps
                _, flushed = supervisor_tick(store, pending, now, topo, cfg.mct)
                pending = []
                finished.extend(flushed)
            latencies.append(time.perf_counter() - tick_started)
    finally:
        if pool is not None:
            pool.shutdown()

    for cid in cameras:
        tail = trackers[cid].finish()
        concluded_all[cid].extend(tail)
        pending.extend(tail)
    _, flushed = supervisor_tick(store, pending, n_frames / fps, topo, cfg.mct)
    finished.extend(flushed)
    finished.extend(store.drain())

    return _make_report(
        frames={cid: n_frames for cid in cameras},
        dropped={cid: 0 for cid in cameras},
        concluded_all=concluded_all,
        finished=finished,
        latencies=latencies,
        real_time=False,
    )


def _run_real_time(cfg, topo, streams, fps, n_frames, trackers, provider):
    cameras = sorted(streams)
    capacity = max(1, int(QUEUE_SECONDS * fps))
    queues = {cid: queue.Queue(maxsize=capacity) for cid in cameras}
    dropped = {cid: 0 for cid in cameras}
    processed = {cid: 0 for cid in cameras}
    concluded_all: dict[str, list] = {cid: [] for cid in cameras}
    pending: list = []
    pending_lock = threading.Lock()
    provider_lock = threading.Lock()
    latencies: list[float] = []
    latency_lock = threading.Lock()
    start = time.perf_counter()

    def produce(cid: str):
        q = queues[cid]
        for record in streams[cid]:
            due = start + record.frame_index / fps
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            while True:
                try:
                    q.put_nowait(record)
                    break
                except queue.Full:
                    try:
                        q.get_nowait()  # drop the oldest frame, stay near live
                        dropped[cid] += 1
                    except queue.Empty:
                        pass
        while True:  # end-of-stream marker, same drop-oldest discipline
            try:
                q.put_nowait(None)
                break
            except queue.Full:
                try:
                    q.get_nowait()
                    dropped[cid] += 1
                except queue.Empty:
                    pass

    def consume(cid: str):
        tracker = trackers[cid]
        q = queues[cid]
        while True:
            try:
                record = q.get(timeout=cfg.stall_timeout_s)
            except queue.Empty:
                break  # stalled source: treat as end of stream
            if record is None:
                break
            t0 = time.perf_counter()
            prepared = _prepare(record, cfg)
            with provider_lock:
                embs = provider(TickBatch(tick=record.frame_index, frames=[prepared]))
            prepared.embeddings = embs[0]
            _, concluded = tracker.step(prepared)
            processed[cid] += 1
            if concluded:
                with pending_lock:
                    pending.extend(concluded)
            concluded_all[cid].extend(concluded)
            with latency_lock:
                latencies.append(time.perf_counter() - t0)

    producers = [threading.Thread(target=produce, args=(cid,), daemon=True) for cid in cameras]
    consumers = [threading.Thread(target=consume, args=(cid,), daemon=True) for cid in cameras]
    for t in producers + consumers:
        t.start()

    store, _, finished = _supervise_loop_state(cfg)
    while any(t.is_alive() for t in consumers):
        time.sleep(cfg.mct.tick_period)
        with pending_lock:
            batch, pending = pending, []
        now = time.perf_counter() - start
        _, flushed = supervisor_tick(store, batch, now, topo, cfg.mct)
        finished.extend(flushed)
    for t in producers + consumers:
        t.join()

    for cid in cameras:
        tail = trackers[cid].finish()
        concluded_all[cid].extend(tail)
        pending.extend(tail)
    with pending_lock:
        batch = pending + []
    _, flushed = supervisor_tick(store, batch, time.perf_counter() - start, topo, cfg.mct)
    finished.extend(flushed)
    finished.extend(store.drain())

    return _make_report(
        frames=processed,
        dropped=dropped,
        concluded_all=concluded_all,
        finished=finished,
        latencies=latencies,
        real_time=True,
    )


def _make_report(frames, dropped, concluded_all, finished, latencies, real_time):
    lat = np.asarray(latencies) if latencies else np.zeros(1)
    return RunReport(
        frames=frames,
        dropped=dropped,
        n_concluded=sum(len(v) for v in concluded_all.values()),
        n_identities=len(finished),
        wall_time_s=0.0,
        latency_p50_ms=float(np.percentile(lat, 50) * 1e3),
        latency_p99_ms=float(np.percentile(lat, 99) * 1e3),
        latency_max_ms=float(np.max(lat) * 1e3),
        real_time=real_time,
        identities=finished,
        latencies_s=list(latencies),
    )


def _write_outputs(cfg: PipelineConfig, report: RunReport) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_global_trajectories(out / "global_tracks.csv", identities_to_trajectories(report.identities))
    (out / "identities.json").write_text(
        json.dumps(summarize_identities(report.identities), indent=2, sort_keys=True) + "\n"
    )
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    per_camera: dict[str, list] = {}
    for identity in report.identities:
        for member in identity.members:
            per_camera.setdefault(member.camera, []).append(member)
    for cid in sorted(per_camera):
        rows = []
        for track in per_camera[cid]:
            for frame, box in track.boxes:
                rows.append(
                    (frame, track.track_id, box.x1, box.y1, box.width, box.height, int(box.beta))
                )
        rows.sort(key=lambda r: (r[0], r[1]))
        with open(out / f"sct_{cid}.csv", "w", newline="") as fh:
            for frame, tid, x, y, w, h, beta in rows:
                fh.write(f"{frame},{tid},{x:.4f},{y:.4f},{w:.4f},{h:.4f},1,{beta},1\n")
