"""Cross-camera association: traffic rules, similarity, constrained clustering.

Concluded single-camera tracks are compared pairwise with an appearance score
(1 - ||f_i - f_j||/2 on unit embeddings) gated by five traffic rules:

  1. two tracks from one camera never share an identity;
  2. tracks of non-overlapping cameras must not overlap in time;
  3. the implied travel speed weights the score by a quadratic prior
     sim_v = max(0, 4*v*(v_max - v) / v_max^2), peaking at v_max/2;
  4. only adjacent cameras in the topology can be matched;
  5. the direction of travel must stay consistent across the camera pair.

Scores below tau_min are zeroed and the rest drive a greedy agglomeration
that never lets a cluster contain two tracks from one camera.  The supervisor
runs this at a fixed tick period over newly concluded tracks plus
representatives of the identities it already holds, and flushes identities
that have been inactive past a horizon.

Note on rule 3: the quadratic prior is normalized by v_max squared, the only
scaling that makes it unitless with range [0, 1]; see README for discussion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonPositiveDt
from .geo import CameraTopology, GeoPoint, are_adjacent, are_overlapping, haversine_distance
from .reid import l2_normalize, mitigate_camera_bias
from .sct import ConcludedTrack


@dataclass
class MctConfig:
    tau_min: float = 0.15
    v_max: float = 40.0  # m/s
    flush_horizon: float = 120.0  # seconds
    tick_period: float = 2.0  # seconds
    bias_lambda: float = 0.1  # camera-bias subtraction weight
    use_adjacency: bool = True  # traffic rule 4
    use_direction: bool = True  # traffic rule 5

    def __post_init__(self):
        if not 0.0 <= self.tau_min <= 1.0:
            raise ValueError(f"tau_min must be in [0, 1], got {self.tau_min}")
        if self.v_max <= 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        if self.flush_horizon <= 0 or self.tick_period <= 0:
            raise ValueError("flush_horizon and tick_period must be positive")
        if not 0.0 <= self.bias_lambda <= 1.0:
            raise ValueError(f"bias_lambda must be in [0, 1], got {self.bias_lambda}")


@dataclass(frozen=True)
class Candidate:
    """A clustering participant: one concluded track or one existing identity.

    Multi-member candidates carry the endpoints of their earliest-starting and
    latest-ending member so that the speed and direction rules keep operating
    on physical entry/exit points.
    """

    cameras: frozenset
    start_camera: str
    end_camera: str
    embedding: np.ndarray
    t_s: float
    t_e: float
    l_s: GeoPoint
    l_e: GeoPoint
    tracks: tuple
    existing_id: int | None = None

    @classmethod
    def from_track(cls, track: ConcludedTrack) -> "Candidate":
        return cls(
            cameras=frozenset([track.camera]),
            start_camera=track.camera,
            end_camera=track.camera,
            embedding=track.embedding,
            t_s=track.t_s,
            t_e=track.t_e,
            l_s=track.l_s,
            l_e=track.l_e,
            tracks=(track,),
        )

    @classmethod
    def from_identity(cls, identity: "MultiCameraTrack") -> "Candidate":
        members = identity.members
        first = min(members, key=lambda t: (t.t_s, t.camera, t.track_id))
        last = max(members, key=lambda t: (t.t_e, t.camera, t.track_id))
        return cls(
            cameras=frozenset(t.camera for t in members),
            start_camera=first.camera,
            end_camera=last.camera,
            embedding=l2_normalize(np.mean([t.embedding for t in members], axis=0)),
            t_s=first.t_s,
            t_e=last.t_e,
            l_s=first.l_s,
            l_e=last.l_e,
            tracks=tuple(members),
            existing_id=identity.global_id,
        )

    @property
    def sort_key(self):
        return (
            self.t_e,
            self.t_s,
            tuple(sorted(self.cameras)),
            tuple(sorted((t.camera, t.track_id) for t in self.tracks)),
        )

    @property
    def tie_key(self):
        return min((t.camera, t.track_id) for t in self.tracks)


@dataclass
class MultiCameraTrack:
    global_id: int
    members: list  # ConcludedTracks, pairwise camera-distinct
    cameras: set = field(default_factory=set)
    last_seen: float = 0.0

    def __post_init__(self):
        self.cameras = {t.camera for t in self.members}
        if len(self.cameras) != len(self.members):
            raise ValueError(f"identity {self.global_id} holds two tracks of one camera")
        self.last_seen = max(t.t_e for t in self.members)


@dataclass(frozen=True)
class TrackPairContext:
    """Time-ordered view of a track pair: earlier ends before later ends."""

    earlier: object
    later: object

    @classmethod
    def from_pair(cls, a, b) -> "TrackPairContext":
        if getattr(a, "t_e", None) is not None and getattr(b, "t_e", None) is not None:
            if (a.t_e, a.t_s) <= (b.t_e, b.t_s):
                return cls(a, b)
        return cls(b, a)

    @property
    def dt(self) -> float:
        return self.later.t_s - self.earlier.t_e

    @property
    def gap_distance(self) -> float:
        return haversine_distance(self.later.l_s, self.earlier.l_e)


def speed_similarity(ctx: TrackPairContext, v_max: float) -> float:
    """Quadratic prior on the implied transfer speed, 1 at v_max/2, 0 at 0 and v_max."""
    if ctx.dt <= 0:
        raise NonPositiveDt(
            f"dt={ctx.dt}: overlapping or touching intervals should be rejected upstream"
        )
    v = ctx.gap_distance / ctx.dt
    return max(0.0, 4.0 * v * (v_max - v) / v_max**2)


def direction_consistent(earlier, later) -> bool:
    """True when the later track continues away from the earlier one.

    Both the later track's start must be no closer to the earlier start than
    to the earlier end, and the later end must move away from the earlier end.
    """
    d = haversine_distance
    return (
        d(earlier.l_s, later.l_s) >= d(earlier.l_e, later.l_s)
        and d(later.l_e, earlier.l_e) >= d(later.l_s, earlier.l_e)
    )


def candidate_similarity(a: Candidate, b: Candidate, topo: CameraTopology, cfg: MctConfig) -> float:
    """Rule-gated appearance similarity between two clustering candidates."""
    if a.cameras & b.cameras:
        return 0.0  # rule 1: camera exclusivity
    earlier, later = (a, b) if a.sort_key <= b.sort_key else (b, a)
    dt = later.t_s - earlier.t_e
    views_overlap = are_overlapping(topo, earlier.end_camera, later.start_camera)
    if dt <= 0 and not views_overlap:
        return 0.0  # rule 2: temporal non-overlap
    if cfg.use_adjacency and not are_adjacent(topo, earlier.end_camera, later.start_camera):
        return 0.0  # rule 4: topology adjacency
    if cfg.use_direction and not direction_consistent(earlier, later):
        return 0.0  # rule 5: direction consistency
    if dt > 0:
        sim_v = speed_similarity(TrackPairContext(earlier, later), cfg.v_max)
    else:
        sim_v = 1.0  # overlapping views, no transfer gap to rate
    appearance = 1.0 - np.linalg.norm(a.embedding - b.embedding) / 2.0
    return max(0.0, appearance * sim_v)


def pairwise_similarity(
    tr_i: ConcludedTrack, tr_j: ConcludedTrack, topo: CameraTopology, cfg: MctConfig
) -> float:
    return candidate_similarity(
        Candidate.from_track(tr_i), Candidate.from_track(tr_j), topo, cfg
    )


def build_similarity_matrix(tracks, topo: CameraTopology, cfg: MctConfig) -> np.ndarray:
    """Symmetric zero-diagonal matrix of rule-gated similarities."""
    cands = [t if isinstance(t, Candidate) else Candidate.from_track(t) for t in tracks]
    n = len(cands)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = candidate_similarity(cands[i], cands[j], topo, cfg)
    return matrix


def apply_min_threshold(matrix: np.ndarray, tau_min: float) -> np.ndarray:
    return np.where(matrix < tau_min, 0.0, matrix)


def hierarchical_cluster(tracks, matrix: np.ndarray) -> list[list[int]]:
    """Greedy highest-similarity-first agglomeration with camera exclusivity.

    Repeatedly merges the clusters of the highest-similarity positive track
    pair whose camera sets are disjoint; equal similarities fall back to the
    lexicographically smallest (camera, track id) pair.  Returns clusters as
    lists of indices into `tracks`, ordered by their smallest index.
    """
    n = len(tracks)
    cands = [t if isinstance(t, Candidate) else Candidate.from_track(t) for t in tracks]
    parent = list(range(n))
    cameras = [set(c.cameras) for c in cands]

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if matrix[i, j] > 0.0]
    pairs.sort(
        key=lambda ij: (
            -matrix[ij[0], ij[1]],
            tuple(sorted((cands[ij[0]].tie_key, cands[ij[1]].tie_key))),
        )
    )
    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj or cameras[ri] & cameras[rj]:
            continue
        parent[rj] = ri
        cameras[ri] |= cameras[rj]

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


class MultiCameraStore:
    """Active global identities; written only by the supervisor."""

    def __init__(self, next_id: int = 1):
        self.active: dict[int, MultiCameraTrack] = {}
        self._next_id = next_id

    def new_id(self) -> int:
        gid = self._next_id
        self._next_id += 1
        return gid

    def drain(self) -> list[MultiCameraTrack]:
        """End of run: emit and clear every remaining identity."""
        out = [self.active[gid] for gid in sorted(self.active)]
        self.active.clear()
        return out


def supervisor_tick(
    store: MultiCameraStore,
    new_tracks: list[ConcludedTrack],
    now: float,
    topo: CameraTopology,
    cfg: MctConfig,
):
    """One supervisor round: cluster new tracks against held identities.

    Candidates are the tick's concluded tracks (camera-bias mitigated per
    camera) plus one representative per active identity.  Merged identities
    keep the smallest participating global id; clusters of only-new tracks
    get fresh ids.  Identities quiet for longer than flush_horizon are
    removed and returned as final.

    Returns (assignments, flushed) where assignments maps each new track's
    (camera, track_id) to its global id.  Assignments of older tracks may be
    superseded by later merges; the flushed identities are authoritative.
    """
    new_tracks = sorted(new_tracks, key=lambda t: (t.camera, t.track_id))
    if new_tracks and cfg.bias_lambda > 0.0:
        adjusted = mitigate_camera_bias(
            [(t.camera, t.embedding) for t in new_tracks], cfg.bias_lambda
        )
        new_tracks = [replace(t, embedding=e) for t, e in zip(new_tracks, adjusted)]

    candidates = [
        Candidate.from_identity(store.active[gid]) for gid in sorted(store.active)
    ] + [Candidate.from_track(t) for t in new_tracks]

    assignments: dict[tuple[str, int], int] = {}
    if candidates:
        matrix = apply_min_threshold(
            build_similarity_matrix(candidates, topo, cfg), cfg.tau_min
        )
        for cluster in hierarchical_cluster(candidates, matrix):
            members = [candidates[i] for i in cluster]
            existing = sorted(c.existing_id for c in members if c.existing_id is not None)
            fresh = [t for c in members if c.existing_id is None for t in c.tracks]
            if not fresh and len(existing) <= 1:
                continue  # nothing changed for this identity
            if existing:
                gid = existing[0]  # oldest identity wins
                merged = [t for old in existing for t in store.active[old].members]
                for old in existing:
                    del store.active[old]
                merged.extend(fresh)
            else:
                gid = store.new_id()
                merged = list(fresh)
            store.active[gid] = MultiCameraTrack(global_id=gid, members=merged)
            for t in fresh:
                assignments[(t.camera, t.track_id)] = gid

    flushed = [
        store.active[gid]
        for gid in sorted(store.active)
        if now - store.active[gid].last_seen > cfg.flush_horizon
    ]
    for identity in flushed:
        del store.active[identity.global_id]
    return assignments, flushed


def identities_to_trajectories(identities) -> dict:
    """Flatten final identities into the metrics trajectory shape."""
    traj: dict[int, list] = {}
    for identity in identities:
        entries = traj.setdefault(identity.global_id, [])
        for member in identity.members:
            for frame, box in member.boxes:
                entries.append((member.camera, frame, box))
    return traj


def summarize_identities(identities) -> list[dict]:
    """JSON-ready per-identity summary: members, time spans, geo endpoints."""
    out = []
    for identity in sorted(identities, key=lambda m: m.global_id):
        members = sorted(identity.members, key=lambda t: (t.t_s, t.camera))
        out.append(
            {
                "global_id": identity.global_id,
                "cameras": sorted(identity.cameras),
                "t_s": min(t.t_s for t in members),
                "t_e": max(t.t_e for t in members),
                "members": [
                    {
                        "camera": t.camera,
                        "track_id": t.track_id,
                        "t_s": t.t_s,
                        "t_e": t.t_e,
                        "start": [t.l_s.lat, t.l_s.lon],
                        "end": [t.l_e.lat, t.l_e.lon],
                        "class": int(t.class_label),
                        "n_boxes": len(t.boxes),
                    }
                    for t in members
                ],
            }
        )
    return out
