"""Geodesic distance, pixel<->world projection and the camera topology graph.

The homography of each camera maps pixel coordinates directly onto the
(lon, lat) plane in degrees.  Camera scenes span well under a kilometre, where
treating lat/lon as a planar chart is accurate to far below the tolerances of
the spatio-temporal association rules, so no full extrinsic pose is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateConfiguration, HorizonPoint, UnknownCamera

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoPoint:
    """WGS-style latitude/longitude in degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("GeoPoint coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("PixelPoint coordinates must be finite")


class Homography:
    """Invertible 3x3 projective map from pixel space to the (lon, lat) plane.

    Stored normalized so that m[2][2] == 1 whenever that entry is nonzero.
    """

    def __init__(self, m):
        m = np.asarray(m, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography entries must be finite")
        # Singularity test on the singular-value ratio: legitimate
        # pixel->degree maps mix unit and ~1e-7 row scales, so neither a raw
        # nor a norm-scaled determinant cutoff distinguishes them from rank
        # deficiency.
        svals = np.linalg.svd(m, compute_uv=False)
        if svals[0] == 0.0 or svals[-1] <= 1e-12 * svals[0]:
            raise ValueError("homography is singular or nearly singular")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        self.m = m
        self._inv = np.linalg.inv(m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def __repr__(self):
        return f"Homography({self.m.tolist()})"


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in metres on a sphere of radius 6,371,000 m."""
    if a == b:
        return 0.0
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def _normalization(points: np.ndarray) -> np.ndarray:
    """Hartley conditioning transform: centroid to origin, mean norm sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def estimate_homography(pairs: list[tuple[PixelPoint, GeoPoint]]) -> Homography:
    """Estimate the pixel->geo homography by normalized DLT.

    ``pairs`` are (pixel, geo) correspondences; at least four are required and
    no minimal subset may be collinear.  Raises DegenerateConfiguration when
    the DLT system is rank deficient.
    """
    if len(pairs) < 4:
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {len(pairs)}")
    src = np.array([[p.x, p.y] for p, _ in pairs], dtype=float)
    dst = np.array([[g.lon, g.lat] for _, g in pairs], dtype=float)

    t_src = _normalization(src)
    t_dst = _normalization(dst)
    src_h = np.column_stack([src, np.ones(len(src))]) @ t_src.T
    dst_h = np.column_stack([dst, np.ones(len(dst))]) @ t_dst.T

    rows = []
    for (x, y, _), (u, v, _) in zip(src_h, dst_h):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    a = np.asarray(rows)

    _, sing, vt = np.linalg.svd(a)
    # Rank < 8 means a family of solutions: collinear or duplicated points.
    if sing[7] <= 1e-9 * sing[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    try:
        return Homography(h)
    except ValueError as exc:
        raise DegenerateConfiguration(str(exc)) from exc


def pixel_to_geo(h: Homography, p: PixelPoint) -> GeoPoint:
    """Apply the homography to a pixel point, dehomogenize to (lon, lat)."""
    vec = h.m @ np.array([p.x, p.y, 1.0])
    if abs(vec[2]) < 1e-12:
        raise HorizonPoint(f"pixel ({p.x}, {p.y}) maps to the horizon")
    return GeoPoint(lat=vec[1] / vec[2], lon=vec[0] / vec[2])


def geo_to_pixel(h: Homography, g: GeoPoint) -> PixelPoint:
    """Inverse projection of pixel_to_geo, using the stored inverse matrix."""
    vec = h._inv @ np.array([g.lon, g.lat, 1.0])
    if abs(vec[2]) < 1e-12:
        raise HorizonPoint(f"geo ({g.lat}, {g.lon}) maps to the horizon")
    return PixelPoint(x=vec[0] / vec[2], y=vec[1] / vec[2])


@dataclass(frozen=True)
class CameraInfo:
    id: str
    position: GeoPoint
    homography: Homography
    fps: float

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")


@dataclass(frozen=True)
class CameraTopology:
    """Immutable camera graph: per-camera info plus adjacency/overlap relations.

    Both relations are symmetric sets of unordered id pairs; ``overlap`` (pairs
    whose fields of view intersect) must be a subset of ``adjacency``.
    """

    cameras: dict[str, CameraInfo]
    adjacency: frozenset[frozenset[str]] = field(default_factory=frozenset)
    overlap: frozenset[frozenset[str]] = field(default_factory=frozenset)

    def __post_init__(self):
        for rel, name in ((self.adjacency, "adjacent"), (self.overlap, "overlap")):
            for pair in rel:
                if len(pair) != 2:
                    raise ValueError(f"{name} pair must contain two distinct ids: {set(pair)}")
                for cid in pair:
                    if cid not in self.cameras:
                        raise ValueError(f"{name} pair references unknown camera {cid!r}")
        if not self.overlap <= self.adjacency:
            raise ValueError("overlap relation must be a subset of adjacency")

    def camera(self, cid: str) -> CameraInfo:
        try:
            return self.cameras[cid]
        except KeyError:
            raise UnknownCamera(cid) from None


def make_topology(cameras, adjacent=(), overlap=()) -> CameraTopology:
    """Build a topology from CameraInfo records and iterable id pairs."""
    cameras = list(cameras)
    cams = {c.id: c for c in cameras}
    if len(cams) != len(cameras):
        raise ValueError("duplicate camera id")
    adj = frozenset(frozenset(p) for p in adjacent)
    ovl = frozenset(frozenset(p) for p in overlap)
    return CameraTopology(cameras=cams, adjacency=adj, overlap=ovl)


def are_adjacent(topo: CameraTopology, c1: str, c2: str) -> bool:
    for cid in (c1, c2):
        if cid not in topo.cameras:
            raise UnknownCamera(cid)
    if c1 == c2:
        return False
    return frozenset((c1, c2)) in topo.adjacency


def are_overlapping(topo: CameraTopology, c1: str, c2: str) -> bool:
    for cid in (c1, c2):
        if cid not in topo.cameras:
            raise UnknownCamera(cid)
    if c1 == c2:
        return False
    return frozenset((c1, c2)) in topo.overlap


def load_topology(path) -> CameraTopology:
    """Load a camera topology from its JSON file.

    Expected shape::

        {"cameras": [{"id": "c001", "lat": .., "lon": .., "fps": 10,
                      "homography_pairs": [{"px": .., "py": .., "lat": .., "lon": ..}, ...]}],
         "adjacent": [["c001", "c002"], ...],
         "overlap": [...]}

    A camera may carry a literal row-major 9-element ``homography`` array
    instead of ``homography_pairs`` (>= 4 pairs otherwise).
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"topology file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"topology file {path} is not valid JSON: {exc}") from exc
    return topology_from_dict(spec)


def topology_from_dict(spec: dict) -> CameraTopology:
    """Build a topology from an already-parsed dict of the JSON shape above."""
    cameras = []
    for cam in spec.get("cameras", []):
        try:
            cid = cam["id"]
            pos = GeoPoint(lat=float(cam["lat"]), lon=float(cam["lon"]))
            fps = float(cam.get("fps", 10.0))
            if "homography" in cam:
                h = Homography(np.array(cam["homography"], dtype=float).reshape(3, 3))
            else:
                pairs = [
                    (PixelPoint(float(p["px"]), float(p["py"])),
                     GeoPoint(lat=float(p["lat"]), lon=float(p["lon"])))
                    for p in cam["homography_pairs"]
                ]
                h = estimate_homography(pairs)
            cameras.append(CameraInfo(id=cid, position=pos, homography=h, fps=fps))
        except (KeyError, ValueError, DegenerateConfiguration) as exc:
            raise ConfigError(f"bad camera entry {cam.get('id', '?')!r}: {exc}") from exc
    try:
        return make_topology(cameras, spec.get("adjacent", ()), spec.get("overlap", ()))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def topology_to_dict(topo: CameraTopology) -> dict:
    """Serialize a topology back into the JSON shape read by load_topology."""
    return {
        "cameras": [
            {
                "id": cam.id,
                "lat": cam.position.lat,
                "lon": cam.position.lon,
                "fps": cam.fps,
                "homography": [float(v) for v in cam.homography.m.reshape(-1)],
            }
            for cam in (topo.cameras[cid] for cid in sorted(topo.cameras))
        ],
        "adjacent": sorted(sorted(pair) for pair in topo.adjacency),
        "overlap": sorted(sorted(pair) for pair in topo.overlap),
    }
