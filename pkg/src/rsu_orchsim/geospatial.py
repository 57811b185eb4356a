"""Geodesy on a sphere, geofences, CAM trajectory aggregation and approach-route classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

from .v2x_messages import CamMessage, GeoPosition

EARTH_RADIUS_M = 6371008.8
DEFAULT_GAP_SPLIT_S = 30.0

# points closer than this to a polygon edge count as on the boundary
_BOUNDARY_EPS_M = 1e-6


class EmptyTrajectory(ValueError):
    pass


def haversine_distance(a: GeoPosition, b: GeoPosition) -> float:
    """Great-circle distance in meters."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def initial_bearing(a: GeoPosition, b: GeoPosition) -> float:
    """Initial great-circle bearing from ``a`` to ``b`` in degrees, [0, 360)."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlon = math.radians(b.lon - a.lon)
    x = math.sin(dlon) * math.cos(lat2)
    y = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    return math.degrees(math.atan2(x, y)) % 360.0


def destination(origin: GeoPosition, bearing_deg: float, distance_m: float) -> GeoPosition:
    """Point reached from ``origin`` after ``distance_m`` along ``bearing_deg``."""
    lat1, lon1 = math.radians(origin.lat), math.radians(origin.lon)
    theta = math.radians(bearing_deg)
    delta = distance_m / EARTH_RADIUS_M
    lat2 = math.asin(math.sin(lat1) * math.cos(delta) + math.cos(lat1) * math.sin(delta) * math.cos(theta))
    lon2 = lon1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * math.sin(lat2),
    )
    lon_deg = (math.degrees(lon2) + 540.0) % 360.0 - 180.0
    return GeoPosition.from_degrees(math.degrees(lat2), lon_deg)


@dataclass(frozen=True)
class TangentPlane:
    """Equirectangular projection about a reference point; adequate below ~1 km extent."""

    ref_lat: float
    ref_lon: float

    @classmethod
    def at(cls, p: GeoPosition) -> TangentPlane:
        return cls(p.lat, p.lon)

    def to_xy(self, p: GeoPosition) -> tuple[float, float]:
        k = math.radians(1.0) * EARTH_RADIUS_M
        x = (p.lon - self.ref_lon) * k * math.cos(math.radians(self.ref_lat))
        y = (p.lat - self.ref_lat) * k
        return x, y

    def to_geo(self, x: float, y: float) -> GeoPosition:
        k = math.radians(1.0) * EARTH_RADIUS_M
        lat = self.ref_lat + y / k
        lon = self.ref_lon + x / (k * math.cos(math.radians(self.ref_lat)))
        return GeoPosition.from_degrees(lat, lon)


@dataclass(frozen=True)
class Circle:
    center: GeoPosition
    radius_m: float

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError(f"circle radius must be positive, got {self.radius_m}")


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, q1))
        or (o2 == 0 and on_seg(p1, p2, q2))
        or (o3 == 0 and on_seg(q1, q2, p1))
        or (o4 == 0 and on_seg(q1, q2, p2))
    )


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[GeoPosition, ...]

    def __post_init__(self):
        verts = tuple(self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if verts[0] == verts[-1]:
            raise ValueError("polygon closure is implicit; do not repeat the first vertex")
        pts = self.plane_vertices()
        n = len(pts)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_cross(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                    raise ValueError(f"polygon edges {i} and {j} intersect")

    @property
    def centroid(self) -> GeoPosition:
        n = len(self.vertices)
        return GeoPosition(
            round(sum(v.latitude_e7 for v in self.vertices) / n),
            round(sum(v.longitude_e7 for v in self.vertices) / n),
        )

    def plane(self) -> TangentPlane:
        return TangentPlane.at(self.centroid)

    def plane_vertices(self) -> list[tuple[float, float]]:
        plane = self.plane()
        return [plane.to_xy(v) for v in self.vertices]


Geofence = Union[Circle, Polygon]


def _point_segment_distance(p, a, b) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0:
        return math.hypot(p[0] - ax, p[1] - ay)
    t = max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / seg2))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def geofence_contains(fence: Geofence, p: GeoPosition) -> bool:
    """Closed containment test; points on the boundary are inside."""
    if isinstance(fence, Circle):
        return haversine_distance(fence.center, p) <= fence.radius_m
    if not isinstance(fence, Polygon):
        raise TypeError(f"not a geofence: {fence!r}")
    pts = fence.plane_vertices()
    x, y = fence.plane().to_xy(p)
    n = len(pts)
    inside = False
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        if _point_segment_distance((x, y), a, b) <= _BOUNDARY_EPS_M:
            return True
        if (a[1] > y) != (b[1] > y):
            x_cross = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x < x_cross:
                inside = not inside
    return inside


@dataclass(frozen=True)
class TrajectoryPoint:
    time_ms: int
    position: GeoPosition
    speed_cms: int = 0
    heading_ddeg: int = 0


@dataclass(frozen=True)
class Trajectory:
    station_id: int
    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        for prev, cur in zip(pts, pts[1:]):
            if cur.time_ms <= prev.time_ms:
                raise ValueError("trajectory points must be strictly increasing in time")

    def __len__(self):
        return len(self.points)

    def shifted(self, dt_ms: int) -> Trajectory:
        return Trajectory(
            self.station_id,
            tuple(TrajectoryPoint(p.time_ms + dt_ms, p.position, p.speed_cms, p.heading_ddeg) for p in self.points),
        )


def aggregate_trajectories(cams: Iterable[CamMessage], gap_split_s: float = DEFAULT_GAP_SPLIT_S) -> list[Trajectory]:
    """Group time-ordered CAMs into per-station trajectories.

    A station's stream is split wherever consecutive CAMs are more than
    ``gap_split_s`` apart. A repeated timestamp also starts a new trajectory so
    that every output stays strictly time-ordered without dropping points.
    Output is ordered by (first point time, station id).
    """
    if not gap_split_s > 0:
        raise ValueError("gap_split_s must be positive")
    gap_ms = gap_split_s * 1000.0
    open_points: dict[int, list[TrajectoryPoint]] = {}
    done: list[tuple[int, list[TrajectoryPoint]]] = []
    for cam in cams:
        pt = TrajectoryPoint(cam.generation_time_ms, cam.position, cam.speed_cms, cam.heading_ddeg)
        current = open_points.get(cam.station_id)
        if current is not None:
            dt = pt.time_ms - current[-1].time_ms
            if dt > gap_ms or dt <= 0:
                done.append((cam.station_id, current))
                current = None
        if current is None:
            open_points[cam.station_id] = [pt]
        else:
            current.append(pt)
    done.extend(open_points.items())
    done.sort(key=lambda item: (item[1][0].time_ms, item[0]))
    return [Trajectory(sid, tuple(pts)) for sid, pts in done]


class RouteClass(Enum):
    FROM_NORTH = "FromNorth"
    FROM_EAST = "FromEast"
    FROM_SOUTH = "FromSouth"
    FROM_WEST = "FromWest"
    IRRELEVANT = "Irrelevant"


def bearing_bucket(bearing_deg: float) -> RouteClass:
    b = bearing_deg % 360.0
    if b >= 315.0 or b < 45.0:
        return RouteClass.FROM_NORTH
    if b < 135.0:
        return RouteClass.FROM_EAST
    if b < 225.0:
        return RouteClass.FROM_SOUTH
    return RouteClass.FROM_WEST


def classify_route(traj: Trajectory, intersection: GeoPosition, relevance_radius_m: float) -> RouteClass:
    """Classify the direction a trajectory approached ``intersection`` from.

    Trajectories that never come within ``relevance_radius_m`` are irrelevant.
    Otherwise the bearing from the intersection to the earliest point in the
    outer half ring [r/2, r] decides the bucket; without such a point the
    trajectory's first point is used.
    """
    if not traj.points:
        raise EmptyTrajectory(f"trajectory of station {traj.station_id} has no points")
    dists = [haversine_distance(intersection, p.position) for p in traj.points]
    if min(dists) > relevance_radius_m:
        return RouteClass.IRRELEVANT
    anchor = traj.points[0]
    for p, d in zip(traj.points, dists):
        if relevance_radius_m / 2 <= d <= relevance_radius_m:
            anchor = p
            break
    return bearing_bucket(initial_bearing(intersection, anchor.position))


def route_counts(trajectories: Sequence[Trajectory], intersection: GeoPosition, relevance_radius_m: float) -> dict[RouteClass, int]:
    counts = {rc: 0 for rc in RouteClass}
    for traj in trajectories:
        counts[classify_route(traj, intersection, relevance_radius_m)] += 1
    return counts
