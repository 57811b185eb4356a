"""Declarative scenario description: nodes, vehicles, channel, clocks, rule and deployment plan.

Scenarios are YAML documents validated against ``scenario.schema.json``
and then against the semantic invariants of each model type.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import jsonschema
import yaml

from .channel import ChannelModel, ClockModel, LatencyDistribution
from .geospatial import Circle, Polygon, TangentPlane, destination, haversine_distance, initial_bearing
from .orchestration import (
    DEFAULT_IDLE_TIMEOUT_S,
    AnalysisRule,
    DeploymentPlan,
    FirstCam,
    GeofencePresence,
    ServiceSpec,
)
from .v2x_messages import MAX_HEADING_DDEG, MAX_SPEED_CMS, GeoPosition, check_station_id

DEFAULT_SERVER_ID = "server"
# 2026-02-02T00:00:00+01:00, a Monday
DEFAULT_START_EPOCH_MS = 1769986800000
OTHER_LATENCY_KEYS = ("event_detection_ms", "fusion_ms", "cpm_generation_ms")


class InvalidScenario(ValueError):
    """Scenario rejected; ``field`` is a dotted path, ``line`` 1-based when known."""

    def __init__(self, message: str, field: str = "", line: Optional[int] = None):
        self.field = field
        self.line = line
        where = field or "<root>"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")


class TimeOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Waypoint:
    t_s: float
    position: GeoPosition


@dataclass(frozen=True)
class Approach:
    """Straight approach toward ``target`` starting ``start_distance_m`` away.

    ``bearing_deg`` is the bearing from the target to the start point, so a
    vehicle approaching from the north has bearing 0.
    """

    bearing_deg: float
    start_distance_m: float
    speed_kmh: float
    target: GeoPosition

    def __post_init__(self):
        if not self.speed_kmh > 0:
            raise ValueError("speed_kmh must be positive")
        if self.start_distance_m < 0:
            raise ValueError("start_distance_m must be non-negative")

    @property
    def speed_ms(self) -> float:
        return self.speed_kmh / 3.6

    @property
    def arrival_s(self) -> float:
        return self.start_distance_m / self.speed_ms


@dataclass(frozen=True)
class VehicleAgent:
    station_id: int
    route: Union[tuple[Waypoint, ...], Approach]
    cam_period_ms: int = 100
    node_id: Optional[str] = None

    def __post_init__(self):
        check_station_id(self.station_id)
        if not self.cam_period_ms > 0:
            raise ValueError("cam_period_ms must be positive")
        if not isinstance(self.route, Approach):
            route = tuple(self.route)
            if not route:
                raise ValueError("waypoint route needs at least one waypoint")
            for a, b in zip(route, route[1:]):
                if not b.t_s > a.t_s:
                    raise ValueError("waypoints must be strictly time-ordered")
            object.__setattr__(self, "route", route)

    @property
    def node(self) -> str:
        return self.node_id or f"vehicle-{self.station_id}"

    @property
    def span_s(self) -> tuple[float, float]:
        if isinstance(self.route, Approach):
            return 0.0, math.inf
        return self.route[0].t_s, self.route[-1].t_s


def vehicle_position(agent: VehicleAgent, t_s: float) -> GeoPosition:
    route = agent.route
    if isinstance(route, Approach):
        remaining = max(0.0, route.start_distance_m - route.speed_ms * max(0.0, t_s))
        if remaining == 0.0:
            return route.target
        return destination(route.target, route.bearing_deg, remaining)
    if not route[0].t_s <= t_s <= route[-1].t_s:
        raise TimeOutOfRange(f"t={t_s} s outside route span [{route[0].t_s}, {route[-1].t_s}]")
    for a, b in zip(route, route[1:]):
        if a.t_s <= t_s <= b.t_s:
            frac = (t_s - a.t_s) / (b.t_s - a.t_s)
            plane = TangentPlane.at(a.position)
            bx, by = plane.to_xy(b.position)
            return plane.to_geo(bx * frac, by * frac)
    return route[-1].position


def vehicle_motion(agent: VehicleAgent, t_s: float) -> tuple[int, int]:
    """(speed_cms, heading_ddeg) at ``t_s``, saturated to CAM field ranges."""
    route = agent.route
    if isinstance(route, Approach):
        if t_s >= route.arrival_s:
            return 0, int(round(((route.bearing_deg + 180.0) % 360.0) * 10)) % (MAX_HEADING_DDEG + 1)
        speed, heading = route.speed_ms, (route.bearing_deg + 180.0) % 360.0
    else:
        seg = None
        for a, b in zip(route, route[1:]):
            if a.t_s <= t_s <= b.t_s:
                seg = (a, b)
                break
        if seg is None:
            return 0, 0
        a, b = seg
        dist = haversine_distance(a.position, b.position)
        speed = dist / (b.t_s - a.t_s)
        heading = initial_bearing(a.position, b.position) if dist > 0 else 0.0
    speed_cms = min(MAX_SPEED_CMS, int(round(speed * 100)))
    heading_ddeg = int(round(heading * 10)) % (MAX_HEADING_DDEG + 1)
    return speed_cms, heading_ddeg


@dataclass(frozen=True)
class RsuNode:
    id: str
    station_id: int
    position: GeoPosition
    hosts_v2x: bool = False

    def __post_init__(self):
        check_station_id(self.station_id)


@dataclass(frozen=True)
class ClockDefaults:
    """Bounds for offsets drawn when a node is missing from ``offsets_ms``."""

    server_skew_ms: float = 20.0
    vehicle_skew_ms: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    rsus: tuple[RsuNode, ...]
    vehicles: tuple[VehicleAgent, ...]
    rule: AnalysisRule
    plan: DeploymentPlan
    end_time_s: float
    channel: ChannelModel = ChannelModel()
    clocks: ClockModel = ClockModel()
    clock_defaults: ClockDefaults = ClockDefaults()
    uplink_latency_ms: float = 0.0
    fusion_period_ms: float = 100.0
    other_latencies: Mapping[str, float] = field(default_factory=dict)
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S
    tick_period_ms: float = 1000.0
    sensing_range_m: float = 150.0
    server_id: str = DEFAULT_SERVER_ID
    start_epoch_ms: int = DEFAULT_START_EPOCH_MS
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rsus", tuple(self.rsus))
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        object.__setattr__(self, "other_latencies", dict(self.other_latencies))
        self.validate()

    def other(self, key: str) -> float:
        return float(self.other_latencies.get(key, 0.0))

    @property
    def v2x_host(self) -> RsuNode:
        return next(r for r in self.rsus if r.hosts_v2x)

    def node_ids(self) -> list[str]:
        return [self.server_id, *(r.id for r in self.rsus), *(v.node for v in self.vehicles)]

    def validate(self) -> None:
        if not self.rsus:
            raise InvalidScenario("at least one RSU is required", "rsus")
        hosts = [i for i, r in enumerate(self.rsus) if r.hosts_v2x]
        if len(hosts) != 1:
            idx = hosts[1] if len(hosts) > 1 else None
            path = f"rsus[{idx}].hosts_v2x" if idx is not None else "rsus"
            raise InvalidScenario(f"exactly one RSU must host V2X, found {len(hosts)}", path)
        ids = self.node_ids()
        seen = set()
        for nid in ids:
            if nid in seen:
                raise InvalidScenario(f"duplicate node id {nid!r}", "rsus")
            seen.add(nid)
        vehicle_sids = [v.station_id for v in self.vehicles]
        if len(set(vehicle_sids)) != len(vehicle_sids):
            raise InvalidScenario("vehicle station ids must be unique", "vehicles")
        for i, svc in enumerate(self.plan.services):
            if svc.node not in seen or svc.node in {v.node for v in self.vehicles}:
                raise InvalidScenario(f"service node {svc.node!r} is not the server or an RSU", f"plan.services[{i}].node")
        for key in self.other_latencies:
            if key not in OTHER_LATENCY_KEYS:
                raise InvalidScenario(f"unknown latency leg {key!r}", f"other_latencies.{key}")
        for key in self.clocks.offsets_ms:
            if key not in seen:
                raise InvalidScenario(f"clock offset for unknown node {key!r}", f"clocks.offsets_ms.{key}")
        if not self.end_time_s > 0:
            raise InvalidScenario("end_time_s must be positive", "end_time_s")
        if not self.fusion_period_ms > 0:
            raise InvalidScenario("fusion_period_ms must be positive", "fusion_period_ms")
        if not self.tick_period_ms > 0:
            raise InvalidScenario("tick_period_ms must be positive", "tick_period_ms")


# ---------------------------------------------------------------- loading


def load_schema() -> dict:
    return json.loads(resources.files("rsu_orchsim").joinpath("scenario.schema.json").read_text(encoding="utf-8"))


def _line_of(node: Optional[yaml.Node], path) -> Optional[int]:
    """Walk a composed YAML node tree along ``path``; return the deepest line reached."""
    if node is None:
        return None
    line = node.start_mark.line + 1
    for key in path:
        child = None
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == key:
                    child = v
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            child = node.value[key]
        if child is None:
            break
        node = child
        line = node.start_mark.line + 1
    return line


def _dotted(path) -> str:
    out = ""
    for key in path:
        out += f"[{key}]" if isinstance(key, int) else (f".{key}" if out else str(key))
    return out


def _pos(d: Mapping[str, Any]) -> GeoPosition:
    return GeoPosition.from_degrees(d["lat"], d["lon"])


def _latency(d: Optional[Mapping[str, Any]], default: LatencyDistribution) -> LatencyDistribution:
    if d is None:
        return default
    mean = float(d["mean_ms"])
    std = float(d.get("std_ms", 0.0))
    lo = float(d.get("min_ms", 0.0 if std > 0 else mean))
    hi = float(d.get("max_ms", math.inf if std > 0 else mean))
    return LatencyDistribution(mean, std, lo, hi)


def _fence(d: Mapping[str, Any]):
    if "circle" in d:
        return Circle(_pos(d["circle"]["center"]), float(d["circle"]["radius_m"]))
    return Polygon(tuple(_pos(p) for p in d["polygon"]))


def _build(doc: Mapping[str, Any]) -> ScenarioConfig:
    # each section is built under a path so semantic errors point at their field
    def section(path, fn):
        try:
            return fn()
        except InvalidScenario:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise InvalidScenario(str(exc), path) from exc

    rsus = []
    for i, r in enumerate(doc["rsus"]):
        rsus.append(
            section(
                f"rsus[{i}]",
                lambda r=r: RsuNode(r["id"], r["station_id"], _pos(r["position"]), bool(r.get("hosts_v2x", False))),
            )
        )

    vehicles = []
    for i, v in enumerate(doc.get("vehicles") or []):
        def make_vehicle(v=v):
            if "approach" in v:
                a = v["approach"]
                route = Approach(float(a["bearing_deg"]), float(a["start_distance_m"]), float(a["speed_kmh"]), _pos(a["target"]))
            else:
                route = tuple(Waypoint(float(w["t_s"]), _pos(w)) for w in v["waypoints"])
            return VehicleAgent(v["station_id"], route, int(v.get("cam_period_ms", 100)), v.get("id"))

        vehicles.append(section(f"vehicles[{i}]", make_vehicle))

    ch = doc.get("channel") or {}
    channel = section(
        "channel",
        lambda: ChannelModel(
            range_m=float(ch.get("range_m", ChannelModel.range_m)),
            cam_latency=_latency(ch.get("cam_latency"), ChannelModel.cam_latency),
            cpm_latency=_latency(ch.get("cpm_latency"), ChannelModel.cpm_latency),
            loss_probability=float(ch.get("loss_probability", 0.0)),
        ),
    )

    ck = doc.get("clocks") or {}
    clocks = ClockModel({str(k): float(v) for k, v in (ck.get("offsets_ms") or {}).items()})
    clock_defaults = ClockDefaults(
        float(ck.get("server_skew_ms", ClockDefaults.server_skew_ms)),
        float(ck.get("vehicle_skew_ms", ClockDefaults.vehicle_skew_ms)),
    )

    idle_timeout_s = float(doc.get("idle_timeout_s", DEFAULT_IDLE_TIMEOUT_S))
    rd = doc["rule"]

    def make_rule():
        filt = frozenset(rd["station_filter"]) if rd.get("station_filter") is not None else None
        cooldown = float(rd.get("cooldown_s", idle_timeout_s))
        if rd["kind"] == "first_cam":
            if "fence" in rd:
                raise InvalidScenario("first_cam rules take no fence", "rule.fence")
            return FirstCam(filt, cooldown)
        if "fence" not in rd:
            raise InvalidScenario("geofence_presence rules need a fence", "rule")
        return GeofencePresence(section("rule.fence", lambda: _fence(rd["fence"])), filt, cooldown)

    rule = section("rule", make_rule)

    pd = doc["plan"]

    def make_plan():
        services = []
        for i, s in enumerate(pd["services"]):
            services.append(
                section(
                    f"plan.services[{i}]",
                    lambda s=s: ServiceSpec(
                        s["name"],
                        s["node"],
                        tuple((st["label"], float(st["duration_s"])) for st in s.get("stages") or []),
                        frozenset(s.get("requires") or []),
                    ),
                )
            )
        return DeploymentPlan(tuple(services), float(pd["manager_processing_s"]), pd["sink_service"])

    plan = section("plan", make_plan)

    return section(
        "",
        lambda: ScenarioConfig(
            rsus=tuple(rsus),
            vehicles=tuple(vehicles),
            rule=rule,
            plan=plan,
            end_time_s=float(doc["end_time_s"]),
            channel=channel,
            clocks=clocks,
            clock_defaults=clock_defaults,
            uplink_latency_ms=float(doc.get("uplink_latency_ms", 0.0)),
            fusion_period_ms=float(doc.get("fusion_period_ms", 100.0)),
            other_latencies={k: float(v) for k, v in (doc.get("other_latencies") or {}).items()},
            idle_timeout_s=idle_timeout_s,
            tick_period_ms=float(doc.get("tick_period_ms", 1000.0)),
            sensing_range_m=float(doc.get("sensing_range_m", 150.0)),
            server_id=doc.get("server_id", DEFAULT_SERVER_ID),
            start_epoch_ms=int(doc.get("start_epoch_ms", DEFAULT_START_EPOCH_MS)),
            seed=int(doc.get("seed", 0)),
            name=doc.get("name", ""),
        ),
    )


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a YAML scenario document."""
    try:
        root = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise InvalidScenario(f"YAML syntax error: {exc}", "", mark.line + 1 if mark else None) from exc
    if doc is None:
        doc = {}
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        raise InvalidScenario(err.message, _dotted(path), _line_of(root, path))
    try:
        return _build(doc)
    except InvalidScenario as exc:
        if exc.line is None and exc.field:
            path = _split_dotted(exc.field)
            raise InvalidScenario(str(exc).split(": ", 1)[-1], exc.field, _line_of(root, path)) from exc
        raise


def _split_dotted(dotted: str) -> list:
    path: list = []
    for part in dotted.replace("[", ".[").split("."):
        if not part:
            continue
        if part.startswith("["):
            path.append(int(part[1:-1]))
        else:
            path.append(part)
    return path


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def bundled_scenario(name: str) -> ScenarioConfig:
    """Load one of the example scenarios shipped with the package."""
    return parse_scenario(resources.files("rsu_orchsim").joinpath("scenarios", f"{name}.yaml").read_text(encoding="utf-8"))
