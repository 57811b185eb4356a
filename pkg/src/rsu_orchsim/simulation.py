"""Deterministic discrete-event engine for the demand-driven collective perception loop.

Data path of one run::

    vehicle --CAM/ITS-G5--> v2x host RSU --uplink--> server: event detector
      -> application manager -> pods on RSUs/server (parallel cold start)
      -> every RSU emits object lists --uplink--> server fusion (per-cycle barrier)
      -> CPM generation --downlink--> v2x host --CPM/ITS-G5--> vehicles

All times inside the engine are true simulation time in ms since scenario
start. Node-local timestamps add that node's constant clock offset.
"""

from __future__ import annotations

import heapq
import io
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, TextIO

from .channel import ClockModel, MessageKind, node_clock, transmit
from .geospatial import haversine_distance
from .orchestration import (
    OrchestratorState,
    Phase,
    PipelineReady as ReadyEvent,
    Request,
    Tick,
    critical_path,
    detect,
    step,
)
from .scenario import (
    Approach,
    InvalidScenario,
    RsuNode,
    ScenarioConfig,
    TimeOutOfRange,
    VehicleAgent,
    Waypoint,
    vehicle_motion,
    vehicle_position,
)
from .v2x_messages import (
    MAX_CPM_OBJECTS,
    CamMessage,
    CpmMessage,
    ObjectClass,
    PerceivedObject,
    build_cpm,
    decode_cam,
    decode_cpm,
    encode_cam,
    encode_cpm,
)

__all__ = [
    "Approach",
    "EventKind",
    "EventLog",
    "InvalidScenario",
    "NoCamDelivered",
    "NoCpmReceived",
    "RsuNode",
    "SimEvent",
    "TimeOutOfRange",
    "VehicleAgent",
    "Waypoint",
    "first_cpm_latency",
    "resolve_clocks",
    "run_scenario",
    "vehicle_position",
]


class NoCamDelivered(LookupError):
    pass


class NoCpmReceived(LookupError):
    pass


class EventKind(str, Enum):
    CAM_GENERATED = "CamGenerated"
    CAM_DELIVERED = "CamDelivered"
    REQUEST_ISSUED = "RequestIssued"
    MANAGER_DONE = "ManagerDone"
    POD_CREATED = "PodCreated"
    STAGE_COMPLETED = "StageCompleted"
    PIPELINE_READY = "PipelineReady"
    OBJECT_LIST_SENT = "ObjectListSent"
    OBJECT_LIST_DELIVERED = "ObjectListDelivered"
    FUSION_DONE = "FusionDone"
    CPM_BROADCAST = "CpmBroadcast"
    CPM_DELIVERED = "CpmDelivered"
    TEARDOWN = "Teardown"


@dataclass(frozen=True)
class SimEvent:
    time_true_ms: float
    seq: int
    kind: EventKind
    node: str
    node_local_ms: float
    payload: Optional[bytes] = None
    causation_seq: Optional[int] = None
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "time_true_ms": self.time_true_ms,
            "seq": self.seq,
            "kind": self.kind.value,
            "node": self.node,
            "node_local_ms": self.node_local_ms,
            "payload": self.payload.hex() if self.payload is not None else None,
            "causation_seq": self.causation_seq,
            "attrs": dict(self.attrs),
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> SimEvent:
        payload = rec.get("payload")
        return cls(
            float(rec["time_true_ms"]),
            int(rec["seq"]),
            EventKind(rec["kind"]),
            rec["node"],
            float(rec["node_local_ms"]),
            bytes.fromhex(payload) if payload is not None else None,
            rec.get("causation_seq"),
            dict(rec.get("attrs") or {}),
        )


class EventLog:
    """Immutable, time-ordered record of a run. ``events[i].seq == i``."""

    def __init__(self, events: Iterable[SimEvent]):
        self._events = tuple(events)

    def __iter__(self) -> Iterator[SimEvent]:
        return iter(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def __getitem__(self, i):
        return self._events[i]

    def __eq__(self, other):
        return isinstance(other, EventLog) and self._events == other._events

    def of_kind(self, kind: EventKind) -> list[SimEvent]:
        return [e for e in self._events if e.kind is kind]

    def first(self, kind: EventKind, pred: Callable[[SimEvent], bool] = lambda e: True) -> Optional[SimEvent]:
        return next((e for e in self._events if e.kind is kind and pred(e)), None)

    def causes(self, event: SimEvent) -> Iterator[SimEvent]:
        """Walk the causation chain upwards from ``event`` (exclusive)."""
        seq = event.causation_seq
        while seq is not None:
            ev = self._events[seq]
            yield ev
            seq = ev.causation_seq

    def dump(self, fp: TextIO) -> None:
        for e in self._events:
            fp.write(json.dumps(e.to_record(), separators=(",", ":")))
            fp.write("\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, fp: TextIO) -> EventLog:
        return cls(SimEvent.from_record(json.loads(line)) for line in fp if line.strip())


def resolve_clocks(config: ScenarioConfig, seed: int) -> ClockModel:
    """Fill in offsets for nodes the scenario leaves unspecified.

    RSUs share a synchronised time base (offset 0); the server and each vehicle
    get one uniform draw within their skew bounds, fixed for the run.
    """
    rng = random.Random(f"{seed}:clocks")
    given = dict(config.clocks.offsets_ms)
    offsets: dict[str, float] = {}
    srv = config.clock_defaults.server_skew_ms
    veh = config.clock_defaults.vehicle_skew_ms
    for node in config.node_ids():
        if node in given:
            offsets[node] = float(given[node])
        elif node == config.server_id:
            offsets[node] = rng.uniform(-srv, srv)
        elif any(v.node == node for v in config.vehicles):
            offsets[node] = rng.uniform(-veh, veh)
        else:
            offsets[node] = 0.0
    return ClockModel(offsets)


def _active(agent: VehicleAgent, t_s: float) -> bool:
    lo, hi = agent.span_s
    return lo <= t_s <= hi


class _Engine:
    def __init__(self, config: ScenarioConfig, seed: int):
        self.cfg = config
        self.rng = random.Random(seed)
        self.clock = resolve_clocks(config, seed)
        self.end_ms = config.end_time_s * 1000.0
        self.host = config.v2x_host
        self.server = config.server_id
        self._queue: list = []
        self._counter = 0
        self._events: list[SimEvent] = []
        self.state = OrchestratorState(idle_timeout_s=config.idle_timeout_s)
        self.generation = 0
        self.ready_seq: Optional[int] = None
        self._barrier: dict[int, dict[str, tuple[bytes, int]]] = {}
        self._last_stage_seq: dict[str, int] = {}
        self._crit_ms = critical_path(config.plan) * 1000.0
        self._sink_node = config.plan.service(config.plan.sink_service).node

    # -- plumbing

    def schedule(self, t_ms: float, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (t_ms, self._counter, fn, args))
        self._counter += 1

    def local(self, node: str, t_ms: float) -> float:
        return node_clock(self.clock, node, t_ms)

    def epoch_ms(self, node: str, t_ms: float) -> int:
        return int(round(self.cfg.start_epoch_ms + self.local(node, t_ms)))

    def record(self, t_ms, kind, node, payload=None, cause=None, **attrs) -> int:
        seq = len(self._events)
        self._events.append(SimEvent(t_ms, seq, kind, node, self.local(node, t_ms), payload, cause, attrs))
        return seq

    def run(self) -> EventLog:
        for v in self.cfg.vehicles:
            start_ms = v.span_s[0] * 1000.0
            self.schedule(start_ms, self.cam_generated, v)
        while self._queue:
            t, _, fn, args = heapq.heappop(self._queue)
            if t > self.end_ms:
                break
            self.now = t
            fn(*args)
        return EventLog(self._events)

    # -- vehicles and the ITS-G5 uplink

    def cam_generated(self, v: VehicleAgent) -> None:
        t = self.now
        t_s = t / 1000.0
        pos = vehicle_position(v, t_s)
        speed, heading = vehicle_motion(v, t_s)
        cam = CamMessage(v.station_id, self.epoch_ms(v.node, t), pos, speed, heading)
        payload = encode_cam(cam)
        seq = self.record(t, EventKind.CAM_GENERATED, v.node, payload, station_id=v.station_id)
        d = transmit(payload, MessageKind.CAM, v.node, self.host.id, t, self.cfg.channel, self.rng,
                     tx_pos=pos, rx_pos=self.host.position)
        if d is not None:
            self.schedule(d.arrival_time_true, self.cam_delivered, payload, seq, v.station_id)
        nxt = t + v.cam_period_ms
        if _active(v, nxt / 1000.0):
            self.schedule(nxt, self.cam_generated, v)

    def cam_delivered(self, payload: bytes, cause: int, station_id: int) -> None:
        seq = self.record(self.now, EventKind.CAM_DELIVERED, self.host.id, payload, cause, station_id=station_id)
        self.schedule(self.now + self.cfg.uplink_latency_ms, self.cam_at_server, payload, seq)

    def cam_at_server(self, payload: bytes, cause: int) -> None:
        cam = decode_cam(payload)
        request, self.state = detect(self.cfg.rule, cam, self.local(self.server, self.now), self.state)
        if request is not None:
            self.schedule(self.now + self.cfg.other("event_detection_ms"), self.request_issued, request, cause)

    # -- orchestration

    def request_issued(self, request, cause: int) -> None:
        now_local = self.local(self.server, self.now)
        seq = self.record(
            self.now, EventKind.REQUEST_ISSUED, self.server, None, cause,
            triggering_station=request.triggering_station,
            triggering_cam_generation_ms=request.triggering_cam_generation_ms,
        )
        self.state, actions = step(self.state, Request(now_local, request), self.cfg.plan)
        if actions:
            self.generation += 1
            self._barrier.clear()
            done = self.now + self.cfg.plan.manager_processing_s * 1000.0
            self.schedule(done, self.manager_done, self.generation, seq, [a.service for a in actions])

    def manager_done(self, gen: int, cause: int, services: list[str]) -> None:
        if gen != self.generation:
            return
        seq = self.record(self.now, EventKind.MANAGER_DONE, self.server, None, cause, services=services)
        start = self.now
        for svc in self.cfg.plan.services:
            elapsed_s = 0.0
            prev = seq
            for i, (label, dur) in enumerate(svc.stages):
                # same summation order as critical_path so PipelineReady never precedes the last stage
                elapsed_s += dur
                t = start + elapsed_s * 1000.0
                kind = EventKind.POD_CREATED if i == 0 else EventKind.STAGE_COMPLETED
                # stage events are chained so their causation follows the startup order
                self.schedule(t, self.stage_event, gen, kind, svc.name, svc.node, i, label, prev)
                prev = None
        self.schedule(start + self._crit_ms, self.pipeline_ready, gen, seq)

    def stage_event(self, gen, kind, service, node, index, label, cause) -> None:
        if gen != self.generation:
            return
        if cause is None:
            cause = self._last_stage_seq[service]
        seq = self.record(self.now, kind, node, None, cause, service=service, stage=label, stage_index=index)
        self._last_stage_seq[service] = seq

    def pipeline_ready(self, gen: int, cause: int) -> None:
        if gen != self.generation:
            return
        seq = self.record(self.now, EventKind.PIPELINE_READY, self._sink_node, None, cause,
                          service=self.cfg.plan.sink_service)
        self.ready_seq = seq
        self.state, _ = step(self.state, ReadyEvent(self.local(self.server, self.now)), self.cfg.plan)
        self.object_list_cycle(gen, 0)
        self.schedule(self.now + self.cfg.tick_period_ms, self.tick, gen)

    def tick(self, gen: int) -> None:
        if gen != self.generation:
            return
        self.state, actions = step(self.state, Tick(self.local(self.server, self.now)), self.cfg.plan)
        if actions:
            self.record(self.now, EventKind.TEARDOWN, self.server, None, self.ready_seq,
                        services=[a.service for a in actions])
            self.generation += 1
            self._barrier.clear()
            # teardown completes instantly; the next step returns the manager to Idle
            self.state, _ = step(self.state, Tick(self.local(self.server, self.now)), self.cfg.plan)
            return
        self.schedule(self.now + self.cfg.tick_period_ms, self.tick, gen)

    # -- live digital twin data flow

    def perceive(self, rsu: RsuNode, t_ms: float) -> list[PerceivedObject]:
        t_s = t_ms / 1000.0
        objs = []
        for v in self.cfg.vehicles:
            if not _active(v, t_s):
                continue
            pos = vehicle_position(v, t_s)
            if haversine_distance(pos, rsu.position) <= self.cfg.sensing_range_m:
                speed, heading = vehicle_motion(v, t_s)
                objs.append(PerceivedObject(v.station_id & 0xFFFF, pos, speed, heading, ObjectClass.PASSENGER_CAR))
        return objs[:MAX_CPM_OBJECTS]

    def object_list_cycle(self, gen: int, cycle: int) -> None:
        if gen != self.generation or self.state.phase is not Phase.ACTIVE:
            return
        for rsu in self.cfg.rsus:
            objs = self.perceive(rsu, self.now)
            payload = encode_cpm(CpmMessage(rsu.station_id, self.epoch_ms(rsu.id, self.now), tuple(objs)))
            seq = self.record(self.now, EventKind.OBJECT_LIST_SENT, rsu.id, payload, self.ready_seq, cycle=cycle)
            self.schedule(self.now + self.cfg.uplink_latency_ms, self.object_list_delivered, gen, cycle, rsu.id, payload, seq)
        self.schedule(self.now + self.cfg.fusion_period_ms, self.object_list_cycle, gen, cycle + 1)

    def object_list_delivered(self, gen, cycle, rsu_id, payload, cause) -> None:
        if gen != self.generation:
            return
        seq = self.record(self.now, EventKind.OBJECT_LIST_DELIVERED, self.server, payload, cause, cycle=cycle, rsu=rsu_id)
        lists = self._barrier.setdefault(cycle, {})
        lists[rsu_id] = (payload, seq)
        if len(lists) == len(self.cfg.rsus):
            del self._barrier[cycle]
            ordered = [lists[r.id][0] for r in self.cfg.rsus]
            self.schedule(self.now + self.cfg.other("fusion_ms"), self.fusion_done, gen, cycle, ordered, seq)

    def fusion_done(self, gen, cycle, lists, cause) -> None:
        if gen != self.generation:
            return
        seq = self.record(self.now, EventKind.FUSION_DONE, self.server, None, cause, cycle=cycle)
        fused: dict[int, PerceivedObject] = {}
        for payload in lists:
            for obj in decode_cpm(payload).objects:
                fused.setdefault(obj.object_id, obj)
        objects = [fused[k] for k in sorted(fused)][:MAX_CPM_OBJECTS]
        gen_at = self.now + self.cfg.other("cpm_generation_ms")
        self.schedule(gen_at, self.cpm_generated, objects, cycle, seq)

    def cpm_generated(self, objects, cycle, cause) -> None:
        cpm = build_cpm(objects, self.host.station_id, self.epoch_ms(self.server, self.now))
        self.schedule(self.now + self.cfg.uplink_latency_ms, self.cpm_broadcast, encode_cpm(cpm), cycle, cause)

    def cpm_broadcast(self, payload, cycle, cause) -> None:
        seq = self.record(self.now, EventKind.CPM_BROADCAST, self.host.id, payload, cause, cycle=cycle)
        t_s = self.now / 1000.0
        for v in self.cfg.vehicles:
            if not _active(v, t_s):
                continue
            d = transmit(payload, MessageKind.CPM, self.host.id, v.node, self.now, self.cfg.channel, self.rng,
                         tx_pos=self.host.position, rx_pos=vehicle_position(v, t_s))
            if d is not None:
                self.schedule(d.arrival_time_true, self.cpm_delivered, v, payload, cycle, seq)

    def cpm_delivered(self, v: VehicleAgent, payload, cycle, cause) -> None:
        self.record(self.now, EventKind.CPM_DELIVERED, v.node, payload, cause, station_id=v.station_id, cycle=cycle)


def run_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> EventLog:
    """Run ``config`` to its end time; identical (config, seed) give identical logs."""
    return _Engine(config, config.seed if seed is None else seed).run()


def first_cpm_latency(log: EventLog, station: int) -> float:
    """Vehicle-measured end-to-end latency in seconds.

    From the generation of the station's first CAM that reached the V2X host to
    the arrival of the first CPM at the station. Both ends are read on the
    vehicle clock, so clock offsets cancel.
    """
    generated = {e.seq: e for e in log if e.kind is EventKind.CAM_GENERATED and e.attrs.get("station_id") == station}
    delivered = [generated[e.causation_seq] for e in log
                 if e.kind is EventKind.CAM_DELIVERED and e.causation_seq in generated]
    if not delivered:
        raise NoCamDelivered(f"no CAM of station {station} reached the V2X host")
    cam = min(delivered, key=lambda e: (e.time_true_ms, e.seq))
    cpm = log.first(
        EventKind.CPM_DELIVERED,
        lambda e: e.attrs.get("station_id") == station and e.time_true_ms >= cam.time_true_ms,
    )
    if cpm is None:
        raise NoCpmReceived(f"station {station} never received a CPM")
    return (cpm.node_local_ms - cam.node_local_ms) / 1000.0
