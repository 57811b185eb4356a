"""Demand-driven control loop: event detector rules, deployment plan readiness and the manager state machine.

Pod creation for every service of a plan starts in parallel once the
application manager has finished processing a request. ``requires`` edges are
data dependencies: they gate when a service's output becomes usable, not when
its pod starts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from typing import Hashable, Optional, Union

from .geospatial import Geofence, geofence_contains
from .v2x_messages import CamMessage

DEFAULT_IDLE_TIMEOUT_S = 60.0


class CyclicDependency(ValueError):
    pass


@dataclass(frozen=True)
class FirstCam:
    """Fire on the first CAM seen since the orchestrator was last idle."""

    station_filter: Optional[frozenset[int]] = None
    cooldown_s: float = DEFAULT_IDLE_TIMEOUT_S

    def __post_init__(self):
        if self.cooldown_s < 0:
            raise ValueError("cooldown_s must be non-negative")
        if self.station_filter is not None:
            object.__setattr__(self, "station_filter", frozenset(self.station_filter))


@dataclass(frozen=True)
class GeofencePresence:
    """Fire whenever a CAM reports a position inside ``fence``."""

    fence: Geofence
    station_filter: Optional[frozenset[int]] = None
    cooldown_s: float = DEFAULT_IDLE_TIMEOUT_S

    def __post_init__(self):
        if self.cooldown_s < 0:
            raise ValueError("cooldown_s must be non-negative")
        if self.station_filter is not None:
            object.__setattr__(self, "station_filter", frozenset(self.station_filter))


AnalysisRule = Union[FirstCam, GeofencePresence]


@dataclass(frozen=True)
class DeploymentRequest:
    requested_at_ms: float
    triggering_station: int
    triggering_cam_generation_ms: int


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    node: Hashable
    stages: tuple[tuple[str, float], ...] = ()
    requires: frozenset[str] = frozenset()

    def __post_init__(self):
        stages = tuple((str(label), float(d)) for label, d in self.stages)
        for label, d in stages:
            if d < 0:
                raise ValueError(f"service {self.name}: stage {label!r} has negative duration")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "requires", frozenset(self.requires))

    @property
    def startup_s(self) -> float:
        return sum(d for _, d in self.stages)


@dataclass(frozen=True)
class DeploymentPlan:
    services: tuple[ServiceSpec, ...]
    manager_processing_s: float
    sink_service: str

    def __post_init__(self):
        services = tuple(self.services)
        object.__setattr__(self, "services", services)
        if self.manager_processing_s < 0:
            raise ValueError("manager_processing_s must be non-negative")
        names = [s.name for s in services]
        if len(set(names)) != len(names):
            raise ValueError("service names must be unique")
        if self.sink_service not in names:
            raise ValueError(f"sink_service {self.sink_service!r} is not a service of the plan")
        for s in services:
            missing = s.requires - set(names)
            if missing:
                raise ValueError(f"service {s.name} requires unknown services {sorted(missing)}")
        self.topological_order()

    def service(self, name: str) -> ServiceSpec:
        for s in self.services:
            if s.name == name:
                return s
        raise KeyError(name)

    def topological_order(self) -> list[str]:
        """Service names with every service after the services it requires."""
        sorter = TopologicalSorter({s.name: sorted(s.requires) for s in self.services})
        try:
            return list(sorter.static_order())
        except CycleError as exc:
            raise CyclicDependency(f"dependency cycle: {' -> '.join(exc.args[1])}") from None


def service_ready_times(plan: DeploymentPlan, deploy_start_s: float) -> dict[str, float]:
    """Time each service finishes its own startup stages."""
    return {s.name: deploy_start_s + s.startup_s for s in plan.services}


def _usable_times(plan: DeploymentPlan, deploy_start_s: float) -> dict[str, float]:
    own = service_ready_times(plan, deploy_start_s)
    usable: dict[str, float] = {}
    for name in plan.topological_order():
        deps = plan.service(name).requires
        usable[name] = max([own[name], *(usable[d] for d in deps)])
    return usable


def ready_time(plan: DeploymentPlan, request_time_s: float) -> tuple[float, dict[str, float]]:
    """Return (pipeline ready time, time each service's output becomes usable)."""
    usable = _usable_times(plan, request_time_s + plan.manager_processing_s)
    return usable[plan.sink_service], usable


def critical_path(plan: DeploymentPlan) -> float:
    """Deployment latency: sink readiness measured from the start of pod creation."""
    return _usable_times(plan, 0.0)[plan.sink_service]


class Phase(Enum):
    IDLE = "Idle"
    DEPLOYING = "Deploying"
    ACTIVE = "Active"
    TEARING_DOWN = "TearingDown"


@dataclass(frozen=True)
class OrchestratorState:
    phase: Phase = Phase.IDLE
    since_ms: Optional[float] = None  # Deploying: request time; Active: ready time
    last_demand_ms: Optional[float] = None
    last_request_ms: Optional[float] = None
    armed: bool = True  # FirstCam may fire; re-armed on return to Idle
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S

    def __post_init__(self):
        if not self.idle_timeout_s > 0:
            raise ValueError("idle_timeout_s must be positive")


def _passes_filter(rule: AnalysisRule, station_id: int) -> bool:
    return rule.station_filter is None or station_id in rule.station_filter


def detect(
    rule: AnalysisRule, cam: CamMessage, detector_now_ms: float, state: OrchestratorState
) -> tuple[Optional[DeploymentRequest], OrchestratorState]:
    """Apply ``rule`` to one CAM.

    Every matching CAM refreshes ``last_demand_ms``. A request fires at most
    once per cooldown window; a FirstCam rule additionally fires only once
    per idle period.
    """
    if not _passes_filter(rule, cam.station_id):
        return None, state
    if isinstance(rule, GeofencePresence) and not geofence_contains(rule.fence, cam.position):
        return None, state
    state = replace(state, last_demand_ms=detector_now_ms)
    cooled = state.last_request_ms is None or detector_now_ms - state.last_request_ms >= rule.cooldown_s * 1000.0
    if not cooled:
        return None, state
    if isinstance(rule, FirstCam):
        if not (state.armed and state.phase is Phase.IDLE):
            return None, state
    request = DeploymentRequest(detector_now_ms, cam.station_id, cam.generation_time_ms)
    return request, replace(state, last_request_ms=detector_now_ms, armed=False)


@dataclass(frozen=True)
class Request:
    time_ms: float
    request: DeploymentRequest


@dataclass(frozen=True)
class PipelineReady:
    time_ms: float


@dataclass(frozen=True)
class CamSeen:
    time_ms: float


@dataclass(frozen=True)
class Tick:
    time_ms: float


OrchestratorEvent = Union[Request, PipelineReady, CamSeen, Tick]


@dataclass(frozen=True)
class Deploy:
    service: str
    node: Hashable


@dataclass(frozen=True)
class Undeploy:
    service: str
    node: Hashable


def step(state: OrchestratorState, event: OrchestratorEvent, plan: DeploymentPlan) -> tuple[OrchestratorState, list]:
    """Advance the application manager by one event; returns (new state, actions)."""
    actions: list = []
    if state.phase is Phase.TEARING_DOWN:
        # teardown is instantaneous: complete it before handling anything else
        state = replace(state, phase=Phase.IDLE, since_ms=None, armed=True)

    if isinstance(event, Request):
        state = replace(state, last_demand_ms=_latest(state.last_demand_ms, event.time_ms))
        if state.phase is Phase.IDLE:
            state = replace(state, phase=Phase.DEPLOYING, since_ms=event.time_ms, armed=False)
            actions = [Deploy(s.name, s.node) for s in plan.services]
    elif isinstance(event, PipelineReady):
        if state.phase is Phase.DEPLOYING:
            state = replace(state, phase=Phase.ACTIVE, since_ms=event.time_ms)
    elif isinstance(event, CamSeen):
        if state.phase in (Phase.DEPLOYING, Phase.ACTIVE):
            state = replace(state, last_demand_ms=_latest(state.last_demand_ms, event.time_ms))
    elif isinstance(event, Tick):
        if state.phase is Phase.ACTIVE:
            last = state.last_demand_ms if state.last_demand_ms is not None else state.since_ms
            if event.time_ms - last > state.idle_timeout_s * 1000.0:
                state = replace(state, phase=Phase.TEARING_DOWN)
                actions = [Undeploy(s.name, s.node) for s in plan.services]
    else:
        raise TypeError(f"unknown orchestrator event {event!r}")
    return state, actions


def _latest(a: Optional[float], b: float) -> float:
    return b if a is None else max(a, b)
