from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsu_orchsim.geospatial import Circle, destination
from rsu_orchsim.orchestration import (
    CamSeen,
    CyclicDependency,
    Deploy,
    DeploymentPlan,
    DeploymentRequest,
    FirstCam,
    GeofencePresence,
    OrchestratorState,
    Phase,
    PipelineReady,
    Request,
    ServiceSpec,
    Tick,
    Undeploy,
    critical_path,
    detect,
    ready_time,
    step,
)
from rsu_orchsim.v2x_messages import CamMessage, GeoPosition

CENTER = GeoPosition.from_degrees(50.787, 6.046)

DETECTION = ServiceSpec(
    "object_detection",
    "rsu1",
    (("Creation of pod", 6.099), ("First detection callback", 0.370), ("First object list", 3.374)),
    frozenset({"lidar_driver_1", "lidar_driver_2"}),
)
DRIVER_1 = ServiceSpec("lidar_driver_1", "rsu1", (("Creation of pod", 4.162), ("Driver start", 0.630)))
DRIVER_2 = ServiceSpec("lidar_driver_2", "rsu1", (("Creation of pod", 4.151), ("Driver start", 0.655)))
PLAN = DeploymentPlan((DETECTION, DRIVER_1, DRIVER_2), 1.854, "object_detection")


def brute_force_usable(services: dict[str, tuple[float, list[str]]], sink: str) -> float:
    """Max own startup over every service reachable from ``sink`` along requires, by path enumeration."""
    best = 0.0

    def walk(name, seen):
        nonlocal best
        startup, requires = services[name]
        best = max(best, startup)
        for r in requires:
            assert r not in seen
            walk(r, seen | {r})

    walk(sink, {sink})
    return best


@st.composite
def random_dags(draw):
    n = draw(st.integers(1, 8))
    names = draw(st.permutations([f"s{i}" for i in range(n)]))
    services = {}
    for i, name in enumerate(names):
        # a service may only require services earlier in this random order, so the graph is acyclic
        requires = draw(st.lists(st.sampled_from(names[:i]), unique=True, max_size=i)) if i else []
        stages = draw(st.lists(st.floats(0, 20, allow_nan=False), max_size=3))
        services[name] = (tuple((f"st{k}", d) for k, d in enumerate(stages)), requires)
    sink = draw(st.sampled_from(names))
    manager = draw(st.floats(0, 5, allow_nan=False))
    return services, sink, manager


def test_table_plan_deployment_latency():
    assert critical_path(PLAN) == pytest.approx(9.843, abs=1e-9)
    ready, usable = ready_time(PLAN, 100.0)
    assert ready == pytest.approx(100 + 1.854 + 9.843, abs=1e-9)
    assert usable["lidar_driver_1"] == pytest.approx(100 + 1.854 + 4.792, abs=1e-9)
    assert usable["lidar_driver_2"] == pytest.approx(100 + 1.854 + 4.806, abs=1e-9)


def test_trivial_plan_ready_at_request():
    plan = DeploymentPlan((ServiceSpec("a", "n"),), 0.0, "a")
    assert ready_time(plan, 12.5)[0] == 12.5


def test_chain_uses_parallel_startup():
    a = ServiceSpec("A", "n", (("s", 2.0),))
    b = ServiceSpec("B", "n", (("s", 3.0),), frozenset({"A"}))
    assert critical_path(DeploymentPlan((a, b), 0.0, "B")) == 3.0
    # the serial reading would be 5; the dependency only matters when it is slower
    a_slow = ServiceSpec("A", "n", (("s", 4.0),))
    assert critical_path(DeploymentPlan((a_slow, b), 0.0, "B")) == 4.0


@settings(max_examples=1000, deadline=None)
@given(random_dags())
def test_critical_path_matches_brute_force(case):
    services, sink, manager = case
    plan = DeploymentPlan(
        tuple(ServiceSpec(n, "node", stages, frozenset(req)) for n, (stages, req) in services.items()),
        manager,
        sink,
    )
    oracle = brute_force_usable({n: (sum(d for _, d in st_), req) for n, (st_, req) in services.items()}, sink)
    assert critical_path(plan) == pytest.approx(oracle, abs=1e-9)
    ready, _ = ready_time(plan, 7.0)
    assert ready - 7.0 == pytest.approx(manager + critical_path(plan), abs=1e-9)


def test_plan_validation():
    a = ServiceSpec("a", "n", (), frozenset({"b"}))
    b = ServiceSpec("b", "n", (), frozenset({"a"}))
    with pytest.raises(CyclicDependency):
        DeploymentPlan((a, b), 0, "a")
    with pytest.raises(ValueError):
        DeploymentPlan((ServiceSpec("a", "n"),), 0, "missing")
    with pytest.raises(ValueError):
        DeploymentPlan((ServiceSpec("a", "n", (), frozenset({"ghost"})),), 0, "a")
    with pytest.raises(ValueError):
        DeploymentPlan((ServiceSpec("a", "n"), ServiceSpec("a", "m")), 0, "a")
    with pytest.raises(ValueError):
        ServiceSpec("a", "n", (("x", -1.0),))


def _cam(sid=7, t=0, p=CENTER):
    return CamMessage(sid, t, p)


def test_first_cam_fires_once_per_idle_period():
    rule = FirstCam()
    req, state = detect(rule, _cam(42), 1000.0, OrchestratorState())
    assert req == DeploymentRequest(1000.0, 42, 0)
    again, state = detect(rule, _cam(42, 100), 1100.0, state)
    assert again is None
    assert state.last_demand_ms == 1100.0


def test_geofence_rule_ignores_outside_cams():
    rule = GeofencePresence(Circle(CENTER, 300))
    state = OrchestratorState()
    req, after = detect(rule, _cam(p=destination(CENTER, 0, 500)), 10.0, state)
    assert req is None and after == state
    req, after = detect(rule, _cam(p=destination(CENTER, 0, 200)), 20.0, state)
    assert req is not None and after.last_demand_ms == 20.0


def test_station_filter():
    rule = FirstCam(station_filter={1, 2})
    req, state = detect(rule, _cam(3), 0.0, OrchestratorState())
    assert req is None and state.last_demand_ms is None
    req, _ = detect(rule, _cam(2), 0.0, state)
    assert req is not None


def test_cooldown_limits_geofence_requests():
    rule = GeofencePresence(Circle(CENTER, 300), cooldown_s=60)
    state = OrchestratorState()
    fired = []
    for i in range(1300):  # 130 s of CAMs at 10 Hz
        req, state = detect(rule, _cam(t=i * 100), i * 100.0, state)
        if req:
            fired.append(req.requested_at_ms)
    assert fired == [0.0, 60_000.0, 120_000.0]
    req_a, s = detect(rule, _cam(), 0.0, OrchestratorState())
    req_b, s = detect(rule, _cam(t=100), 100.0, s)
    assert req_a is not None and req_b is None


def test_lifecycle():
    state = OrchestratorState(idle_timeout_s=60)
    req = DeploymentRequest(0.0, 1, 0)
    state, actions = step(state, Request(0.0, req), PLAN)
    assert state.phase is Phase.DEPLOYING
    assert sorted(a.service for a in actions) == sorted(s.name for s in PLAN.services)
    assert all(isinstance(a, Deploy) for a in actions)
    # a second request while deploying does not start another deployment
    state, actions = step(state, Request(500.0, req), PLAN)
    assert state.phase is Phase.DEPLOYING and actions == []
    state, actions = step(state, CamSeen(900.0), PLAN)
    assert state.phase is Phase.DEPLOYING and actions == [] and state.last_demand_ms == 900.0
    state, _ = step(state, PipelineReady(11_700.0), PLAN)
    assert state.phase is Phase.ACTIVE and state.since_ms == 11_700.0


def test_idle_timeout_boundary():
    state = OrchestratorState(Phase.ACTIVE, 0.0, last_demand_ms=100_000.0, idle_timeout_s=60)
    state, actions = step(state, Tick(159_000.0), PLAN)
    assert state.phase is Phase.ACTIVE and actions == []
    state, actions = step(state, Tick(160_000.0), PLAN)
    assert state.phase is Phase.ACTIVE
    state, actions = step(state, Tick(161_000.0), PLAN)
    assert state.phase is Phase.TEARING_DOWN
    assert {type(a) for a in actions} == {Undeploy}
    state, actions = step(state, Tick(162_000.0), PLAN)
    assert state.phase is Phase.IDLE and state.armed and actions == []


ALLOWED = {
    (Phase.IDLE, Phase.IDLE),
    (Phase.IDLE, Phase.DEPLOYING),
    (Phase.DEPLOYING, Phase.DEPLOYING),
    (Phase.DEPLOYING, Phase.ACTIVE),
    (Phase.ACTIVE, Phase.ACTIVE),
    (Phase.ACTIVE, Phase.TEARING_DOWN),
    (Phase.TEARING_DOWN, Phase.IDLE),
    (Phase.TEARING_DOWN, Phase.DEPLOYING),  # teardown completes, then the request is handled
}


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["request", "ready", "cam", "tick"]), st.integers(0, 90_000)), max_size=40))
def test_random_event_sequences_follow_lifecycle(raw):
    state = OrchestratorState(idle_timeout_s=30)
    t = 0.0
    for kind, dt in raw:
        t += dt
        event = {
            "request": Request(t, DeploymentRequest(t, 1, 0)),
            "ready": PipelineReady(t),
            "cam": CamSeen(t),
            "tick": Tick(t),
        }[kind]
        before = state.phase
        state, actions = step(state, event, PLAN)
        assert (before, state.phase) in ALLOWED
        if any(isinstance(a, Deploy) for a in actions):
            assert before in (Phase.IDLE, Phase.TEARING_DOWN)
        if any(isinstance(a, Undeploy) for a in actions):
            assert state.phase is Phase.TEARING_DOWN


def test_no_matching_cam_means_no_actions():
    rule = GeofencePresence(Circle(CENTER, 100))
    state = OrchestratorState()
    actions = []
    for i in range(100):
        req, state = detect(rule, _cam(t=i * 100, p=destination(CENTER, 45, 1000 - i)), i * 100.0, state)
        if req:
            state, acts = step(state, Request(i * 100.0, req), PLAN)
            actions += acts
        state, acts = step(state, Tick(i * 100.0), PLAN)
        actions += acts
    assert actions == [] and state.phase is Phase.IDLE
