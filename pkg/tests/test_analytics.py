from __future__ import annotations

import io
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rsu_orchsim.analytics import (
    EmptyInput,
    EnergyModel,
    IncompleteRun,
    LatencyBreakdown,
    LatencyStats,
    OccurrenceMatrix,
    active_minutes,
    build_occurrence_matrix,
    decompose,
    delivery_latencies_ms,
    energy_report,
    format_latency_table,
    format_stats_table,
    geofence_distance,
    latency_stats,
    read_key_values,
    read_occurrence_csv,
    run_energy,
    stage_breakdown,
    write_key_values,
    write_latency_csv,
    write_occurrence_csv,
    write_stats_csv,
)
from rsu_orchsim.scenario import bundled_scenario
from rsu_orchsim.simulation import EventKind, EventLog, run_scenario
from rsu_orchsim.v2x_messages import CamMessage, GeoPosition

DAY = date(2026, 2, 2)


def or_shift_active(row: np.ndarray, buffer_min: int) -> int:
    """Brute force: OR the day with copies of itself shifted right by 1..buffer minutes."""
    active = row.copy()
    for k in range(1, buffer_min + 1):
        shifted = np.zeros_like(row)
        shifted[k:] = row[:-k]
        active |= shifted
    return int(active.sum())


def matrix_from_minutes(per_day: list[list[int]]) -> OccurrenceMatrix:
    cells = np.zeros((len(per_day), 1440), dtype=bool)
    for i, minutes in enumerate(per_day):
        cells[i, minutes] = True
    return OccurrenceMatrix(tuple(DAY + timedelta(days=i) for i in range(len(per_day))), cells)


def isolated_blocks(lengths: list[int], start: int = 360, spacing: int = 10) -> list[int]:
    minutes = []
    for i, n in enumerate(lengths):
        minutes += [start + i * spacing + k for k in range(n)]
    return minutes


@pytest.mark.parametrize(
    "name,components,total",
    [("replica_run2", (1.805, 9.593, 1.059), 12.457), ("replica_run3", (1.737, 10.279, 0.586), 12.602)],
)
def test_decompose_replica_runs(name, components, total):
    b = decompose(run_scenario(bundled_scenario(name)))
    assert (b.manager_processing_s, b.deployment_s, b.other_s) == pytest.approx(components, abs=1e-9)
    assert b.end_to_end_s == pytest.approx(total, abs=1e-9)
    assert b.manager_processing_s + b.deployment_s + b.other_s == pytest.approx(b.end_to_end_s, abs=1e-9)


def test_decompose_needs_a_full_cycle():
    with pytest.raises(IncompleteRun):
        decompose(EventLog([]))
    with pytest.raises(IncompleteRun):
        decompose(run_scenario(bundled_scenario("no_demand")))


def test_stage_breakdown_of_detection():
    log = run_scenario(bundled_scenario("replica_run1"))
    stages = stage_breakdown(log, "rsu1-object-detection")
    assert [label for label, _ in stages] == ["Creation of pod", "Model loading", "Waiting for first point cloud"]
    assert [d for _, d in stages] == pytest.approx([6.099, 0.370, 3.374], abs=1e-9)


def test_latency_stats_examples():
    assert latency_stats([5, 5, 5]) == LatencyStats(5, 5, 0, 5, 5)
    s = latency_stats([1, 2, 3, 4])
    assert (s.mean, s.median, s.min, s.max) == (2.5, 2.5, 1, 4)
    assert s.std == pytest.approx(1.2909944, abs=1e-6)
    assert latency_stats([7.5]) == LatencyStats(7.5, 7.5, 0.0, 7.5, 7.5)
    with pytest.raises(EmptyInput):
        latency_stats([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=50))
def test_latency_stats_ordering(xs):
    s = latency_stats(xs)
    assert s.min <= s.median <= s.max
    assert s.min - 1e-9 <= s.mean <= s.max + 1e-9
    assert s.std >= 0


def test_delivery_latencies_from_log():
    log = run_scenario(bundled_scenario("geofence_approach"))
    cam = delivery_latencies_ms(log, EventKind.CAM_DELIVERED)
    cpm = delivery_latencies_ms(log, EventKind.CPM_DELIVERED)
    assert cam and cpm
    assert all(3.22 <= x <= 22.91 for x in cam)
    assert all(0.19 <= x <= 11.79 for x in cpm)
    with pytest.raises(ValueError):
        delivery_latencies_ms(log, EventKind.TEARDOWN)


def test_geofence_distance_examples():
    assert geofence_distance(50, 13, 0) == pytest.approx(180.56, abs=0.01)
    assert geofence_distance(50, 13, 10) == pytest.approx(319.44, abs=0.01)
    assert geofence_distance(37, 0, 0) == 0
    with pytest.raises(ValueError):
        geofence_distance(0, 13, 0)


def _cam_at(local: datetime, sid: int = 1) -> CamMessage:
    return CamMessage(sid, int(local.timestamp() * 1000), GeoPosition(0, 0))


def test_occurrence_matrix_examples():
    empty = build_occurrence_matrix([], {1}, 60)
    assert empty.days == () and empty.cells.shape == (0, 1440)
    tz = timezone(timedelta(minutes=60))
    cams = [_cam_at(datetime(2026, 2, 2, 10, 15, s, tzinfo=tz)) for s in (1, 59)]
    cams.append(_cam_at(datetime(2026, 2, 2, 10, 16, 0, tzinfo=tz)))
    m = build_occurrence_matrix(cams, {1}, 60)
    assert m.days == (DAY,)
    assert int(m.cells.sum()) == 2
    assert m.cells[0, 615] and m.cells[0, 616]
    assert build_occurrence_matrix(cams, {2}, 60).cells.sum() == 0
    assert build_occurrence_matrix(cams, None, 60) == m


def test_occurrence_matrix_local_date_boundary():
    # 23:30 UTC is already the next day at UTC+1
    cam = CamMessage(1, int(datetime(2026, 2, 2, 23, 30, tzinfo=timezone.utc).timestamp() * 1000), GeoPosition(0, 0))
    m = build_occurrence_matrix([cam], None, 60)
    assert m.days == (date(2026, 2, 3),) and m.cells[0, 30]


def test_occurrence_matrix_rejects_bad_shape():
    with pytest.raises(ValueError):
        OccurrenceMatrix((DAY,), np.zeros((1, 1439), dtype=bool))


def test_active_minutes_examples():
    assert active_minutes(matrix_from_minutes([[10, 11, 12]]), 1) == [4]
    assert active_minutes(matrix_from_minutes([[]]), 5) == [0]
    assert active_minutes(matrix_from_minutes([[1439]]), 3) == [1]
    blocks = isolated_blocks([2, 2, 2] + [1] * 12)
    assert len(blocks) == 18
    assert active_minutes(matrix_from_minutes([blocks]), 1) == [33]


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, (3, 1440), elements=st.booleans() | st.just(False)), st.integers(0, 30))
def test_active_minutes_matches_or_shift_oracle(cells, buffer_min):
    m = OccurrenceMatrix((DAY, DAY + timedelta(days=1), DAY + timedelta(days=2)), cells)
    got = active_minutes(m, buffer_min)
    assert got == [or_shift_active(row, buffer_min) for row in cells]
    assert active_minutes(m, 0) == m.occurrence_counts()
    assert all(a <= b <= 1440 for a, b in zip(got, active_minutes(m, buffer_min + 1)))


def test_energy_examples():
    assert EnergyModel().wh_per_minute == 3.0
    per_day = [isolated_blocks([2, 2, 2] + [1] * 12)] * 7
    report = energy_report(matrix_from_minutes(per_day))
    assert report.active_min_per_day == 33
    assert report.inactive_min_per_day == 1407
    assert report.active_min_per_day + report.inactive_min_per_day == 1440
    assert report.avoidable_wh_per_day == pytest.approx(4221.0)
    assert report.avoidable_kwh_per_year == pytest.approx(1540.665)
    assert report.extrapolated_kwh_per_year(100) == pytest.approx(38516.625)
    assert report.extrapolated_kwh_per_year(4) == report.avoidable_kwh_per_year
    idle = energy_report(OccurrenceMatrix.empty([DAY]))
    assert idle.avoidable_wh_per_day == 1440 * 3
    with pytest.raises(ValueError):
        energy_report(OccurrenceMatrix.empty())
    with pytest.raises(ValueError):
        EnergyModel(n_units=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.floats(0, 500, allow_nan=False), st.lists(st.integers(0, 1439), max_size=40))
def test_energy_scales_linearly(units, power, minutes):
    m = matrix_from_minutes([minutes])
    base = energy_report(m, EnergyModel(power, 1, 1))
    scaled = energy_report(m, EnergyModel(power, units, 1))
    assert scaled.avoidable_wh_per_day == pytest.approx(base.avoidable_wh_per_day * units)
    doubled = energy_report(m, EnergyModel(2 * power, units, 1))
    assert doubled.avoidable_wh_per_day == pytest.approx(2 * scaled.avoidable_wh_per_day)
    assert scaled.extrapolated_kwh_per_year(units) == pytest.approx(scaled.avoidable_kwh_per_year)


def test_run_energy_idle_and_active():
    idle = run_energy(run_scenario(bundled_scenario("no_demand")), 120)
    assert idle.deployed_s == 0 and idle.consumed_wh == 0
    active = run_energy(run_scenario(bundled_scenario("replica_run1")), 20)
    assert 0 < active.deployed_s < 20
    assert active.consumed_wh < active.always_on_wh


def test_report_writers_roundtrip():
    m = matrix_from_minutes([[0, 5, 1439], []])
    buf = io.StringIO()
    write_occurrence_csv(m, buf)
    buf.seek(0)
    assert read_occurrence_csv(buf) == m

    kv = io.StringIO()
    write_key_values([("a", 1), ("b", 4.221), ("c", "x")], kv)
    kv.seek(0)
    assert read_key_values(kv) == {"a": "1", "b": "4.221", "c": "x"}

    rows = [("run1", LatencyBreakdown(12.347, 1.854, 9.843, 0.65))]
    csv_buf = io.StringIO()
    write_latency_csv(rows, csv_buf)
    assert csv_buf.getvalue().splitlines()[1] == "run1,12.347000,1.854000,9.843000,0.650000"
    assert "12.347" in format_latency_table(rows)

    stats = [("CAM", latency_stats([1, 2, 3, 4]))]
    s_buf = io.StringIO()
    write_stats_csv(stats, s_buf)
    assert s_buf.getvalue().splitlines()[0] == "transmission,mean_ms,median_ms,std_ms,min_ms,max_ms"
    assert "2.50" in format_stats_table(stats)
