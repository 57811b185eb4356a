"""Post-hoc analyses: latency decomposition and statistics, geofence sizing, CAM occurrence and energy."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .simulation import EventKind, EventLog, NoCamDelivered, NoCpmReceived, first_cpm_latency
from .v2x_messages import CamMessage

MINUTES_PER_DAY = 1440
DAYS_PER_YEAR = 365


class IncompleteRun(LookupError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class LatencyBreakdown:
    end_to_end_s: float
    manager_processing_s: float
    deployment_s: float
    other_s: float


def decompose(log: EventLog) -> LatencyBreakdown:
    """Split the first trigger-to-CPM cycle of ``log`` into its latency components.

    Manager processing and deployment are read from node-local timestamps, so
    any clock offset between the server and the node recording readiness shows
    up in those components and is absorbed by ``other``.
    """
    req = log.first(EventKind.REQUEST_ISSUED)
    if req is None:
        raise IncompleteRun("no deployment request in log")
    mgr = log.first(EventKind.MANAGER_DONE, lambda e: e.seq > req.seq)
    if mgr is None:
        raise IncompleteRun("application manager never finished")
    ready = log.first(EventKind.PIPELINE_READY, lambda e: e.seq > mgr.seq)
    if ready is None:
        raise IncompleteRun("pipeline never became ready")
    try:
        e2e = first_cpm_latency(log, req.attrs["triggering_station"])
    except (NoCamDelivered, NoCpmReceived) as exc:
        raise IncompleteRun(str(exc)) from exc
    manager = (mgr.node_local_ms - req.node_local_ms) / 1000.0
    deployment = (ready.node_local_ms - mgr.node_local_ms) / 1000.0
    return LatencyBreakdown(e2e, manager, deployment, e2e - manager - deployment)


def stage_breakdown(log: EventLog, service: str) -> list[tuple[str, float]]:
    """Per-stage durations of ``service`` in the first deployment, in seconds.

    The first stage is measured from ManagerDone on the server to the stage
    event on the service's node; that difference crosses node clocks.
    """
    mgr = log.first(EventKind.MANAGER_DONE)
    if mgr is None:
        raise IncompleteRun("no deployment in log")
    stages = [
        e for e in log
        if e.kind in (EventKind.POD_CREATED, EventKind.STAGE_COMPLETED)
        and e.attrs.get("service") == service
        and e.seq > mgr.seq
    ]
    out = []
    prev = mgr.node_local_ms
    seen = set()
    for e in stages:
        idx = e.attrs["stage_index"]
        if idx in seen:
            break  # a later redeployment
        seen.add(idx)
        out.append((e.attrs["stage"], (e.node_local_ms - prev) / 1000.0))
        prev = e.node_local_ms
    return out


def service_ready_latency(log: EventLog, service: str) -> float:
    """Seconds from ManagerDone (server clock) to the service's last stage (its node's clock)."""
    return sum(d for _, d in stage_breakdown(log, service))


def delivery_latencies_ms(log: EventLog, kind: EventKind) -> list[float]:
    """True ITS-G5 latencies of every CAM (``CAM_DELIVERED``) or CPM (``CPM_DELIVERED``) delivery."""
    if kind not in (EventKind.CAM_DELIVERED, EventKind.CPM_DELIVERED):
        raise ValueError(f"not a delivery kind: {kind}")
    return [e.time_true_ms - log[e.causation_seq].time_true_ms for e in log if e.kind is kind]


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    median: float
    std: float
    min: float
    max: float


def latency_stats(samples: Sequence[float]) -> LatencyStats:
    """Mean, median, sample standard deviation (n-1), min and max."""
    xs = list(samples)
    if not xs:
        raise EmptyInput("latency_stats needs at least one sample")
    std = statistics.stdev(xs) if len(xs) > 1 else 0.0
    return LatencyStats(statistics.fmean(xs), statistics.median(xs), std, min(xs), max(xs))


def geofence_distance(speed_kmh: float, e2e_s: float, planning_horizon_s: float = 0.0) -> float:
    """Distance covered at ``speed_kmh`` during the end-to-end latency plus a planning horizon."""
    if not speed_kmh > 0:
        raise ValueError("speed_kmh must be positive")
    if e2e_s < 0 or planning_horizon_s < 0:
        raise ValueError("latencies must be non-negative")
    return speed_kmh / 3.6 * (e2e_s + planning_horizon_s)


# ---------------------------------------------------------------- occurrence and energy


@dataclass(frozen=True)
class OccurrenceMatrix:
    days: tuple[date, ...]
    cells: np.ndarray  # bool, shape (len(days), 1440)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.shape[1] != MINUTES_PER_DAY or cells.shape[0] != len(self.days):
            raise ValueError(f"cells must have shape ({len(self.days)}, {MINUTES_PER_DAY}), got {cells.shape}")
        object.__setattr__(self, "days", tuple(self.days))
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        return (
            isinstance(other, OccurrenceMatrix)
            and self.days == other.days
            and np.array_equal(self.cells, other.cells)
        )

    def occurrence_counts(self) -> list[int]:
        return [int(n) for n in self.cells.sum(axis=1)]

    @classmethod
    def empty(cls, days: Sequence[date] = ()) -> OccurrenceMatrix:
        return cls(tuple(days), np.zeros((len(days), MINUTES_PER_DAY), dtype=bool))


def _local_date_minute(epoch_ms: int, tz_offset_min: int) -> tuple[date, int]:
    local_min = (epoch_ms // 60000) + tz_offset_min
    day_index, minute = divmod(local_min, MINUTES_PER_DAY)
    return date(1970, 1, 1) + timedelta(days=day_index), minute


def build_occurrence_matrix(
    cams: Iterable[CamMessage],
    relevant_stations: Optional[set[int]] = None,
    timezone_offset_min: int = 0,
    days: Optional[Sequence[date]] = None,
) -> OccurrenceMatrix:
    """Mark every (local day, minute) in which a relevant CAM was generated.

    ``relevant_stations=None`` accepts every station. Without explicit ``days``
    the matrix spans the contiguous range of dates that saw a relevant CAM.
    """
    marks: dict[date, set[int]] = {}
    for cam in cams:
        if relevant_stations is not None and cam.station_id not in relevant_stations:
            continue
        d, m = _local_date_minute(cam.generation_time_ms, timezone_offset_min)
        marks.setdefault(d, set()).add(m)
    if days is None:
        if not marks:
            return OccurrenceMatrix.empty()
        first, last = min(marks), max(marks)
        days = [first + timedelta(days=i) for i in range((last - first).days + 1)]
    days = tuple(days)
    index = {d: i for i, d in enumerate(days)}
    cells = np.zeros((len(days), MINUTES_PER_DAY), dtype=bool)
    for d, minutes in marks.items():
        if d in index:
            cells[index[d], sorted(minutes)] = True
    return OccurrenceMatrix(days, cells)


def active_minutes(matrix: OccurrenceMatrix, buffer_min: int) -> list[int]:
    """Per day, size of the union of [m, m + buffer_min] over occurrence minutes m, clipped to the day."""
    if buffer_min < 0:
        raise ValueError("buffer_min must be non-negative")
    counts = []
    for row in matrix.cells:
        total = 0
        run_start = run_end = None
        for m in np.flatnonzero(row):
            end = min(int(m) + buffer_min, MINUTES_PER_DAY - 1)
            if run_end is not None and m <= run_end + 1:
                run_end = max(run_end, end)
                continue
            if run_end is not None:
                total += run_end - run_start + 1
            run_start, run_end = int(m), end
        if run_end is not None:
            total += run_end - run_start + 1
        counts.append(total)
    return counts


@dataclass(frozen=True)
class EnergyModel:
    extra_power_per_unit_w: float = 45.0
    n_units: int = 4
    buffer_min: int = 1

    def __post_init__(self):
        if self.extra_power_per_unit_w < 0:
            raise ValueError("extra_power_per_unit_w must be non-negative")
        if self.n_units < 1:
            raise ValueError("n_units must be at least 1")
        if self.buffer_min < 0:
            raise ValueError("buffer_min must be non-negative")

    @property
    def wh_per_minute(self) -> float:
        return self.extra_power_per_unit_w * self.n_units / 60.0


@dataclass(frozen=True)
class EnergyReport:
    days: int
    occurrence_min_per_day: float
    active_min_per_day: float
    inactive_min_per_day: float
    wh_per_minute: float
    avoidable_wh_per_day: float
    avoidable_kwh_per_year: float
    n_units: int

    def extrapolated_kwh_per_year(self, n: int) -> float:
        """Annual avoidable energy for ``n`` units under the same traffic."""
        return self.avoidable_kwh_per_year * n / self.n_units

    def as_items(self) -> list[tuple[str, float]]:
        return [
            ("days", self.days),
            ("occurrence_min_per_day", self.occurrence_min_per_day),
            ("active_min_per_day", self.active_min_per_day),
            ("inactive_min_per_day", self.inactive_min_per_day),
            ("wh_per_minute", self.wh_per_minute),
            ("avoidable_wh_per_day", self.avoidable_wh_per_day),
            ("avoidable_kwh_per_day", self.avoidable_wh_per_day / 1000.0),
            ("avoidable_kwh_per_year", self.avoidable_kwh_per_year),
            ("n_units", self.n_units),
            ("extrapolated_kwh_per_year_100_units", self.extrapolated_kwh_per_year(100)),
        ]


def energy_report(matrix: OccurrenceMatrix, model: EnergyModel = EnergyModel()) -> EnergyReport:
    if not matrix.days:
        raise ValueError("energy_report needs at least one day")
    active = active_minutes(matrix, model.buffer_min)
    mean_active = statistics.fmean(active)
    inactive = MINUTES_PER_DAY - mean_active
    daily_wh = inactive * model.wh_per_minute
    return EnergyReport(
        days=len(matrix.days),
        occurrence_min_per_day=statistics.fmean(matrix.occurrence_counts()),
        active_min_per_day=mean_active,
        inactive_min_per_day=inactive,
        wh_per_minute=model.wh_per_minute,
        avoidable_wh_per_day=daily_wh,
        avoidable_kwh_per_year=daily_wh / 1000.0 * DAYS_PER_YEAR,
        n_units=model.n_units,
    )


@dataclass(frozen=True)
class RunEnergy:
    duration_s: float
    deployed_s: float
    consumed_wh: float
    always_on_wh: float

    @property
    def avoided_wh(self) -> float:
        return self.always_on_wh - self.consumed_wh


def deployed_intervals(log: EventLog, end_ms: float) -> list[tuple[float, float]]:
    """True-time intervals during which pods were being started or running."""
    intervals = []
    start = None
    for e in log:
        if e.kind is EventKind.MANAGER_DONE and start is None:
            start = e.time_true_ms
        elif e.kind is EventKind.TEARDOWN and start is not None:
            intervals.append((start, e.time_true_ms))
            start = None
    if start is not None:
        intervals.append((start, end_ms))
    return intervals


def run_energy(log: EventLog, duration_s: float, model: EnergyModel = EnergyModel()) -> RunEnergy:
    """Additional energy of one simulated run against an always-on baseline of the same length."""
    deployed_ms = sum(b - a for a, b in deployed_intervals(log, duration_s * 1000.0))
    power = model.extra_power_per_unit_w * model.n_units
    return RunEnergy(duration_s, deployed_ms / 1000.0, power * deployed_ms / 3.6e6, power * duration_s / 3600.0)


# ---------------------------------------------------------------- report writers


def write_latency_csv(rows: Sequence[tuple[str, LatencyBreakdown]], fp: TextIO) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["run", "end_to_end_s", "manager_processing_s", "deployment_s", "other_s"])
    for name, b in rows:
        w.writerow([name, f"{b.end_to_end_s:.6f}", f"{b.manager_processing_s:.6f}", f"{b.deployment_s:.6f}", f"{b.other_s:.6f}"])


def format_latency_table(rows: Sequence[tuple[str, LatencyBreakdown]]) -> str:
    header = f"{'Run':<12}{'End-to-End [s]':>16}{'Manager [s]':>14}{'Deployment [s]':>16}{'Other [s]':>12}"
    lines = [header, "-" * len(header)]
    for name, b in rows:
        lines.append(
            f"{name:<12}{b.end_to_end_s:>16.3f}{b.manager_processing_s:>14.3f}{b.deployment_s:>16.3f}{b.other_s:>12.3f}"
        )
    return "\n".join(lines) + "\n"


def write_stats_csv(rows: Sequence[tuple[str, LatencyStats]], fp: TextIO) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["transmission", "mean_ms", "median_ms", "std_ms", "min_ms", "max_ms"])
    for name, s in rows:
        w.writerow([name, *(f"{v:.4f}" for v in (s.mean, s.median, s.std, s.min, s.max))])


def format_stats_table(rows: Sequence[tuple[str, LatencyStats]]) -> str:
    header = f"{'Transmission':<14}{'Mean':>9}{'Median':>9}{'Std':>9}{'Min':>9}{'Max':>9}"
    lines = [header, "-" * len(header)]
    for name, s in rows:
        lines.append(f"{name:<14}{s.mean:>9.2f}{s.median:>9.2f}{s.std:>9.2f}{s.min:>9.2f}{s.max:>9.2f}")
    return "\n".join(lines) + "\n"


def write_occurrence_csv(matrix: OccurrenceMatrix, fp: TextIO) -> None:
    """One row per day: ISO date followed by a 1440-character 0/1 minute string."""
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["date", "minutes"])
    for d, row in zip(matrix.days, matrix.cells):
        w.writerow([d.isoformat(), "".join("1" if x else "0" for x in row)])


def read_occurrence_csv(fp: TextIO) -> OccurrenceMatrix:
    rows = list(csv.reader(fp))[1:]
    days = [date.fromisoformat(r[0]) for r in rows]
    cells = np.array([[c == "1" for c in r[1]] for r in rows], dtype=bool).reshape(len(rows), MINUTES_PER_DAY)
    return OccurrenceMatrix(tuple(days), cells)


def write_key_values(items: Iterable[tuple[str, object]], fp: TextIO) -> None:
    for k, v in items:
        if isinstance(v, float):
            v = repr(round(v, 6)) if math.isfinite(v) else str(v)
        fp.write(f"{k}={v}\n")


def read_key_values(fp: TextIO) -> dict[str, str]:
    out = {}
    for line in fp:
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


def utc_to_local_date(epoch_ms: int, tz_offset_min: int) -> date:
    return (datetime.fromtimestamp(epoch_ms / 1000.0, tz=timezone.utc) + timedelta(minutes=tz_offset_min)).date()
