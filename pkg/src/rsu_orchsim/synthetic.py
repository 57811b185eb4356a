"""Seeded synthetic week-long CAM recording with controlled demand at one intersection.

Relevant stations pass close to the intersection and transmit only during
short blocks of one or two whole minutes, so each block is a run of occurrence
minutes separated from its neighbours by several idle minutes. Every other
station stays 500 to 800 m away.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone

from .geospatial import destination
from .recordings_io import CamRecord
from .v2x_messages import CamMessage, GeoPosition

DEFAULT_INTERSECTION = (50.787, 6.046)
DEFAULT_TZ_OFFSET_MIN = 60
DEFAULT_FIRST_DAY = date(2026, 2, 2)
# per-day occurrence minutes and isolated blocks; means are 18 and 15
DEFAULT_OCCURRENCE_MINUTES = (16, 20, 18, 17, 19, 18, 18)
DEFAULT_BLOCKS = (14, 16, 15, 15, 15, 14, 16)

_SLOT_MIN = 8  # each block gets its own slot, leaving room for buffer minutes between blocks
_FIRST_SLOT_MIN = 6 * 60
_N_SLOTS = (23 * 60 - _FIRST_SLOT_MIN) // _SLOT_MIN


@dataclass(frozen=True)
class RecordingSpec:
    total_rows: int = 69_610
    n_stations: int = 714
    first_day: date = DEFAULT_FIRST_DAY
    tz_offset_min: int = DEFAULT_TZ_OFFSET_MIN
    occurrence_minutes: tuple[int, ...] = DEFAULT_OCCURRENCE_MINUTES
    blocks: tuple[int, ...] = DEFAULT_BLOCKS
    intersection: tuple[float, float] = DEFAULT_INTERSECTION
    receiver: str = "rsu-4"
    seed: int = 0
    relevant_max_m: float = 200.0
    far_range_m: tuple[float, float] = (500.0, 800.0)

    def __post_init__(self):
        if len(self.occurrence_minutes) != len(self.blocks):
            raise ValueError("occurrence_minutes and blocks need one entry per day")
        for m, b in zip(self.occurrence_minutes, self.blocks):
            if not b <= m <= 2 * b:
                raise ValueError(f"{m} minutes cannot form {b} blocks of one or two minutes")
            if b > _N_SLOTS:
                raise ValueError(f"at most {_N_SLOTS} blocks per day")
        if sum(self.blocks) >= self.n_stations:
            raise ValueError("need at least one far-away station")

    @property
    def days(self) -> list[date]:
        return [self.first_day + timedelta(days=i) for i in range(len(self.blocks))]

    def day_start_epoch_ms(self, d: date) -> int:
        midnight = datetime(d.year, d.month, d.day, tzinfo=timezone.utc)
        return int(midnight.timestamp() * 1000) - self.tz_offset_min * 60_000


def _block_records(spec: RecordingSpec, rng: random.Random, station: int, t0_ms: int, minutes: int):
    """One pass through the intersection covering ``minutes`` whole minutes from ``t0_ms``."""
    center = GeoPosition.from_degrees(*spec.intersection)
    bearing = rng.choice((0.0, 90.0, 180.0, 270.0)) + rng.uniform(-20.0, 20.0)
    first_s, last_s = 5, 60 * minutes - 5
    speed = rng.randint(100, 600)
    for s in range(first_s, last_s + 1):
        frac = (s - first_s) / (last_s - first_s)
        pos = destination(center, bearing, spec.relevant_max_m * (1.0 - frac) + 10.0 * frac)
        gen = t0_ms + s * 1000
        heading = int(round((bearing + 180.0) * 10)) % 3600
        cam = CamMessage(station, gen, pos, speed, heading)
        yield CamRecord(gen + rng.randint(3, 23), spec.receiver, cam)


def generate_recording(spec: RecordingSpec = RecordingSpec()) -> list[CamRecord]:
    """Records sorted by (generation time, station id)."""
    rng = random.Random(spec.seed)
    center = GeoPosition.from_degrees(*spec.intersection)
    station_ids = rng.sample(range(1, 2**32), spec.n_stations)
    n_relevant = sum(spec.blocks)
    relevant, far = station_ids[:n_relevant], station_ids[n_relevant:]

    out: list[CamRecord] = []
    it = iter(relevant)
    for d, m, b in zip(spec.days, spec.occurrence_minutes, spec.blocks):
        lengths = [2] * (m - b) + [1] * (2 * b - m)
        rng.shuffle(lengths)
        slots = sorted(rng.sample(range(_N_SLOTS), b))
        day0 = spec.day_start_epoch_ms(d)
        for slot, length in zip(slots, lengths):
            minute = _FIRST_SLOT_MIN + slot * _SLOT_MIN + rng.randint(0, _SLOT_MIN - 4)
            out.extend(_block_records(spec, rng, next(it), day0 + minute * 60_000, length))

    remaining = spec.total_rows - len(out)
    if remaining < len(far):
        raise ValueError("total_rows too small for the requested demand")
    # split the remaining rows over far stations: one row each plus a random share
    cuts = sorted(rng.sample(range(1, remaining), len(far) - 1))
    counts = [b - a for a, b in zip([0, *cuts], [*cuts, remaining])]
    week_ms = len(spec.days) * 86_400_000
    week0 = spec.day_start_epoch_ms(spec.first_day)
    lo, hi = spec.far_range_m
    for station, n in zip(far, counts):
        t0 = week0 + rng.randrange(0, week_ms - n * 1000)
        bearing = rng.uniform(0.0, 360.0)
        d0, d1 = rng.uniform(lo, hi), rng.uniform(lo, hi)
        speed = rng.randint(0, 2000)
        for i in range(n):
            frac = i / (n - 1) if n > 1 else 0.0
            pos = destination(center, bearing, d0 + (d1 - d0) * frac)
            gen = t0 + i * 1000
            cam = CamMessage(station, gen, pos, speed, rng.randrange(3600))
            out.append(CamRecord(gen + rng.randint(3, 23), spec.receiver, cam))

    out.sort(key=lambda r: (r.cam.generation_time_ms, r.cam.station_id))
    return out
