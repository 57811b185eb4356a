"""Line-delimited CAM recordings: a fault-tolerant streaming reader and the matching writer.

One JSON object per line, UTF-8, LF endings, no header. Keys, in the order
the writer emits them::

    received_epoch_ms   int, receive time at the recording node (UTC epoch ms)
    receiver            str, node that recorded the CAM
    station_id          int, 1 .. 2**32-1
    generation_time_ms  int, CAM generation time (UTC epoch ms)
    lat_e7, lon_e7      int, position in 1e-7 degree
    speed_cms           int, 0 .. 16382
    heading_ddeg        int, 0 .. 3599
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional

from .v2x_messages import CamMessage, GeoPosition

MAX_RECEIVE_LAG_MS = 86_400_000
FIELDS = (
    "received_epoch_ms",
    "receiver",
    "station_id",
    "generation_time_ms",
    "lat_e7",
    "lon_e7",
    "speed_cms",
    "heading_ddeg",
)
_INT_FIELDS = tuple(f for f in FIELDS if f != "receiver")


@dataclass(frozen=True)
class CamRecord:
    received_epoch_ms: int
    receiver_node: str
    cam: CamMessage

    def __post_init__(self):
        r = self.received_epoch_ms
        if not isinstance(r, int) or isinstance(r, bool) or not 0 <= r < 2**64:
            raise ValueError(f"received_epoch_ms={r!r} is not an unsigned 64-bit integer")
        if r < self.cam.generation_time_ms - MAX_RECEIVE_LAG_MS:
            raise ValueError("received more than a day before generation")

    def to_record(self) -> dict:
        c = self.cam
        return {
            "received_epoch_ms": self.received_epoch_ms,
            "receiver": self.receiver_node,
            "station_id": c.station_id,
            "generation_time_ms": c.generation_time_ms,
            "lat_e7": c.position.latitude_e7,
            "lon_e7": c.position.longitude_e7,
            "speed_cms": c.speed_cms,
            "heading_ddeg": c.heading_ddeg,
        }


def parse_record(line: str) -> CamRecord:
    """Parse one line; raises ValueError (or TypeError/KeyError) on any defect."""
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    for key in _INT_FIELDS:
        v = rec[key]
        if not isinstance(v, int) or isinstance(v, bool):
            raise TypeError(f"{key} must be an integer")
    if not isinstance(rec["receiver"], str):
        raise TypeError("receiver must be a string")
    cam = CamMessage(
        rec["station_id"],
        rec["generation_time_ms"],
        GeoPosition(rec["lat_e7"], rec["lon_e7"]),
        rec["speed_cms"],
        rec["heading_ddeg"],
    )
    return CamRecord(rec["received_epoch_ms"], rec["receiver"], cam)


@dataclass
class ParseSummary:
    ok_count: int = 0
    rejected_count: int = 0
    first_error_line: Optional[int] = None


class CamLogReader:
    """Iterate valid records of a recording; bad lines are counted in ``summary`` and skipped.

    Lines are consumed one at a time, so memory does not grow with the file.
    Line numbers in the summary are 1-based. Blank lines are ignored.
    """

    def __init__(self, source: BinaryIO):
        self._source = source
        self.summary = ParseSummary()

    def __iter__(self) -> Iterator[CamRecord]:
        for lineno, raw in enumerate(self._source, start=1):
            if not raw.strip():
                continue
            try:
                record = parse_record(raw.decode("utf-8"))
            except (ValueError, TypeError, KeyError):
                self.summary.rejected_count += 1
                if self.summary.first_error_line is None:
                    self.summary.first_error_line = lineno
                continue
            self.summary.ok_count += 1
            yield record


def read_cam_log(source: BinaryIO) -> CamLogReader:
    return CamLogReader(source)


def format_record(record: CamRecord) -> bytes:
    return json.dumps(record.to_record(), separators=(",", ":")).encode("utf-8") + b"\n"


def write_cam_log(records: Iterable[CamRecord], sink: BinaryIO) -> int:
    n = 0
    for r in records:
        sink.write(format_record(r))
        n += 1
    return n
