"""CAM and CPM message models and their fixed-layout binary wire codec.

Wire layout (all multi-byte integers little-endian)::

  CAM, 27 bytes
    0   2  magic "CA" (0x43 0x41)
    2   1  version 0x01
    3   4  station_id          u32
    7   8  generation_time_ms  u64
    15  4  latitude_e7         i32
    19  4  longitude_e7        i32
    23  2  speed_cms           u16
    25  2  heading_ddeg        u16

  CPM header, 16 bytes
    0   2  magic "CP" (0x43 0x50)
    2   1  version 0x01
    3   4  station_id          u32
    7   8  reference_time_ms   u64
    15  1  object_count        u8

  followed by object_count records of 21 bytes each
    0   2  object_id           u16
    2   4  latitude_e7         i32
    6   4  longitude_e7        i32
    10  2  speed_cms           u16
    12  2  heading_ddeg        u16
    14  1  object_class        u8
    15  6  reserved, zero
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

CAM_MAGIC = b"CA"
CPM_MAGIC = b"CP"
WIRE_VERSION = 0x01

CAM_LENGTH = 27
CPM_HEADER_LENGTH = 16
CPM_OBJECT_LENGTH = 21
MAX_CPM_OBJECTS = 255

MAX_SPEED_CMS = 16382
MAX_HEADING_DDEG = 3599
LAT_E7_LIMIT = 900_000_000
LON_E7_LIMIT = 1_800_000_000

_CAM = struct.Struct("<2sBIQiiHH")
_CPM_HEADER = struct.Struct("<2sBIQB")
_CPM_OBJECT = struct.Struct("<HiiHHB6s")

assert _CAM.size == CAM_LENGTH
assert _CPM_HEADER.size == CPM_HEADER_LENGTH
assert _CPM_OBJECT.size == CPM_OBJECT_LENGTH


class MalformedMessage(ValueError):
    """Raised when a byte sequence is not a valid encoded message."""


class TooManyObjects(ValueError):
    """A CPM can carry at most 255 perceived objects."""


class ObjectClass(IntEnum):
    UNKNOWN = 0
    PEDESTRIAN = 1
    CYCLIST = 2
    PASSENGER_CAR = 3
    TRUCK = 4


def _check_u(name: str, value: int, bits: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"{name} must be an int, got {type(value).__name__}")
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value} does not fit in u{bits}")


def check_station_id(value: int) -> int:
    """Validate a station id (u32, 0 is reserved as unassigned)."""
    _check_u("station_id", value, 32)
    if value == 0:
        raise ValueError("station_id 0 is reserved")
    return value


def _check_speed_heading(speed_cms: int, heading_ddeg: int) -> None:
    _check_u("speed_cms", speed_cms, 16)
    _check_u("heading_ddeg", heading_ddeg, 16)
    if speed_cms > MAX_SPEED_CMS:
        raise ValueError(f"speed_cms={speed_cms} exceeds {MAX_SPEED_CMS}")
    if heading_ddeg > MAX_HEADING_DDEG:
        raise ValueError(f"heading_ddeg={heading_ddeg} exceeds {MAX_HEADING_DDEG}")


@dataclass(frozen=True)
class GeoPosition:
    """WGS84 position in units of 1e-7 degree."""

    latitude_e7: int
    longitude_e7: int

    def __post_init__(self):
        for name in ("latitude_e7", "longitude_e7"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{name} must be an int")
        if not -LAT_E7_LIMIT <= self.latitude_e7 <= LAT_E7_LIMIT:
            raise ValueError(f"latitude_e7={self.latitude_e7} out of range")
        if not -LON_E7_LIMIT <= self.longitude_e7 <= LON_E7_LIMIT:
            raise ValueError(f"longitude_e7={self.longitude_e7} out of range")

    @classmethod
    def from_degrees(cls, lat: float, lon: float) -> GeoPosition:
        return cls(round(lat * 1e7), round(lon * 1e7))

    @property
    def lat(self) -> float:
        return self.latitude_e7 / 1e7

    @property
    def lon(self) -> float:
        return self.longitude_e7 / 1e7


@dataclass(frozen=True)
class CamMessage:
    station_id: int
    generation_time_ms: int
    position: GeoPosition
    speed_cms: int = 0
    heading_ddeg: int = 0

    def __post_init__(self):
        check_station_id(self.station_id)
        _check_u("generation_time_ms", self.generation_time_ms, 64)
        _check_speed_heading(self.speed_cms, self.heading_ddeg)


@dataclass(frozen=True)
class PerceivedObject:
    object_id: int
    position: GeoPosition
    speed_cms: int = 0
    heading_ddeg: int = 0
    object_class: ObjectClass = ObjectClass.UNKNOWN

    def __post_init__(self):
        _check_u("object_id", self.object_id, 16)
        _check_speed_heading(self.speed_cms, self.heading_ddeg)
        # normalises plain ints and rejects unknown codes
        object.__setattr__(self, "object_class", ObjectClass(self.object_class))


@dataclass(frozen=True)
class CpmMessage:
    station_id: int
    reference_time_ms: int
    objects: tuple[PerceivedObject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        check_station_id(self.station_id)
        _check_u("reference_time_ms", self.reference_time_ms, 64)
        objects = tuple(self.objects)
        if len(objects) > MAX_CPM_OBJECTS:
            raise TooManyObjects(f"{len(objects)} objects, at most {MAX_CPM_OBJECTS} allowed")
        object.__setattr__(self, "objects", objects)


def encode_cam(msg: CamMessage) -> bytes:
    return _CAM.pack(
        CAM_MAGIC,
        WIRE_VERSION,
        msg.station_id,
        msg.generation_time_ms,
        msg.position.latitude_e7,
        msg.position.longitude_e7,
        msg.speed_cms,
        msg.heading_ddeg,
    )


def decode_cam(data: bytes) -> CamMessage:
    if len(data) != CAM_LENGTH:
        raise MalformedMessage(f"CAM must be {CAM_LENGTH} bytes, got {len(data)}")
    magic, version, sid, gen, lat, lon, speed, heading = _CAM.unpack(data)
    if magic != CAM_MAGIC:
        raise MalformedMessage(f"bad CAM magic {magic!r}")
    if version != WIRE_VERSION:
        raise MalformedMessage(f"unsupported CAM version {version}")
    try:
        return CamMessage(sid, gen, GeoPosition(lat, lon), speed, heading)
    except (ValueError, TypeError) as exc:
        raise MalformedMessage(str(exc)) from exc


def encode_cpm(msg: CpmMessage) -> bytes:
    parts = [_CPM_HEADER.pack(CPM_MAGIC, WIRE_VERSION, msg.station_id, msg.reference_time_ms, len(msg.objects))]
    for obj in msg.objects:
        parts.append(
            _CPM_OBJECT.pack(
                obj.object_id,
                obj.position.latitude_e7,
                obj.position.longitude_e7,
                obj.speed_cms,
                obj.heading_ddeg,
                int(obj.object_class),
                bytes(6),
            )
        )
    return b"".join(parts)


def decode_cpm(data: bytes) -> CpmMessage:
    if len(data) < CPM_HEADER_LENGTH:
        raise MalformedMessage(f"CPM shorter than its {CPM_HEADER_LENGTH}-byte header")
    magic, version, sid, ref, count = _CPM_HEADER.unpack_from(data)
    if magic != CPM_MAGIC:
        raise MalformedMessage(f"bad CPM magic {magic!r}")
    if version != WIRE_VERSION:
        raise MalformedMessage(f"unsupported CPM version {version}")
    expected = CPM_HEADER_LENGTH + CPM_OBJECT_LENGTH * count
    if len(data) != expected:
        raise MalformedMessage(f"CPM with {count} objects must be {expected} bytes, got {len(data)}")
    objects = []
    try:
        for i in range(count):
            oid, lat, lon, speed, heading, cls, reserved = _CPM_OBJECT.unpack_from(
                data, CPM_HEADER_LENGTH + i * CPM_OBJECT_LENGTH
            )
            if reserved != bytes(6):
                raise MalformedMessage(f"object {i}: reserved bytes not zero")
            objects.append(PerceivedObject(oid, GeoPosition(lat, lon), speed, heading, cls))
        return CpmMessage(sid, ref, tuple(objects))
    except MalformedMessage:
        raise
    except (ValueError, TypeError) as exc:
        raise MalformedMessage(str(exc)) from exc


def build_cpm(objects, rsu: int, now_ms: int) -> CpmMessage:
    """Wrap a fused object list into a CPM sent by roadside station ``rsu``."""
    objects = tuple(objects)
    if len(objects) > MAX_CPM_OBJECTS:
        raise TooManyObjects(f"{len(objects)} objects, at most {MAX_CPM_OBJECTS} allowed")
    return CpmMessage(rsu, now_ms, objects)
