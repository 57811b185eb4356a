from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsu_orchsim.v2x_messages import (
    CAM_LENGTH,
    CPM_HEADER_LENGTH,
    CPM_OBJECT_LENGTH,
    MAX_CPM_OBJECTS,
    CamMessage,
    CpmMessage,
    GeoPosition,
    MalformedMessage,
    ObjectClass,
    PerceivedObject,
    TooManyObjects,
    build_cpm,
    decode_cam,
    decode_cpm,
    encode_cam,
    encode_cpm,
)


def le(value: int, size: int, signed: bool = False) -> bytes:
    return value.to_bytes(size, "little", signed=signed)


def cam_oracle(m: CamMessage) -> bytes:
    # written field by field, independent of the struct-based encoder
    return (
        b"CA" + b"\x01" + le(m.station_id, 4) + le(m.generation_time_ms, 8)
        + le(m.position.latitude_e7, 4, True) + le(m.position.longitude_e7, 4, True)
        + le(m.speed_cms, 2) + le(m.heading_ddeg, 2)
    )


def cpm_oracle(m: CpmMessage) -> bytes:
    out = b"CP" + b"\x01" + le(m.station_id, 4) + le(m.reference_time_ms, 8) + le(len(m.objects), 1)
    for o in m.objects:
        out += (
            le(o.object_id, 2) + le(o.position.latitude_e7, 4, True) + le(o.position.longitude_e7, 4, True)
            + le(o.speed_cms, 2) + le(o.heading_ddeg, 2) + le(int(o.object_class), 1) + bytes(6)
        )
    return out


positions = st.builds(
    GeoPosition,
    st.integers(-900_000_000, 900_000_000),
    st.integers(-1_800_000_000, 1_800_000_000),
)
cams = st.builds(
    CamMessage,
    st.integers(1, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    positions,
    st.integers(0, 16382),
    st.integers(0, 3599),
)
objects = st.builds(
    PerceivedObject,
    st.integers(0, 2**16 - 1),
    positions,
    st.integers(0, 16382),
    st.integers(0, 3599),
    st.sampled_from(list(ObjectClass)),
)
cpms = st.builds(
    CpmMessage,
    st.integers(1, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    st.lists(objects, max_size=MAX_CPM_OBJECTS).map(tuple),
)


def test_zero_cam_layout():
    data = encode_cam(CamMessage(1, 0, GeoPosition(0, 0)))
    assert len(data) == CAM_LENGTH == 27
    assert data[:3] == bytes([0x43, 0x41, 0x01])
    assert data[3:7] == bytes([1, 0, 0, 0])
    assert data[7:] == bytes(20)


def test_station_id_little_endian():
    data = encode_cam(CamMessage(0x01020304, 5, GeoPosition(1, -1), 7, 9))
    assert data[3:7] == bytes([0x04, 0x03, 0x02, 0x01])


def test_empty_cpm_is_header_only():
    data = encode_cpm(CpmMessage(9, 5, ()))
    assert len(data) == CPM_HEADER_LENGTH == 16
    assert data[:3] == b"CP\x01"
    assert data[-1] == 0


@settings(max_examples=1000, deadline=None)
@given(cams)
def test_cam_roundtrip_and_layout(m):
    data = encode_cam(m)
    assert data == cam_oracle(m)
    assert decode_cam(data) == m


@settings(max_examples=1000, deadline=None)
@given(cpms)
def test_cpm_roundtrip_and_layout(m):
    data = encode_cpm(m)
    assert len(data) == CPM_HEADER_LENGTH + CPM_OBJECT_LENGTH * len(m.objects)
    assert data == cpm_oracle(m)
    assert decode_cpm(data) == m


def test_encoding_is_deterministic():
    m = CamMessage(42, 1_700_000_000_000, GeoPosition.from_degrees(50.787, 6.046), 1389, 1800)
    assert encode_cam(m) == encode_cam(CamMessage(42, 1_700_000_000_000, GeoPosition.from_degrees(50.787, 6.046), 1389, 1800))


@pytest.mark.parametrize("data", [b"", b"CA\x01", bytes(27), b"CP" + bytes(25)])
def test_decode_cam_rejects_garbage(data):
    with pytest.raises(MalformedMessage):
        decode_cam(data)


def test_heading_past_bound_rejected():
    data = bytearray(encode_cam(CamMessage(3, 10, GeoPosition(0, 0), 0, 100)))
    data[25:27] = le(3600, 2)
    with pytest.raises(MalformedMessage):
        decode_cam(bytes(data))


def test_latitude_past_bound_rejected():
    data = bytearray(encode_cam(CamMessage(3, 10, GeoPosition(0, 0))))
    data[15:19] = le(900_000_001, 4, True)
    with pytest.raises(MalformedMessage):
        decode_cam(bytes(data))


def test_zero_station_id_on_wire_rejected():
    data = bytearray(encode_cam(CamMessage(3, 10, GeoPosition(0, 0))))
    data[3:7] = bytes(4)
    with pytest.raises(MalformedMessage):
        decode_cam(bytes(data))


@pytest.mark.parametrize("index", [0, 1, 2])
def test_any_header_byte_corruption_rejected(index):
    cam = encode_cam(CamMessage(3, 10, GeoPosition(0, 0)))
    cpm = encode_cpm(CpmMessage(3, 10, (PerceivedObject(1, GeoPosition(0, 0)),)))
    for original in (cam, cpm):
        decode = decode_cam if original is cam else decode_cpm
        for value in range(256):
            if value == original[index]:
                continue
            data = bytearray(original)
            data[index] = value
            with pytest.raises(MalformedMessage):
                decode(bytes(data))


def test_cpm_reserved_bytes_and_class_checked():
    data = bytearray(encode_cpm(CpmMessage(3, 10, (PerceivedObject(1, GeoPosition(0, 0)),))))
    bad_reserved = bytearray(data)
    bad_reserved[-1] = 1
    with pytest.raises(MalformedMessage):
        decode_cpm(bytes(bad_reserved))
    bad_class = bytearray(data)
    bad_class[CPM_HEADER_LENGTH + 14] = 9
    with pytest.raises(MalformedMessage):
        decode_cpm(bytes(bad_class))


def test_cpm_count_must_match_length():
    data = encode_cpm(CpmMessage(3, 10, (PerceivedObject(1, GeoPosition(0, 0)),)))
    with pytest.raises(MalformedMessage):
        decode_cpm(data[:-1])
    with pytest.raises(MalformedMessage):
        decode_cpm(data + bytes(CPM_OBJECT_LENGTH))


def test_invariants_enforced_at_construction():
    with pytest.raises(ValueError):
        CamMessage(0, 0, GeoPosition(0, 0))
    with pytest.raises(ValueError):
        CamMessage(2**32, 0, GeoPosition(0, 0))
    with pytest.raises(ValueError):
        CamMessage(1, 0, GeoPosition(0, 0), 16383)
    with pytest.raises(ValueError):
        PerceivedObject(1, GeoPosition(0, 0), 0, 3600)
    with pytest.raises(ValueError):
        GeoPosition(0, 1_800_000_001)


def test_build_cpm():
    assert build_cpm([], 9, 5) == CpmMessage(9, 5, ())
    obj = PerceivedObject(4, GeoPosition(10, 20), 30, 40, ObjectClass.CYCLIST)
    assert build_cpm([obj], 9, 5).objects[0] == obj
    many = [PerceivedObject(i, GeoPosition(0, 0)) for i in range(MAX_CPM_OBJECTS + 1)]
    assert len(build_cpm(many[:-1], 9, 5).objects) == 255
    with pytest.raises(TooManyObjects):
        build_cpm(many, 9, 5)
    with pytest.raises(TooManyObjects):
        CpmMessage(9, 5, tuple(many))
