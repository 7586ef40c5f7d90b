import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comap.geometry import CameraIntrinsics, Pose
from comap.params import FULL_KEYFRAME_BYTES
from comap.wire import (
    DecodeError,
    EndAckMsg,
    ErrorMsg,
    FrameRecord,
    KeyframeUploadMsg,
    OverlapQueryMsg,
    OverlapResponseMsg,
    PointRecord,
    RegisterAckMsg,
    SessionEndMsg,
    SessionRegisterMsg,
    SharedMapRequestMsg,
    SharedMapResponseMsg,
    TrafficStats,
    UpdateCheckMsg,
    UpdateStatusMsg,
    UploadAckMsg,
    decode,
    encode,
    frame_length,
    meter,
)


def rand_pose(rng):
    return Pose(*rng.uniform(-100, 100, 3), *rng.uniform(-math.pi, math.pi, 3))


def rand_points(rng, n):
    return [
        PointRecord(
            id=int(rng.integers(0, 1 << 50)),
            position=rng.uniform(-50, 50, 3).astype(np.float32),
            descriptor=rng.bytes(32),
            observation_count=int(rng.integers(0, 1 << 16)),
        )
        for _ in range(n)
    ]


def rand_message(rng):
    kind = rng.integers(0, 10)
    if kind == 0:
        return OverlapQueryMsg(int(rng.integers(0, 1 << 32)), int(rng.integers(0, 1 << 32)),
                               int(rng.integers(0, 1 << 16)), rand_pose(rng))
    if kind == 1:
        return SharedMapRequestMsg(int(rng.integers(0, 1 << 32)), int(rng.integers(0, 1 << 32)),
                                   int(rng.integers(0, 1 << 16)), rand_pose(rng))
    if kind == 2:
        return OverlapResponseMsg(int(rng.integers(0, 2)), float(rng.uniform(0.1, 5)),
                                  rng.uniform(-50, 50, (int(rng.integers(0, 40)), 3)))
    if kind == 3:
        return KeyframeUploadMsg(int(rng.integers(0, 1 << 32)), int(rng.integers(0, 1 << 32)),
                                 rand_pose(rng), float(rng.uniform(0.3, 3.0)),
                                 rand_points(rng, int(rng.integers(0, 20))))
    if kind == 4:
        frames = [
            FrameRecord(int(rng.integers(0, 1 << 40)), int(rng.integers(0, 1 << 32)),
                        int(rng.integers(0, 1 << 32)), rand_pose(rng),
                        float(rng.uniform(0.3, 3.0)),
                        rng.integers(0, 1 << 40, size=int(rng.integers(0, 15))))
            for _ in range(int(rng.integers(0, 5)))
        ]
        return SharedMapResponseMsg(frames, rand_points(rng, int(rng.integers(0, 25))))
    if kind == 5:
        return SessionRegisterMsg(int(rng.integers(0, 1 << 32)),
                                  CameraIntrinsics(*rng.uniform(10, 2000, 4)))
    if kind == 6:
        return SessionEndMsg(int(rng.integers(0, 1 << 32)))
    if kind == 7:
        kfs = [KeyframeUploadMsg(1, i, rand_pose(rng), 1.4, rand_points(rng, int(rng.integers(0, 8))))
               for i in range(int(rng.integers(1, 5)))]
        return UpdateCheckMsg(int(rng.integers(0, 1 << 32)), kfs)
    if kind == 8:
        return UpdateStatusMsg(int(rng.integers(0, 2)),
                               rng.integers(0, 1 << 40, size=int(rng.integers(0, 30))),
                               *(int(rng.integers(0, 1 << 20)) for _ in range(4)))
    return ErrorMsg(int(rng.integers(0, 1 << 16)), "p" * int(rng.integers(0, 60)))


class TestQueryFrameContract:
    def test_query_frame_is_exactly_64_bytes(self):
        msg = OverlapQueryMsg(1, 1, 300, Pose(0, 0, 0))
        raw = encode(msg)
        assert len(raw) == 64
        assert raw[0] == 0x51 and raw[1] == 0x4D

    def test_shared_request_also_64_bytes(self, rng):
        for _ in range(50):
            msg = SharedMapRequestMsg(int(rng.integers(1 << 32)), int(rng.integers(1 << 32)),
                                      int(rng.integers(1 << 16)), rand_pose(rng))
            assert len(encode(msg)) == 64

    def test_size_independent_of_field_values(self, rng):
        for _ in range(100):
            msg = OverlapQueryMsg(int(rng.integers(1 << 32)), int(rng.integers(1 << 32)),
                                  int(rng.integers(1 << 16)), rand_pose(rng))
            assert len(encode(msg)) == 64

    def test_golden_vector(self):
        msg = OverlapQueryMsg(1, 1, 300, Pose(0, 0, 0))
        want = (
            struct.pack("<HBB", 0x4D51, 1, 1)
            + struct.pack("<IIH", 1, 1, 300)
            + b"\x00" * 48
            + b"\x00\x00"
        )
        assert encode(msg) == want

    def test_decode_roundtrip_distinguishes_type_tag(self):
        q = OverlapQueryMsg(7, 9, 10, Pose(1, 2, 3))
        s = SharedMapRequestMsg(7, 9, 10, Pose(1, 2, 3))
        assert isinstance(decode(encode(q)), OverlapQueryMsg)
        assert isinstance(decode(encode(s)), SharedMapRequestMsg)
        assert encode(q)[3] != encode(s)[3]


class TestRoundTrip:
    def test_roundtrip_randomized_all_types(self, rng):
        for _ in range(10_000):
            msg = rand_message(rng)
            assert decode(encode(msg)) == msg

    def test_ack_types(self):
        for msg in (UploadAckMsg(12), RegisterAckMsg(5), EndAckMsg(3, 77, 0.125, True)):
            assert decode(encode(msg)) == msg

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**16 - 1),
           st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(-1000, 1000))
    @settings(max_examples=200)
    def test_query_roundtrip_hypothesis(self, c, k, n, x, y, z):
        msg = OverlapQueryMsg(c, k, n, Pose(x, y, z))
        assert decode(encode(msg)) == msg


class TestDecodeErrors:
    def test_truncated_query_reports_offset(self):
        raw = encode(OverlapQueryMsg(1, 1, 300, Pose(0, 0, 0)))[:63]
        with pytest.raises(DecodeError) as err:
            decode(raw)
        assert err.value.offset == 63

    def test_bad_magic(self):
        raw = bytearray(encode(SessionEndMsg(1)))
        raw[0] = 0xFF
        with pytest.raises(DecodeError) as err:
            decode(bytes(raw))
        assert err.value.offset == 0

    def test_bad_version(self):
        raw = bytearray(encode(SessionEndMsg(1)))
        raw[2] = 9
        with pytest.raises(DecodeError) as err:
            decode(bytes(raw))
        assert err.value.offset == 2

    def test_unknown_type(self):
        raw = struct.pack("<HBBI", 0x4D51, 1, 200, 0)
        with pytest.raises(DecodeError):
            decode(raw)

    def test_trailing_bytes_rejected(self):
        raw = encode(SessionEndMsg(1)) + b"\x00"
        with pytest.raises(DecodeError):
            decode(raw)

    def test_frame_length_helper(self):
        assert frame_length(encode(OverlapQueryMsg(1, 1, 1, Pose(0, 0, 0)))[:4]) == 64
        raw = encode(SessionEndMsg(1))
        assert frame_length(raw[:8]) == len(raw)


class TestMetering:
    def test_query_ratio_against_full_keyframe(self):
        stats = TrafficStats()
        stats.note_keyframe()
        meter(stats, OverlapQueryMsg(1, 1, 300, Pose(0, 0, 0)), "upload")
        # 64 / 163840 = 0.0390625%
        assert stats.ratio_vs_full_keyframe("query") == pytest.approx(64 / FULL_KEYFRAME_BYTES)
        assert stats.ratio_vs_full_keyframe("query") == pytest.approx(0.000390625)

    def test_zero_messages_zero_counters(self):
        stats = TrafficStats()
        assert stats.total_upload == 0
        assert stats.total_download == 0
        assert stats.per_keyframe_kb() == 0.0

    def test_totals_are_exact_sums(self, rng):
        stats = TrafficStats()
        sent = recv = 0
        for _ in range(300):
            msg = rand_message(rng)
            raw = encode(msg)
            if rng.integers(0, 2):
                meter(stats, msg, "upload", size=len(raw))
                sent += len(raw)
            else:
                meter(stats, msg, "download", size=len(raw))
                recv += len(raw)
        assert stats.total_upload == sent
        assert stats.total_download == recv

    def test_vanilla_session_upload_matches_encoded_sizes(self, rng):
        stats = TrafficStats()
        total = 0
        for i in range(40):
            kf = KeyframeUploadMsg(1, i, rand_pose(rng), 1.4, rand_points(rng, 12))
            raw = encode(kf)
            total += len(raw)
            stats.note_keyframe()
            meter(stats, kf, "upload", size=len(raw))
        assert stats.upload_bytes["keyframe_upload"] == total
        assert stats.per_keyframe_kb("keyframe_upload") == pytest.approx(total / 40 / 1024)

    def test_direction_validated(self):
        with pytest.raises(ValueError):
            meter(TrafficStats(), SessionEndMsg(1), "sideways")

    def test_response_size_formula(self, rng):
        # 8-byte header + status byte + f32 r + u32 count + 12 bytes per sample.
        for n in (0, 1, 17):
            msg = OverlapResponseMsg(0, 1.8, rng.uniform(-5, 5, (n, 3)))
            assert len(encode(msg)) == 8 + 9 + 12 * n
