import socket
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2srs.fuzz import fuzz_decoder, seed_messages
from e2srs.wire import (
    HEADER,
    MAGIC,
    MAX_PAYLOAD,
    BadMagic,
    BadVersion,
    CodecError,
    E2SetupRequest,
    InvariantViolation,
    LengthMismatch,
    MsgType,
    RicIndication,
    RuReport,
    SrsIndication,
    SubscriptionRequest,
    Truncated,
    UnknownMsgType,
    decode_header,
    decode_message,
    decode_prefix,
    encode_message,
    peek_indication,
    read_message,
    send_message,
    srs_payload_size,
)

from golden import GOLDEN, load_vectors
from strategies import messages, random_message

VECTORS = Path(__file__).parent / "data" / "golden_vectors.txt"


def zero_indication(k=1, m=1, n=4):
    rus = tuple(RuReport(r, tuple(range(m)), np.zeros((m, n), np.complex64)) for r in range(k))
    return SrsIndication(0, 0, 0, 0, rus)


def test_subscription_request_layout():
    data = encode_message(SubscriptionRequest(1, 148, 1))
    magic, version, mtype, flags, length = HEADER.unpack(data[:12])
    assert (magic, version, mtype, flags, length) == (0x45324C53, 1, 3, 0, 7)
    assert data[12:] == bytes.fromhex("00000001009401")


def test_srs_payload_size_small_example():
    ind = RicIndication(0, 0, zero_indication())
    data = encode_message(ind)
    # 12 bytes of request_id/sequence precede the SRS payload
    assert len(data) - 12 - 12 == 55
    assert srs_payload_size([1], 4) == 55


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 6))
def test_srs_payload_size_formula(trps, log_n):
    n = 2 ** log_n
    rus = tuple(RuReport(k, tuple(range(m)), np.zeros((m, n), np.complex64)) for k, m in enumerate(trps))
    body = encode_message(RicIndication(1, 1, SrsIndication(1, 1, 1, 1, rus)))[12 + 12:]
    assert len(body) == 16 + sum(6 + m * (1 + 8 * n) for m in trps) == srs_payload_size(trps, n)


@pytest.mark.parametrize("name", list(GOLDEN))
def test_golden_vectors(name):
    vectors = load_vectors(VECTORS)
    assert encode_message(GOLDEN[name]) == vectors[name]
    assert decode_message(vectors[name]) == GOLDEN[name]


def test_golden_file_covers_every_message_type():
    types = {decode_header(v)[0] for v in load_vectors(VECTORS).values()}
    assert types == set(MsgType)


@settings(max_examples=300)
@given(messages)
def test_roundtrip(msg):
    data = encode_message(msg)
    assert decode_message(data) == msg
    assert encode_message(decode_message(data)) == data


@given(messages)
def test_encoding_is_deterministic(msg):
    assert encode_message(msg) == encode_message(msg)


@given(messages)
def test_header_length_matches_body(msg):
    data = encode_message(msg)
    _, length = decode_header(data)
    assert length == len(data) - 12


def test_bulk_random_roundtrip():
    rng = np.random.default_rng(99)
    for _ in range(2000):
        msg = random_message(rng)
        assert decode_message(encode_message(msg)) == msg


def test_truncated_payload():
    data = HEADER.pack(MAGIC, 1, MsgType.SUBSCRIPTION_REQUEST, 0, 100) + bytes(10)
    with pytest.raises(Truncated):
        decode_message(data)


def test_short_header_is_truncated():
    with pytest.raises(Truncated):
        decode_message(encode_message(SubscriptionRequest(1, 148))[:7])


def test_first_byte_flip_is_bad_magic():
    data = bytearray(encode_message(SubscriptionRequest(1, 148)))
    data[0] ^= 0xFF
    with pytest.raises(BadMagic):
        decode_message(bytes(data))


def test_bad_version():
    data = bytearray(encode_message(SubscriptionRequest(1, 148)))
    data[4] = 2
    with pytest.raises(BadVersion):
        decode_message(bytes(data))


def test_unknown_type():
    with pytest.raises(UnknownMsgType):
        decode_message(HEADER.pack(MAGIC, 1, 99, 0, 0))


def test_errors_are_distinguishable():
    codes = {cls.code for cls in (BadMagic, BadVersion, Truncated, LengthMismatch, UnknownMsgType)}
    assert len(codes) == 5
    assert all(issubclass(c, CodecError) for c in (BadMagic, BadVersion, Truncated, LengthMismatch, UnknownMsgType))


def test_trailing_bytes_rejected():
    data = encode_message(SubscriptionRequest(1, 148)) + b"\x00"
    with pytest.raises(LengthMismatch):
        decode_message(data)
    msg, used = decode_prefix(data)
    assert used == len(data) - 1 and msg == SubscriptionRequest(1, 148)


def test_body_shorter_than_layout():
    data = HEADER.pack(MAGIC, 1, MsgType.SUBSCRIPTION_REQUEST, 0, 5) + bytes(5)
    with pytest.raises(LengthMismatch):
        decode_message(data)


def test_srs_size_mismatch_rejected():
    good = encode_message(RicIndication(1, 0, zero_indication(2, 2, 8)))
    body = good[12:-8]
    with pytest.raises(LengthMismatch):
        decode_message(HEADER.pack(MAGIC, 1, MsgType.RIC_INDICATION, 0, len(body)) + body)
    body = good[12:] + bytes(8)
    with pytest.raises(LengthMismatch):
        decode_message(HEADER.pack(MAGIC, 1, MsgType.RIC_INDICATION, 0, len(body)) + body)


def test_oversized_declared_payload_rejected_before_allocation():
    with pytest.raises(LengthMismatch):
        decode_header(HEADER.pack(MAGIC, 1, MsgType.RIC_INDICATION, 0, MAX_PAYLOAD + 1))


def test_huge_n_fft_claim_does_not_allocate():
    # one RU claiming 255 TRPs of 2**30 samples inside a 40-byte body
    body = struct.pack(">IQ", 1, 0) + struct.pack(">IHBQB", 0, 0, 0, 0, 1) + struct.pack(">BBI", 0, 255, 2**30)
    with pytest.raises(LengthMismatch):
        decode_message(HEADER.pack(MAGIC, 1, MsgType.RIC_INDICATION, 0, len(body)) + body)


@pytest.mark.parametrize("kwargs", [
    dict(frame=1024), dict(slot=160), dict(ue_id=2**32), dict(timestamp_ns=-1),
])
def test_encode_rejects_out_of_range_fields(kwargs):
    ind = zero_indication()
    for k, v in kwargs.items():
        setattr(ind, k, v)
    with pytest.raises(InvariantViolation):
        encode_message(RicIndication(0, 0, ind))


def test_encode_rejects_non_power_of_two_n_fft():
    ind = SrsIndication(0, 0, 0, 0, (RuReport(0, (0,), np.zeros((1, 6), np.complex64)),))
    with pytest.raises(InvariantViolation):
        encode_message(RicIndication(0, 0, ind))


def test_encode_rejects_mixed_n_fft():
    ind = SrsIndication(0, 0, 0, 0, (
        RuReport(0, (0,), np.zeros((1, 4), np.complex64)),
        RuReport(1, (0,), np.zeros((1, 8), np.complex64)),
    ))
    with pytest.raises(InvariantViolation):
        encode_message(RicIndication(0, 0, ind))


def test_encode_rejects_empty_ru_list():
    with pytest.raises(InvariantViolation):
        encode_message(RicIndication(0, 0, SrsIndication(0, 0, 0, 0, ())))


def test_decoder_rejects_nonzero_flags():
    data = bytearray(encode_message(SubscriptionRequest(1, 148)))
    data[7] = 1
    with pytest.raises(InvariantViolation):
        decode_message(bytes(data))


def test_nan_samples_survive_bit_exactly():
    raw = bytes.fromhex("7fc00001ffc00002") * 4
    cfr = np.frombuffer(raw, dtype=">c8").reshape(1, 4)
    ind = RicIndication(1, 2, SrsIndication(1, 1, 1, 1, (RuReport(1, (1,), cfr),)))
    out = decode_message(encode_message(ind))
    assert out.payload.rus[0].cfr.tobytes() == raw


def test_peek_indication():
    frame = encode_message(RicIndication(77, 12345, zero_indication()))
    assert peek_indication(frame) == (77, 12345)
    with pytest.raises(UnknownMsgType):
        peek_indication(encode_message(SubscriptionRequest(1, 148)))


@given(st.binary(max_size=80))
def test_decoder_total_on_arbitrary_bytes(data):
    try:
        decode_message(data)
    except CodecError:
        pass


@given(st.sampled_from(seed_messages()), st.integers(0, 10_000), st.integers(0, 7))
def test_single_bit_flips_never_crash(msg, pos, bit):
    data = bytearray(encode_message(msg))
    data[pos % len(data)] ^= 1 << bit
    try:
        decode_message(bytes(data))
    except CodecError:
        pass


def test_fuzz_harness_smoke():
    report = fuzz_decoder(20_000, seed=3)
    assert report.crashes == []
    assert report.total == 20_000
    assert len(report.rejected) >= 5


def test_socket_transport_roundtrip():
    a, b = socket.socketpair()
    try:
        msgs = [E2SetupRequest(3, ()), RicIndication(1, 2, zero_indication(2, 3, 16)), SubscriptionRequest(9, 148)]
        for m in msgs:
            send_message(a, m)
        assert [read_message(b) for _ in msgs] == msgs
        a.close()
        with pytest.raises(ConnectionError):
            read_message(b)
    finally:
        b.close()
