"""
Seeded fuzzing of the message decoder.

Inputs are drawn from three families: raw random bytes, a valid header in
front of a random body, and bit-flipped / truncated / extended encodings of
valid messages. Any exception other than :class:`CodecError` counts as a crash.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import SRS_POSITIONING_FUNCTION_ID
from .wire import (
    HEADER,
    MAGIC,
    VERSION,
    CodecError,
    E2SetupRequest,
    E2SetupResponse,
    ErrorCause,
    ErrorIndication,
    RanFunction,
    RicIndication,
    RuReport,
    SrsIndication,
    SubscriptionRequest,
    SubscriptionResponse,
    SubscriptionStatus,
    decode_message,
    encode_message,
)


@dataclass
class FuzzReport:
    total: int = 0
    decoded: int = 0
    rejected: Counter = field(default_factory=Counter)
    crashes: list[tuple[bytes, str]] = field(default_factory=list)


def seed_messages() -> list:
    rng = np.random.default_rng(0)
    cfr = (rng.standard_normal((3, 8)) + 1j * rng.standard_normal((3, 8))).astype(np.complex64)
    srs = SrsIndication(7, 3, 5, 123456789, (
        RuReport(1, (1, 2), cfr[:2]),
        RuReport(2, (1,), cfr[2:]),
    ))
    return [
        E2SetupRequest(1, (RanFunction(SRS_POSITIONING_FUNCTION_ID, "SRS Positioning", 1), RanFunction(9, "x", 2))),
        E2SetupResponse((SRS_POSITIONING_FUNCTION_ID,)),
        SubscriptionRequest(1, SRS_POSITIONING_FUNCTION_ID, 1),
        SubscriptionResponse(1, SubscriptionStatus.ACCEPTED),
        RicIndication(1, 42, srs),
        ErrorIndication(3, ErrorCause.MALFORMED, "bad frame"),
    ]


def _mutate(frame: bytes, rng: np.random.Generator) -> bytes:
    buf = bytearray(frame)
    op = rng.integers(4)
    if op == 0:  # flip bits
        for _ in range(int(rng.integers(1, 4))):
            i = int(rng.integers(len(buf)))
            buf[i] ^= 1 << int(rng.integers(8))
    elif op == 1:  # truncate
        del buf[int(rng.integers(len(buf))):]
    elif op == 2:  # extend
        buf += rng.bytes(int(rng.integers(1, 16)))
    else:  # overwrite one byte, biased towards header and layout fields
        i = int(rng.integers(min(len(buf), 48)))
        buf[i] = int(rng.integers(256))
    return bytes(buf)


def fuzz_inputs(count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    frames = [encode_message(m) for m in seed_messages()]
    for _ in range(count):
        kind = rng.integers(3)
        if kind == 0:
            yield rng.bytes(int(rng.integers(0, 64)))
        elif kind == 1:
            body = rng.bytes(int(rng.integers(0, 48)))
            declared = len(body) if rng.random() < 0.7 else int(rng.integers(0, 1 << 32))
            yield HEADER.pack(MAGIC, VERSION, int(rng.integers(0, 8)), 0, declared) + body
        else:
            yield _mutate(frames[int(rng.integers(len(frames)))], rng)


def fuzz_decoder(count: int, seed: int = 0, keep_crashes: int = 10) -> FuzzReport:
    report = FuzzReport()
    for data in fuzz_inputs(count, seed):
        report.total += 1
        try:
            decode_message(data)
            report.decoded += 1
        except CodecError as exc:
            report.rejected[exc.code] += 1
        except Exception as exc:  # a crash: anything the codec did not anticipate
            if len(report.crashes) < keep_crashes:
                report.crashes.append((data, repr(exc)))
            else:
                report.crashes.append((b"", repr(exc)))
    return report
