"""
SRSD channel dataset files.

Layout (big-endian)::

    magic u32 0x53525344 ("SRSD"), version u8, K u8, M_k u8 x K, N_fft u32,
    subcarrier_spacing_hz f64, T u32, flags u8
    T snapshots, each:
        timestamp_ns u64, ground_truth 3 x f64 (NaN when absent)
        per TRP (RU order): [los u8], [tdoa f64], N_fft x (re f32, im f32)

flags: bit 0 ground truth present, bit 1 LoS flags present, bit 2 oracle
TDoA present. Snapshots have a fixed size, so reads are random access.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = 0x53525344
VERSION = 1

FLAG_GROUND_TRUTH = 0x1
FLAG_LOS = 0x2
FLAG_TDOA = 0x4

_PREFIX = struct.Struct(">IBB")
_SUFFIX = struct.Struct(">IdIB")


class DatasetError(ValueError):
    code = "DATASET_ERROR"


class BadDatasetMagic(DatasetError):
    code = "BAD_MAGIC"


class BadDimensions(DatasetError):
    code = "BAD_DIMENSIONS"


class NonMonotonicTimestamps(DatasetError):
    code = "NON_MONOTONIC_TIMESTAMPS"


@dataclass(eq=False)
class Snapshot:
    timestamp_ns: int
    cfr: np.ndarray  # (M, N_fft), big-endian complex64 as stored
    ground_truth: np.ndarray | None = None  # (3,)
    los: np.ndarray | None = None  # (M,) uint8
    tdoa: np.ndarray | None = None  # (M,) seconds


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def snapshot_dtype(num_trps: int, n_fft: int, flags: int) -> np.dtype:
    trp = []
    if flags & FLAG_LOS:
        trp.append(("los", "u1"))
    if flags & FLAG_TDOA:
        trp.append(("tdoa", ">f8"))
    trp.append(("cfr", ">c8", (n_fft,)))
    return np.dtype(
        [
            ("timestamp_ns", ">u8"),
            ("ground_truth", ">f8", (3,)),
            ("trp", np.dtype(trp), (num_trps,)),
        ]
    )


def _header_bytes(trps_per_ru, n_fft, spacing, count, flags) -> bytes:
    return (
        _PREFIX.pack(MAGIC, VERSION, len(trps_per_ru))
        + bytes(trps_per_ru)
        + _SUFFIX.pack(n_fft, spacing, count, flags)
    )


def _validate_layout(trps_per_ru, n_fft):
    if not 1 <= len(trps_per_ru) <= 255 or any(not 1 <= m <= 255 for m in trps_per_ru):
        raise BadDimensions(f"invalid TRPs per RU {list(trps_per_ru)}")
    if sum(trps_per_ru) > 255:
        raise BadDimensions("total TRP count exceeds 255")
    if not _is_pow2(n_fft):
        raise BadDimensions(f"N_fft={n_fft} is not a power of two")


class DatasetWriter:
    """Append-only writer; the snapshot count is patched into the header on close."""

    def __init__(self, path, trps_per_ru, n_fft: int, subcarrier_spacing_hz: float, flags: int):
        trps_per_ru = [int(m) for m in trps_per_ru]
        _validate_layout(trps_per_ru, n_fft)
        self.path = Path(path)
        self.trps_per_ru = trps_per_ru
        self.n_fft = n_fft
        self.spacing = float(subcarrier_spacing_hz)
        self.flags = flags
        self.dtype = snapshot_dtype(sum(trps_per_ru), n_fft, flags)
        self.count = 0
        self._last_ts = None
        self._fh = open(self.path, "wb")
        self._fh.write(_header_bytes(trps_per_ru, n_fft, self.spacing, 0, flags))

    def append(self, snap: Snapshot):
        if self._last_ts is not None and snap.timestamp_ns <= self._last_ts:
            raise NonMonotonicTimestamps(
                f"timestamp {snap.timestamp_ns} after {self._last_ts}"
            )
        rec = np.zeros((), dtype=self.dtype)
        rec["timestamp_ns"] = snap.timestamp_ns
        rec["ground_truth"] = np.full(3, np.nan) if snap.ground_truth is None else snap.ground_truth
        trp = rec["trp"]
        if self.flags & FLAG_LOS:
            trp["los"] = snap.los
        if self.flags & FLAG_TDOA:
            trp["tdoa"] = snap.tdoa
        trp["cfr"] = snap.cfr
        self._fh.write(rec.tobytes())
        self._last_ts = snap.timestamp_ns
        self.count += 1

    def close(self):
        if self._fh.closed:
            return
        if self.count < 1:
            self._fh.close()
            raise BadDimensions("a dataset needs at least one snapshot")
        self._fh.seek(0)
        self._fh.write(
            _header_bytes(self.trps_per_ru, self.n_fft, self.spacing, self.count, self.flags)
        )
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


class SrsDataset:
    """Read-only handle on an SRSD file. Snapshots are paged in on access."""

    def __init__(self, path):
        self.path = Path(path)
        size = os.path.getsize(self.path)
        with open(self.path, "rb") as fh:
            head = fh.read(_PREFIX.size)
            if len(head) < _PREFIX.size:
                raise BadDimensions("file shorter than the dataset header")
            magic, version, k = _PREFIX.unpack(head)
            if magic != MAGIC:
                raise BadDatasetMagic(f"bad magic 0x{magic:08X}")
            if version != VERSION:
                raise BadDimensions(f"unsupported dataset version {version}")
            rest = fh.read(k + _SUFFIX.size)
        if len(rest) < k + _SUFFIX.size:
            raise BadDimensions("file shorter than the dataset header")
        self.trps_per_ru = list(rest[:k])
        self.n_fft, self.subcarrier_spacing_hz, self.num_snapshots, self.flags = (
            _SUFFIX.unpack(rest[k:])
        )
        _validate_layout(self.trps_per_ru, self.n_fft)
        if self.num_snapshots < 1:
            raise BadDimensions("T must be at least 1")
        self.header_size = _PREFIX.size + k + _SUFFIX.size
        self.dtype = snapshot_dtype(self.num_trps, self.n_fft, self.flags)
        expected = self.header_size + self.num_snapshots * self.dtype.itemsize
        if size != expected:
            raise BadDimensions(f"file holds {size} bytes, header implies {expected}")
        self._mm = np.memmap(
            self.path, dtype=self.dtype, mode="r", offset=self.header_size,
            shape=(self.num_snapshots,),
        )
        ts = np.asarray(self._mm["timestamp_ns"]).astype(np.uint64)
        if np.any(ts[1:] <= ts[:-1]):
            bad = int(np.flatnonzero(ts[1:] <= ts[:-1])[0]) + 1
            raise NonMonotonicTimestamps(f"snapshot {bad} does not advance the timestamp")
        self.timestamps_ns = ts

    @property
    def num_rus(self) -> int:
        return len(self.trps_per_ru)

    @property
    def num_trps(self) -> int:
        return sum(self.trps_per_ru)

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.flags & FLAG_GROUND_TRUTH)

    @property
    def has_los(self) -> bool:
        return bool(self.flags & FLAG_LOS)

    @property
    def has_tdoa(self) -> bool:
        return bool(self.flags & FLAG_TDOA)

    def __len__(self) -> int:
        return self.num_snapshots

    def __getitem__(self, i: int) -> Snapshot:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        rec = self._mm[i]
        trp = rec["trp"]
        return Snapshot(
            timestamp_ns=int(rec["timestamp_ns"]),
            cfr=np.array(trp["cfr"]),
            ground_truth=np.array(rec["ground_truth"], dtype=float) if self.has_ground_truth else None,
            los=np.array(trp["los"]) if self.has_los else None,
            tdoa=np.array(trp["tdoa"], dtype=float) if self.has_tdoa else None,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def raw_cfr_bytes(self, i: int) -> bytes:
        """Stored CFR bytes of snapshot i in TRP order (for fidelity checks)."""
        return np.ascontiguousarray(self._mm[i]["trp"]["cfr"]).tobytes()

    def ground_truth(self) -> np.ndarray:
        return np.array(self._mm["ground_truth"], dtype=float)

    def check_layout(self, trps_per_ru, n_fft=None):
        if list(trps_per_ru) != self.trps_per_ru or (n_fft is not None and n_fft != self.n_fft):
            raise BadDimensions(
                f"dataset layout {self.trps_per_ru}/N_fft={self.n_fft} does not match "
                f"{list(trps_per_ru)}/N_fft={n_fft}"
            )

    def close(self):
        self._mm = None


def load_dataset(path) -> SrsDataset:
    return SrsDataset(path)
