"""
Localization xApp: subscribe through the RIC, turn every SRS indication into
a position estimate, smooth it, and record it. Also hosts the offline twin of
the same per-snapshot path and the error evaluation.
"""

from __future__ import annotations

import csv
import logging
import select
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SRS_POSITIONING_FUNCTION_ID
from .geometry import Geometry
from .model import ModelBundle, load_params
from .preprocess import PreprocessConfig, StreamingOutlierFilter, normalize_truncate, process_cfr
from .synth import label_for
from .wire import (
    CodecError,
    ErrorIndication,
    EventTrigger,
    RicIndication,
    SubscriptionRequest,
    SubscriptionResponse,
    SubscriptionStatus,
    decode_message,
    encode_message,
    read_frame,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "timestamp_ns", "ue_id", "raw_x", "raw_y", "smooth_x", "smooth_y",
    "gt_x", "gt_y", "err_m", "latency_us",
]
REPORT_COLUMNS = ["group", "n", "p10", "p50", "p90", "mean"]


class XAppError(RuntimeError):
    code = "XAPP_ERROR"


class SubscriptionRejected(XAppError):
    code = "SUBSCRIPTION_REJECTED"


class ModelMismatch(XAppError):
    code = "MODEL_MISMATCH"


class ConnectionLost(XAppError):
    code = "CONNECTION_LOST"


class NoGroundTruth(ValueError):
    code = "NO_GROUND_TRUTH"


@dataclass
class PipelineConfig:
    model_path: Path
    geometry_path: Path
    window: int = 5
    out_csv: Path | None = None
    ric: tuple[str, int] = ("127.0.0.1", 36422)
    request_id: int = 1
    preprocess: PreprocessConfig | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("moving-average window must be >= 1")


@dataclass
class PredictionRecord:
    timestamp_ns: int
    ue_id: int
    raw: np.ndarray  # (2,)
    smooth: np.ndarray  # (2,)
    ground_truth: np.ndarray | None = None  # (2,)
    latency_us: float = 0.0

    def error(self, use: str = "smooth") -> float | None:
        if self.ground_truth is None:
            return None
        z = self.smooth if use == "smooth" else self.raw
        return float(np.linalg.norm(z - self.ground_truth))

    def row(self) -> list[str]:
        gt = self.ground_truth
        err = self.error()
        return [
            str(self.timestamp_ns), str(self.ue_id),
            repr(float(self.raw[0])), repr(float(self.raw[1])),
            repr(float(self.smooth[0])), repr(float(self.smooth[1])),
            "" if gt is None else repr(float(gt[0])),
            "" if gt is None else repr(float(gt[1])),
            "" if err is None else repr(err),
            repr(float(self.latency_us)),
        ]


def moving_average(history, window: int) -> np.ndarray:
    """Component-wise mean of the most recent min(window, len(history)) estimates."""
    if window < 1:
        raise ValueError("window must be >= 1")
    recent = np.asarray(list(history)[-window:], dtype=float)
    if len(recent) == 0:
        raise ValueError("history is empty")
    return recent.mean(axis=0)


class Localizer:
    """Per-snapshot inference path shared by the online xApp and offline runs."""

    def __init__(self, bundle: ModelBundle, geometry: Geometry, config: PreprocessConfig | None = None,
                 window: int = 5):
        if window < 1:
            raise ValueError("moving-average window must be >= 1")
        if bundle.network.num_trps != geometry.num_trps:
            raise ModelMismatch(f"model expects M={bundle.network.num_trps}, geometry has M={geometry.num_trps}")
        self.bundle = bundle
        self.geometry = geometry
        self.config = PreprocessConfig(**{**(config or PreprocessConfig()).to_dict(), "taps": bundle.taps})
        self.window = window
        self._filters: dict[int, StreamingOutlierFilter] = {}
        self._history: dict[int, deque] = {}
        self.skipped = 0

    def check_layout(self, trps_per_ru, n_fft: int):
        if list(trps_per_ru) != list(self.geometry.trps_per_ru):
            raise ModelMismatch(f"indication carries TRPs {list(trps_per_ru)}, geometry has {self.geometry.trps_per_ru}")
        if self.bundle.n_fft and n_fft != self.bundle.n_fft:
            raise ModelMismatch(f"indication N_fft={n_fft}, model trained on N_fft={self.bundle.n_fft}")
        if n_fft < self.bundle.taps:
            raise ModelMismatch(f"N_fft={n_fft} shorter than model input C={self.bundle.taps}")

    def process(self, ue_id: int, timestamp_ns: int, cfr, ground_truth=None,
                started_ns: int | None = None) -> PredictionRecord | None:
        """One snapshot in, one record out (or None when the snapshot is rejected)."""
        started_ns = time.perf_counter_ns() if started_ns is None else started_ns
        cfr = np.asarray(cfr)
        if cfr.shape[0] != self.geometry.num_trps:
            raise ModelMismatch(f"indication carries M={cfr.shape[0]}, model expects M={self.geometry.num_trps}")
        proc = process_cfr(cfr, self.geometry, self.config, with_labels=False)
        filt = self._filters.setdefault(
            ue_id, StreamingOutlierFilter(self.config.outlier_jump, self.config.outlier_window)
        )
        if not filt.accept(proc.ref_peaks):
            self.skipped += 1
            log.info("skip ts=%d ue=%d: reference peak jump %s", timestamp_ns, ue_id, proc.ref_peaks.tolist())
            return None
        if proc.window is None:
            self.skipped += 1
            log.info("skip ts=%d ue=%d: no detectable reference peak", timestamp_ns, ue_id)
            return None
        x = normalize_truncate(proc.window, self.bundle.alpha, self.config.taps)
        raw = self.bundle.network.forward(x)
        hist = self._history.setdefault(ue_id, deque(maxlen=self.window))
        hist.append(raw)
        smooth = moving_average(hist, self.window)
        gt = None
        if ground_truth is not None and np.all(np.isfinite(ground_truth[:2])):
            gt = np.asarray(ground_truth[:2], dtype=float)
        latency = (time.perf_counter_ns() - started_ns) / 1e3
        return PredictionRecord(int(timestamp_ns), int(ue_id), raw, smooth, gt, latency)


def offline_predictions(dataset, bundle: ModelBundle, geometry: Geometry, config: PreprocessConfig | None = None,
                        window: int = 5, ue_id: int = 1) -> list[PredictionRecord]:
    """Batch run over a dataset file through the same per-snapshot path as the xApp."""
    loc = Localizer(bundle, geometry, config, window)
    loc.check_layout(dataset.trps_per_ru, dataset.n_fft)
    gt = dataset.ground_truth() if dataset.has_ground_truth else None
    out = []
    for i in range(len(dataset)):
        snap = dataset[i]
        rec = loc.process(ue_id, snap.timestamp_ns, snap.cfr, None if gt is None else gt[i])
        if rec is not None:
            out.append(rec)
    return out


class CsvSink:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(CSV_COLUMNS)

    def write(self, rec: PredictionRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


def write_predictions(records, path):
    sink = CsvSink(path)
    try:
        for r in records:
            sink.write(r)
    finally:
        sink.close()


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            gt = None
            if row["gt_x"] != "":
                gt = np.array([float(row["gt_x"]), float(row["gt_y"])])
            out.append(PredictionRecord(
                int(row["timestamp_ns"]), int(row["ue_id"]),
                np.array([float(row["raw_x"]), float(row["raw_y"])]),
                np.array([float(row["smooth_x"]), float(row["smooth_y"])]),
                gt, float(row["latency_us"]),
            ))
    return out


class LocalizationXApp:
    """Online consumer: one subscription, one reader, records in sequence order."""

    def __init__(self, bundle: ModelBundle, geometry: Geometry, ric: tuple[str, int], window: int = 5,
                 request_id: int = 1, preprocess: PreprocessConfig | None = None, truth=None):
        self.localizer = Localizer(bundle, geometry, preprocess, window)
        self.ric = ric
        self.request_id = request_id
        self.truth = truth or {}
        self.sock: socket.socket | None = None
        self.received = 0
        self.last_sequence = -1
        self.gaps = 0
        self.stop = threading.Event()
        self.expected: int | None = None

    @classmethod
    def from_config(cls, config: PipelineConfig, truth=None) -> LocalizationXApp:
        bundle = load_params(config.model_path, expect_taps=config.preprocess.taps if config.preprocess else None)
        return cls(bundle, Geometry.load(config.geometry_path), config.ric, config.window,
                   config.request_id, config.preprocess, truth)

    def subscribe(self, timeout: float = 5.0):
        self.sock = socket.create_connection(self.ric, timeout=timeout)
        self.sock.sendall(encode_message(
            SubscriptionRequest(self.request_id, SRS_POSITIONING_FUNCTION_ID, EventTrigger.ON_SRS_INDICATION)
        ))
        while True:
            msg = decode_message(read_frame(self.sock))
            if isinstance(msg, SubscriptionResponse) and msg.request_id == self.request_id:
                break
            if isinstance(msg, ErrorIndication):
                raise SubscriptionRejected(f"{msg.cause.name}: {msg.text}")
        self.sock.settimeout(None)
        if msg.status is not SubscriptionStatus.ACCEPTED:
            self.close()
            raise SubscriptionRejected(f"request {self.request_id} rejected: {msg.status.name}")
        log.info("xapp subscribed request_id=%d at %s:%d", self.request_id, *self.ric)

    def _done(self) -> bool:
        return self.stop.is_set() or (self.expected is not None and self.received >= self.expected)

    def records(self, poll_s: float = 0.05):
        """Yield one record per accepted indication until stopped."""
        if self.sock is None:
            self.subscribe()
        while not self._done():
            ready, _, _ = select.select([self.sock], [], [], poll_s)
            if not ready:
                continue
            try:
                frame = read_frame(self.sock)
            except (OSError, ConnectionError) as exc:
                if self._done():
                    return
                raise ConnectionLost(f"RIC connection lost: {exc}") from None
            started = time.perf_counter_ns()
            try:
                msg = decode_message(frame)
            except CodecError as exc:
                log.warning("undecodable frame dropped: %s (%s)", exc, exc.code)
                continue
            if not isinstance(msg, RicIndication):
                log.info("xapp ignoring %s", type(msg).__name__)
                continue
            self.received += 1
            if msg.sequence <= self.last_sequence:
                log.warning("out-of-order sequence %d after %d", msg.sequence, self.last_sequence)
            elif msg.sequence != self.last_sequence + 1:
                self.gaps += msg.sequence - self.last_sequence - 1
            self.last_sequence = msg.sequence
            srs = msg.payload
            self.localizer.check_layout([len(ru.trp_ids) for ru in srs.rus], srs.n_fft)
            rec = self.localizer.process(srs.ue_id, srs.timestamp_ns, srs.cfr_matrix(),
                                         self.truth.get(srs.timestamp_ns), started)
            if rec is not None:
                yield rec

    def run(self, out_csv=None) -> list[PredictionRecord]:
        sink = CsvSink(out_csv) if out_csv else None
        out = []
        try:
            for rec in self.records():
                out.append(rec)
                if sink:
                    sink.write(rec)
        finally:
            if sink:
                sink.close()
        return out

    def close(self):
        self.stop.set()
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def run_pipeline(config: PipelineConfig, truth=None):
    """Stream of records from a live RIC (see :class:`LocalizationXApp`)."""
    app = LocalizationXApp.from_config(config, truth)
    sink = CsvSink(config.out_csv) if config.out_csv else None
    try:
        for rec in app.records():
            if sink:
                sink.write(rec)
            yield rec
    finally:
        if sink:
            sink.close()
        app.close()


def truth_table(dataset) -> dict[int, np.ndarray]:
    """timestamp_ns -> ground-truth position, for joining live records."""
    if not dataset.has_ground_truth:
        return {}
    gt = dataset.ground_truth()
    return {int(t): gt[i] for i, t in enumerate(dataset.timestamps_ns)}


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass
class ErrorStats:
    group: str
    n: int
    p10: float
    p50: float
    p90: float
    mean: float


def error_stats(group: str, errors) -> ErrorStats:
    """Percentiles by linear interpolation at rank (n - 1) * p / 100."""
    e = np.asarray(errors, dtype=float)
    p10, p50, p90 = np.percentile(e, [10, 50, 90])
    return ErrorStats(group, len(e), float(p10), float(p50), float(p90), float(e.mean()))


def evaluate(records, grouping: str = "testpoint", use: str = "smooth") -> list[ErrorStats]:
    """Error statistics per test point (A..P, anything else 'moving') or globally."""
    if grouping not in ("testpoint", "global"):
        raise ValueError(f"unknown grouping {grouping!r}")
    groups: dict[str, list[float]] = {}
    for rec in records:
        err = rec.error(use)
        if err is None:
            continue
        key = "all" if grouping == "global" else (label_for(rec.ground_truth) or "moving")
        groups.setdefault(key, []).append(err)
    if not groups:
        raise NoGroundTruth("no record carries ground truth")
    order = sorted(groups, key=lambda g: (len(g) > 1, g))
    return [error_stats(g, groups[g]) for g in order]


def format_report(stats: list[ErrorStats]) -> str:
    lines = [f"{'group':<8}{'n':>6}{'p10':>9}{'p50':>9}{'p90':>9}{'mean':>9}"]
    for s in stats:
        lines.append(f"{s.group:<8}{s.n:>6}{s.p10:>9.3f}{s.p50:>9.3f}{s.p90:>9.3f}{s.mean:>9.3f}")
    return "\n".join(lines)


def write_report_csv(stats: list[ErrorStats], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for s in stats:
            w.writerow([s.group, s.n, repr(s.p10), repr(s.p50), repr(s.p90), repr(s.mean)])
