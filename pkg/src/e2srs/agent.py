"""
E2 agent emulator: registers with the RIC, waits for a subscription, then
replays dataset snapshots as RIC indications at a fixed rate.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from . import SRS_POSITIONING_FUNCTION_ID
from .wire import (
    E2SetupRequest,
    E2SetupResponse,
    ErrorCause,
    ErrorIndication,
    EventTrigger,
    RanFunction,
    RicIndication,
    RuReport,
    SrsIndication,
    SubscriptionRequest,
    SubscriptionResponse,
    SubscriptionStatus,
    encode_message,
    read_message,
)

log = logging.getLogger(__name__)

FRAME_NS = 10_000_000
SLOT_NS = 500_000  # 30 kHz numerology


class AgentError(RuntimeError):
    code = "AGENT_ERROR"


class SetupFailed(AgentError):
    code = "SETUP_FAILED"


class NotSubscribed(AgentError):
    code = "NOT_SUBSCRIBED"


class ConnectionLost(AgentError):
    code = "CONNECTION_LOST"

    def __init__(self, message: str, summary: ReplaySummary):
        super().__init__(message)
        self.summary = summary


@dataclass
class ReplaySummary:
    sent: int
    duration_s: float

    @property
    def rate_hz(self) -> float:
        return (self.sent - 1) / self.duration_s if self.sent > 1 and self.duration_s > 0 else 0.0


def frame_slot(timestamp_ns: int) -> tuple[int, int]:
    return (timestamp_ns // FRAME_NS) % 1024, (timestamp_ns % FRAME_NS) // SLOT_NS


def build_indication(snapshot, trps_per_ru, ue_id: int, timestamp_ns: int, ru_ids=None, trp_ids=None) -> SrsIndication:
    """Wrap one dataset snapshot; the CFR samples are passed through untouched."""
    frame, slot = frame_slot(timestamp_ns)
    rus = []
    row = 0
    for k, m in enumerate(trps_per_ru):
        ru_id = ru_ids[k] if ru_ids else k + 1
        ids = tuple(trp_ids[k]) if trp_ids else tuple(range(1, m + 1))
        rus.append(RuReport(ru_id, ids, snapshot.cfr[row:row + m]))
        row += m
    return SrsIndication(ue_id, frame, slot, timestamp_ns, tuple(rus))


class E2Agent:
    """Client side of the E2 link. A background thread answers subscription
    requests; :meth:`replay` runs on the caller's thread."""

    def __init__(self, host: str, port: int, agent_id: int = 1, ue_id: int = 1):
        self.address = (host, port)
        self.agent_id = agent_id
        self.ue_id = ue_id
        self.sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._subs: list[int] = []
        self._subs_lock = threading.Lock()
        self._subscribed = threading.Event()
        self._lost = threading.Event()
        self._reader = None

    def connect(self, timeout: float = 5.0) -> E2SetupResponse:
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        setup = E2SetupRequest(self.agent_id, (RanFunction(SRS_POSITIONING_FUNCTION_ID, "SRS Positioning", 1),))
        self._send(setup)
        reply = read_message(self.sock)
        self.sock.settimeout(None)
        if isinstance(reply, ErrorIndication):
            self.close()
            raise SetupFailed(f"{reply.cause.name}: {reply.text}")
        if not isinstance(reply, E2SetupResponse) or SRS_POSITIONING_FUNCTION_ID not in reply.accepted:
            self.close()
            raise SetupFailed(f"unexpected setup reply {reply!r}")
        log.info("agent %d registered at %s:%d", self.agent_id, *self.address)
        self._reader = threading.Thread(target=self._control_loop, name="agent-control", daemon=True)
        self._reader.start()
        return reply

    def _send(self, msg):
        self._send_frame(encode_message(msg))

    def _send_frame(self, frame: bytes):
        with self._send_lock:
            self.sock.sendall(frame)

    def _control_loop(self):
        try:
            while True:
                msg = read_message(self.sock)
                if isinstance(msg, SubscriptionRequest):
                    ok = (msg.function_id == SRS_POSITIONING_FUNCTION_ID
                          and msg.event_trigger == EventTrigger.ON_SRS_INDICATION)
                    status = SubscriptionStatus.ACCEPTED if ok else SubscriptionStatus.REJECTED_BAD_TRIGGER
                    if msg.function_id != SRS_POSITIONING_FUNCTION_ID:
                        status = SubscriptionStatus.REJECTED_UNKNOWN_FUNCTION
                    if ok:
                        with self._subs_lock:
                            if msg.request_id not in self._subs:
                                self._subs.append(msg.request_id)
                        self._subscribed.set()
                    self._send(SubscriptionResponse(msg.request_id, status))
                    log.info("agent %d subscription request_id=%d %s", self.agent_id, msg.request_id, status.name)
                elif isinstance(msg, ErrorIndication):
                    log.warning("agent %d got error %s: %s", self.agent_id, msg.cause.name, msg.text)
                else:
                    self._send(ErrorIndication(0, ErrorCause.UNEXPECTED_MESSAGE, type(msg).__name__))
        except (OSError, ValueError):
            pass
        finally:
            self._lost.set()

    @property
    def subscriptions(self) -> list[int]:
        with self._subs_lock:
            return list(self._subs)

    def wait_subscribed(self, timeout: float | None = None) -> bool:
        return self._subscribed.wait(timeout)

    def replay(self, dataset, rate_hz: float, loop: bool = False, max_sends: int | None = None,
               stop: threading.Event | None = None, geometry=None) -> ReplaySummary:
        """Send one indication per snapshot on a fixed monotonic schedule.

        In loop mode the dataset restarts at snapshot 0 and timestamps are
        shifted by one dataset span (plus one mean snapshot interval) per pass.
        """
        if not rate_hz > 0:
            raise ValueError("rate must be positive")
        if not self.subscriptions:
            raise NotSubscribed("replay requested before any subscription was accepted")
        total = len(dataset)
        ts = dataset.timestamps_ns
        step = int((ts[-1] - ts[0]) // (total - 1)) if total > 1 else int(round(1e9 / rate_hz))
        span = int(ts[-1] - ts[0]) + step
        ru_ids = [geometry.ru_ids[k] for k in range(geometry.num_rus)] if geometry else None
        trp_ids = [geometry.trp_ids(k) for k in range(geometry.num_rus)] if geometry else None
        seqs: dict[int, int] = {}
        period = 1.0 / rate_hz
        start = time.monotonic()
        sent = 0
        n = 0
        while True:
            if max_sends is not None and sent >= max_sends:
                break
            if stop is not None and stop.is_set():
                break
            idx = n % total
            if n >= total and not loop:
                break
            due = start + n * period
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            snap = dataset[idx]
            stamp = int(snap.timestamp_ns) + (n // total) * span
            srs = build_indication(snap, dataset.trps_per_ru, self.ue_id, stamp, ru_ids, trp_ids)
            try:
                if self._lost.is_set():
                    raise ConnectionResetError("control connection closed")
                for rid in self.subscriptions:
                    seq = seqs.get(rid, 0)
                    self._send_frame(encode_message(RicIndication(rid, seq, srs)))
                    seqs[rid] = seq + 1
            except OSError as exc:
                summary = ReplaySummary(sent, time.monotonic() - start)
                raise ConnectionLost(f"connection lost after {sent} sends: {exc}", summary) from None
            sent += 1
            n += 1
        return ReplaySummary(sent, time.monotonic() - start)

    def close(self):
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
