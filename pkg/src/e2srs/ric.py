"""
Near-RT-RIC-like router.

Agents connect on one port and register with E2 Setup; xApps connect on a
second port and subscribe. Accepted subscriptions are relayed to every live
agent offering the SRS Positioning function, and RIC indications coming back
are fanned out to the matching subscribers through bounded per-subscriber
queues (drop-oldest on overflow).
"""

from __future__ import annotations

import logging
import os
import socket
import threading
from collections import deque
from dataclasses import dataclass, field

from . import SRS_POSITIONING_FUNCTION_ID
from .wire import (
    CodecError,
    E2SetupRequest,
    E2SetupResponse,
    ErrorCause,
    ErrorIndication,
    EventTrigger,
    MsgType,
    RicIndication,
    SubscriptionRequest,
    SubscriptionResponse,
    SubscriptionStatus,
    decode_header,
    decode_message,
    encode_message,
    peek_indication,
    read_frame,
)

log = logging.getLogger(__name__)

DEFAULT_AGENT_PORT = 36421
DEFAULT_XAPP_PORT = 36422
DEFAULT_QUEUE_CAPACITY = 256
KNOWN_FUNCTIONS = frozenset({SRS_POSITIONING_FUNCTION_ID})


class DuplicateAgentId(Exception):
    code = "DUPLICATE_AGENT_ID"


class Peer:
    """One connection. Outgoing frames go through a writer thread:
    control frames first, then indications from a bounded drop-oldest queue."""

    def __init__(self, sock: socket.socket | None, name: str, capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.sock = sock
        self.name = name
        self.capacity = capacity
        self.control: deque[bytes] = deque()
        self.queue: deque[bytes] = deque()
        self.cond = threading.Condition()
        self.dropped = 0
        self.enqueued = 0
        self.sent = 0
        self.closed = False
        self.in_flight = False
        self._writer = None

    def send_control(self, frame: bytes):
        with self.cond:
            self.control.append(frame)
            self.cond.notify()

    def enqueue(self, frame: bytes):
        with self.cond:
            if len(self.queue) >= self.capacity:
                self.queue.popleft()
                self.dropped += 1
                log.warning("queue overflow peer=%s dropped=%d", self.name, self.dropped)
            self.queue.append(frame)
            self.enqueued += 1
            self.cond.notify()

    def start(self):
        self._writer = threading.Thread(target=self._write_loop, name=f"writer-{self.name}", daemon=True)
        self._writer.start()

    def _write_loop(self):
        while True:
            with self.cond:
                while not self.closed and not self.control and not self.queue:
                    self.cond.wait()
                if self.closed:
                    return
                frame = self.control.popleft() if self.control else self.queue.popleft()
                self.in_flight = True
            try:
                self.sock.sendall(frame)
                self.sent += 1
            except OSError:
                self.close()
                return
            finally:
                with self.cond:
                    self.in_flight = False
                    self.cond.notify_all()

    def close(self):
        with self.cond:
            if self.closed:
                return
            self.closed = True
            self.cond.notify_all()
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


@dataclass
class AgentSession:
    agent_id: int
    functions: frozenset[int]
    peer: Peer
    relayed: set = field(default_factory=set)


class RicCore:
    """Connection-independent routing state. All mutation happens under one lock."""

    def __init__(self):
        self.lock = threading.Lock()
        self.agents: dict[int, AgentSession] = {}
        self.subscriptions: dict[tuple[int, int], list[Peer]] = {}
        self.routed = 0
        self.unmatched = 0

    def register_agent(self, setup: E2SetupRequest, peer: Peer) -> E2SetupResponse:
        offered = [f.function_id for f in setup.functions]
        accepted = tuple(f for f in dict.fromkeys(offered) if f in KNOWN_FUNCTIONS)
        with self.lock:
            if setup.agent_id in self.agents:
                raise DuplicateAgentId(f"agent_id {setup.agent_id} already has a live session")
            session = AgentSession(setup.agent_id, frozenset(accepted), peer)
            self.agents[setup.agent_id] = session
            pending = list(self.subscriptions) if SRS_POSITIONING_FUNCTION_ID in accepted else []
        log.info("agent registered agent_id=%d accepted=%s", setup.agent_id, list(accepted))
        response = E2SetupResponse(accepted)
        peer.send_control(encode_message(response))
        for fid, rid in pending:
            self._relay(session, fid, rid)
        return response

    def unregister_agent(self, agent_id: int, peer: Peer | None = None):
        with self.lock:
            session = self.agents.get(agent_id)
            if session is not None and (peer is None or session.peer is peer):
                del self.agents[agent_id]
                log.info("agent gone agent_id=%d", agent_id)

    def _relay(self, session: AgentSession, function_id: int, request_id: int):
        with self.lock:
            if (function_id, request_id) in session.relayed:
                return
            session.relayed.add((function_id, request_id))
        req = SubscriptionRequest(request_id, function_id, EventTrigger.ON_SRS_INDICATION)
        session.peer.send_control(encode_message(req))
        log.info("subscription relayed agent_id=%d request_id=%d", session.agent_id, request_id)

    def handle_subscription(self, req: SubscriptionRequest, subscriber: Peer) -> SubscriptionResponse:
        if req.function_id not in KNOWN_FUNCTIONS:
            status = SubscriptionStatus.REJECTED_UNKNOWN_FUNCTION
        elif req.event_trigger != EventTrigger.ON_SRS_INDICATION:
            status = SubscriptionStatus.REJECTED_BAD_TRIGGER
        else:
            status = SubscriptionStatus.ACCEPTED
        response = SubscriptionResponse(req.request_id, status)
        # response is queued before the table entry so it precedes any indication
        subscriber.send_control(encode_message(response))
        log.info("subscription peer=%s request_id=%d function_id=%d status=%s",
                 subscriber.name, req.request_id, req.function_id, status.name)
        if status is not SubscriptionStatus.ACCEPTED:
            return response
        key = (req.function_id, req.request_id)
        with self.lock:
            subs = self.subscriptions.setdefault(key, [])
            if subscriber not in subs:
                subs.append(subscriber)
            targets = [a for a in self.agents.values() if req.function_id in a.functions]
        for session in targets:
            self._relay(session, *key)
        return response

    def remove_subscriber(self, subscriber: Peer):
        with self.lock:
            for key in list(self.subscriptions):
                subs = self.subscriptions[key]
                if subscriber in subs:
                    subs.remove(subscriber)
                if not subs:
                    del self.subscriptions[key]

    def route_indication(self, ind, from_agent: int | None = None) -> int:
        """Fan an indication (message or encoded frame) out to its subscribers."""
        if isinstance(ind, RicIndication):
            frame = encode_message(ind)
            request_id, seq = ind.request_id, ind.sequence
        else:
            frame = bytes(ind)
            request_id, seq = peek_indication(frame)
        with self.lock:
            subs = list(self.subscriptions.get((SRS_POSITIONING_FUNCTION_ID, request_id), ()))
            if not subs:
                self.unmatched += 1
            else:
                self.routed += 1
        if not subs:
            log.debug("unmatched indication request_id=%d seq=%d agent=%s", request_id, seq, from_agent)
            return 0
        for peer in subs:
            peer.enqueue(frame)
        return len(subs)

    def stats(self) -> dict:
        with self.lock:
            peers = {p.name: p for subs in self.subscriptions.values() for p in subs}
            return {
                "agents": len(self.agents),
                "subscriptions": sum(len(s) for s in self.subscriptions.values()),
                "routed": self.routed,
                "unmatched": self.unmatched,
                "dropped": sum(p.dropped for p in peers.values()),
            }


def ports_from_env(agent_port: int | None = None, xapp_port: int | None = None) -> tuple[int, int]:
    if agent_port is None:
        agent_port = int(os.environ.get("E2SRS_AGENT_PORT", DEFAULT_AGENT_PORT))
    if xapp_port is None:
        xapp_port = int(os.environ.get("E2SRS_XAPP_PORT", DEFAULT_XAPP_PORT))
    return agent_port, xapp_port


class RicServer:
    """Threaded TCP front end for :class:`RicCore`."""

    def __init__(self, host: str = "127.0.0.1", agent_port: int = DEFAULT_AGENT_PORT,
                 xapp_port: int = DEFAULT_XAPP_PORT, queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.core = RicCore()
        self.queue_capacity = queue_capacity
        self._agent_sock = socket.create_server((host, agent_port))
        self._xapp_sock = socket.create_server((host, xapp_port))
        self.agent_address = self._agent_sock.getsockname()[:2]
        self.xapp_address = self._xapp_sock.getsockname()[:2]
        self._peers: set[Peer] = set()
        self._lock = threading.Lock()
        self._threads = []
        self._closed = threading.Event()
        self._counter = 0
        self.dropped_total = 0

    def start(self) -> RicServer:
        for lsock, handler in ((self._agent_sock, self._serve_agent), (self._xapp_sock, self._serve_xapp)):
            t = threading.Thread(target=self._accept_loop, args=(lsock, handler), daemon=True)
            t.start()
            self._threads.append(t)
        log.info("ric listening agents=%s:%d xapps=%s:%d", *self.agent_address, *self.xapp_address)
        return self

    def _accept_loop(self, lsock, handler):
        while not self._closed.is_set():
            try:
                conn, addr = lsock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._counter += 1
                peer = Peer(conn, f"{handler.__name__[7:]}-{self._counter}", self.queue_capacity)
                self._peers.add(peer)
            peer.start()
            threading.Thread(target=self._run_peer, args=(handler, peer), daemon=True).start()

    def _run_peer(self, handler, peer: Peer):
        try:
            handler(peer)
        except (OSError, ConnectionError):
            pass
        except CodecError as exc:
            log.warning("malformed input from %s: %s (%s)", peer.name, exc, exc.code)
        finally:
            self.core.remove_subscriber(peer)
            self.dropped_total += peer.dropped
            peer.close()
            with self._lock:
                self._peers.discard(peer)
            log.info("peer closed %s", peer.name)

    def _serve_agent(self, peer: Peer):
        msg = decode_message(read_frame(peer.sock))
        if not isinstance(msg, E2SetupRequest):
            peer.send_control(encode_message(ErrorIndication(0, ErrorCause.NOT_REGISTERED, "E2 Setup required first")))
            _flush(peer)
            return
        try:
            self.core.register_agent(msg, peer)
        except DuplicateAgentId as exc:
            peer.send_control(encode_message(ErrorIndication(0, ErrorCause.DUPLICATE_AGENT_ID, str(exc))))
            _flush(peer)
            return
        agent_id = msg.agent_id
        try:
            while True:
                frame = read_frame(peer.sock)
                msg_type, _ = decode_header(frame)
                if msg_type is MsgType.RIC_INDICATION:
                    self.core.route_indication(frame, agent_id)
                    continue
                msg = decode_message(frame)
                if isinstance(msg, SubscriptionResponse):
                    log.info("agent_id=%d answered request_id=%d status=%s", agent_id, msg.request_id, msg.status.name)
                elif isinstance(msg, ErrorIndication):
                    log.warning("agent_id=%d error %s: %s", agent_id, msg.cause.name, msg.text)
                else:
                    peer.send_control(encode_message(ErrorIndication(0, ErrorCause.UNEXPECTED_MESSAGE, type(msg).__name__)))
        finally:
            self.core.unregister_agent(agent_id, peer)

    def _serve_xapp(self, peer: Peer):
        while True:
            msg = decode_message(read_frame(peer.sock))
            if isinstance(msg, SubscriptionRequest):
                self.core.handle_subscription(msg, peer)
            else:
                peer.send_control(encode_message(ErrorIndication(0, ErrorCause.UNEXPECTED_MESSAGE, type(msg).__name__)))

    def stats(self) -> dict:
        s = self.core.stats()
        with self._lock:
            s["dropped"] = self.dropped_total + sum(p.dropped for p in self._peers)
        return s

    def close(self):
        self._closed.set()
        for lsock in (self._agent_sock, self._xapp_sock):
            lsock.close()
        with self._lock:
            peers = list(self._peers)
        for p in peers:
            p.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def _flush(peer: Peer, timeout: float = 1.0):
    """Give the writer a moment to push queued control frames before closing."""
    with peer.cond:
        peer.cond.wait_for(lambda: (not peer.control and not peer.in_flight) or peer.closed, timeout)
