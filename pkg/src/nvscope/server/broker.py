"""Telemetry fan-out: per-channel sequence numbers, history, subscribers.

Every published event gets the next sequence number of its channel and
is retained in a bounded in-memory history, then offered to each
subscribed connection's outbound queue.  A consumer whose queue is full
is dropped (never back-pressured): its connection is marked and a
notice is published on the log channel for the remaining observers.

Subscribing with ``resume_from`` atomically replays the retained events
with seq > resume_from into the queue before going live, so a
reconnecting client sees a gap-free sequence as long as the history
still covers its last seen seq.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections import deque

from .protocol import CHANNELS, ProtocolError, event

log = logging.getLogger(__name__)

HISTORY_LIMIT = 100_000


class Connection:
    """One client connection: outbound queue plus subscription state."""

    _COUNTER = 0
    _COUNTER_LOCK = threading.Lock()

    def __init__(self, queue_size: int = 4096):
        with Connection._COUNTER_LOCK:
            Connection._COUNTER += 1
            self.id = Connection._COUNTER
        self.queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self.subscriptions: set[str] = set()
        self.dropped = threading.Event()
        self.drop_reason: str | None = None
        self.closed = threading.Event()

    def offer(self, message: dict) -> bool:
        """Enqueue without blocking; a full queue drops the connection."""
        if self.dropped.is_set() or self.closed.is_set():
            return False
        try:
            self.queue.put_nowait(message)
            return True
        except queue.Full:
            self.drop_reason = "overflow"
            self.dropped.set()
            return False

    def close(self):
        self.closed.set()
        try:
            self.queue.put_nowait(None)  # wake the writer promptly
        except queue.Full:
            pass  # the writer polls the closed flag anyway


class Broker:
    """Thread-safe event bus for the fixed telemetry channels."""

    def __init__(self, history_limit: int = HISTORY_LIMIT):
        self._lock = threading.Lock()
        self._seq = {name: 0 for name in CHANNELS}
        self._history: dict[str, deque] = {
            name: deque(maxlen=history_limit) for name in CHANNELS}
        self._subs: dict[str, list[Connection]] = {
            name: [] for name in CHANNELS}

    def publish(self, channel: str, payload: dict) -> int:
        with self._lock:
            self._seq[channel] += 1
            seq = self._seq[channel]
            msg = event(seq, channel, payload)
            self._history[channel].append(msg)
            dropped = []
            for conn in self._subs[channel]:
                if not conn.offer(msg):
                    dropped.append(conn)
            for conn in dropped:
                self._unsubscribe_locked(conn)
        for conn in dropped:
            if conn.drop_reason == "overflow":
                log.warning("connection %d dropped: overflow", conn.id)
                self.publish("log", {"type": "consumer_dropped",
                                     "connection": conn.id,
                                     "reason": "overflow"})
        return seq

    def subscribe(self, conn: Connection, channel: str,
                  resume_from: int | None = None) -> dict:
        """Register and optionally replay; returns the subscribe result."""
        if channel not in CHANNELS:
            raise ProtocolError(f"unknown channel {channel!r}")
        with self._lock:
            replayed = 0
            if resume_from is not None:
                if resume_from < 0:
                    raise ProtocolError("resume_from must be >= 0")
                history = self._history[channel]
                if history and resume_from < history[0]["seq"] - 1:
                    raise ProtocolError(
                        f"events after seq {resume_from} are no longer "
                        f"retained (oldest: {history[0]['seq']})")
                if resume_from > self._seq[channel]:
                    raise ProtocolError(
                        f"resume_from {resume_from} is ahead of the "
                        f"channel (latest: {self._seq[channel]})")
                for msg in history:
                    if msg["seq"] > resume_from:
                        conn.offer(msg)
                        replayed += 1
            if conn not in self._subs[channel]:
                self._subs[channel].append(conn)
            conn.subscriptions.add(channel)
            return {"channel": channel, "next_seq": self._seq[channel] + 1,
                    "replayed": replayed}

    def unsubscribe_all(self, conn: Connection):
        with self._lock:
            self._unsubscribe_locked(conn)

    def _unsubscribe_locked(self, conn: Connection):
        for subs in self._subs.values():
            if conn in subs:
                subs.remove(conn)
        conn.subscriptions.clear()

    def latest_seq(self, channel: str) -> int:
        with self._lock:
            return self._seq[channel]
