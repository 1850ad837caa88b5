"""Network transports: NDJSON over TCP and the same messages over WebSocket.

Each connection runs two threads: the handler's own reader (parsing
requests into ``service.handle``) and a writer draining the
connection's outbound queue (responses and telemetry events, in order).
A connection dropped for overflow is closed after a best-effort notice;
acquisition is never back-pressured by a slow consumer.

``serve(config)`` builds the instrument and datastore from a parsed
config dict, binds both transports, and returns a handle with
``stop()`` — port 0 binds an ephemeral port (the handle reports the
actual one).
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from pathlib import Path

from ..datastore import DataStore
from ..session import Instrument
from ..simcore import models_from_config
from .broker import Connection
from .protocol import ProtocolError, encode, response_error
from .service import Service
from . import ws

log = logging.getLogger(__name__)

WRITER_POLL_S = 0.1


def _drain(conn: Connection, write_message) -> None:
    """Writer loop: ship queued messages until the connection ends."""
    import queue as _queue
    while True:
        try:
            item = conn.queue.get(timeout=WRITER_POLL_S)
        except _queue.Empty:
            if conn.closed.is_set() or conn.dropped.is_set():
                return
            continue
        if item is None:
            return
        try:
            write_message(item)
        except OSError:
            conn.closed.set()
            return
        if conn.dropped.is_set() and conn.queue.empty():
            return


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service: Service = self.server.service  # type: ignore[attr-defined]
        conn = service.connect()
        wlock = threading.Lock()

        def write_message(msg: dict):
            with wlock:
                self.wfile.write(encode(msg))
                self.wfile.flush()

        writer = threading.Thread(target=_drain, args=(conn, write_message),
                                  name=f"tcp-writer-{conn.id}", daemon=True)
        writer.start()
        try:
            while not (conn.closed.is_set() or conn.dropped.is_set()):
                line = self.rfile.readline(16 * 1024 * 1024)
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    message = json.loads(line)
                    if not isinstance(message, dict):
                        raise ValueError("message must be a JSON object")
                except ValueError as exc:
                    conn.offer(response_error(None, "validation",
                                              f"malformed JSON: {exc}"))
                    continue
                service.handle(conn, message)
        except (ConnectionError, OSError):
            pass
        finally:
            service.disconnect(conn)
            writer.join(timeout=5.0)


class _WsHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service: Service = self.server.service  # type: ignore[attr-defined]
        try:
            headers = ws.read_handshake(self.rfile)
        except (ws.WsError, UnicodeDecodeError) as exc:
            try:
                self.wfile.write(ws.handshake_reject(str(exc)))
            except OSError:
                pass
            return
        self.wfile.write(ws.handshake_response(headers))
        self.wfile.flush()

        conn = service.connect()
        wlock = threading.Lock()

        def write_frame(opcode: int, payload: bytes):
            with wlock:
                self.wfile.write(ws.encode_frame(opcode, payload))
                self.wfile.flush()

        def write_message(msg: dict):
            write_frame(ws.OP_TEXT, encode(msg).rstrip(b"\n"))

        def on_control(op: int, payload: bytes):
            if op == ws.OP_PING:
                write_frame(ws.OP_PONG, payload)

        writer = threading.Thread(target=_drain, args=(conn, write_message),
                                  name=f"ws-writer-{conn.id}", daemon=True)
        writer.start()
        try:
            while not (conn.closed.is_set() or conn.dropped.is_set()):
                opcode, payload = ws.read_message(self.rfile,
                                                  on_control=on_control)
                if opcode == ws.OP_CLOSE:
                    write_frame(ws.OP_CLOSE, payload[:2])
                    break
                if opcode != ws.OP_TEXT:
                    continue
                try:
                    message = json.loads(payload)
                    if not isinstance(message, dict):
                        raise ValueError("message must be a JSON object")
                except (ValueError, UnicodeDecodeError) as exc:
                    conn.offer(response_error(None, "validation",
                                              f"malformed JSON: {exc}"))
                    continue
                service.handle(conn, message)
        except (ConnectionError, OSError, EOFError, ws.WsError):
            pass
        finally:
            if conn.dropped.is_set():
                try:
                    write_frame(ws.OP_CLOSE,
                                ws.close_payload(1013, "overflow"))
                except OSError:
                    pass
            service.disconnect(conn)
            writer.join(timeout=5.0)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, handler, service: Service):
        super().__init__(addr, handler)
        self.service = service


class ServerHandle:
    """Running endpoint: both transports plus the shared service."""

    def __init__(self, service: Service, tcp: _Server, wsrv: _Server):
        self.service = service
        self._tcp = tcp
        self._ws = wsrv
        self.tcp_port = tcp.server_address[1]
        self.ws_port = wsrv.server_address[1]
        self._threads = [
            threading.Thread(target=tcp.serve_forever, daemon=True,
                             name="nvscope-tcp"),
            threading.Thread(target=wsrv.serve_forever, daemon=True,
                             name="nvscope-ws"),
        ]
        for t in self._threads:
            t.start()
        log.info("serving: tcp port %d, websocket port %d",
                 self.tcp_port, self.ws_port)

    def stop(self):
        self.service.shutdown()
        for srv in (self._tcp, self._ws):
            srv.shutdown()
            srv.server_close()
        for t in self._threads:
            t.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(config: dict) -> ServerHandle:
    """Start the control server from a parsed config dict.

    Recognized [server] keys: host (default 127.0.0.1), port (default
    8770), ws_port (default 8771), data_root (default ./nvscope-data),
    seed (default 0), accelerated (default true).  Model sections
    (fork, nv, sample, interaction) configure the instrument; missing
    sections use the defaults.
    """
    section = config.get("server", {})
    if not isinstance(section, dict):
        raise ProtocolError("[server] section must be a table")
    host = section.get("host", "127.0.0.1")
    port = int(section.get("port", 8770))
    ws_port = int(section.get("ws_port", 8771))
    data_root = Path(section.get("data_root", "./nvscope-data"))
    seed = int(section.get("seed", 0))
    accelerated = bool(section.get("accelerated", True))

    fork, nv, sample, interaction = models_from_config(config)
    instrument = Instrument(fork=fork, nv=nv, sample=sample,
                            interaction=interaction, seed=seed,
                            accelerated=accelerated, config=config)
    service = Service(instrument, DataStore(data_root))
    tcp = _Server((host, port), _TcpHandler, service)
    wsrv = _Server((host, ws_port), _WsHandler, service)
    return ServerHandle(service, tcp, wsrv)
