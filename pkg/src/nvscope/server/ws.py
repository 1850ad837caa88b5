"""Minimal RFC 6455 WebSocket framing for the console transport.

Implements only what one trusted local client needs: the HTTP upgrade
handshake, text/close/ping/pong frames, client-to-server masking
(mandatory per the RFC), and fragment reassembly.  No extensions, no
compression, no TLS.
"""

from __future__ import annotations

import base64
import hashlib
import os
import struct

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA
_CONTROL_OPS = (OP_CLOSE, OP_PING, OP_PONG)

MAX_MESSAGE_BYTES = 32 * 1024 * 1024


class WsError(RuntimeError):
    """Protocol violation or handshake failure."""


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def read_handshake(rfile) -> dict:
    """Parse the HTTP upgrade request; returns lower-cased headers."""
    request_line = rfile.readline(8192).decode("latin-1").strip()
    if not request_line.startswith("GET "):
        raise WsError(f"expected GET upgrade request, got {request_line!r}")
    headers: dict[str, str] = {}
    while True:
        line = rfile.readline(8192).decode("latin-1")
        if line in ("\r\n", "\n", ""):
            break
        name, _, value = line.partition(":")
        headers[name.strip().lower()] = value.strip()
    if headers.get("upgrade", "").lower() != "websocket":
        raise WsError("missing 'Upgrade: websocket' header")
    if "sec-websocket-key" not in headers:
        raise WsError("missing Sec-WebSocket-Key header")
    return headers


def handshake_response(headers: dict) -> bytes:
    accept = accept_key(headers["sec-websocket-key"])
    return ("HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n"
            "\r\n").encode("ascii")


def handshake_reject(reason: str) -> bytes:
    body = reason.encode()
    return (f"HTTP/1.1 400 Bad Request\r\n"
            f"Content-Length: {len(body)}\r\n"
            "Connection: close\r\n\r\n").encode("ascii") + body


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

def encode_frame(opcode: int, payload: bytes, *, mask: bool = False,
                 fin: bool = True) -> bytes:
    """One frame; servers send unmasked, clients must mask."""
    head = bytearray([(0x80 if fin else 0) | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head.append(mask_bit | n)
    elif n < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        payload = _apply_mask(payload, key)
    return bytes(head) + payload


def _apply_mask(payload: bytes, key: bytes) -> bytes:
    # XOR with the key repeated; vectorized via int translation tables is
    # overkill for console-sized messages
    reps = -(-len(payload) // 4)
    return bytes(a ^ b for a, b in zip(payload, key * reps))


def _read_exact(rfile, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = rfile.read(n - len(buf))
        if not chunk:
            raise EOFError("connection closed mid-frame")
        buf += chunk
    return buf


def read_frame(rfile, *, require_mask: bool) -> tuple[int, bool, bytes]:
    """Returns (opcode, fin, unmasked payload)."""
    b1, b2 = _read_exact(rfile, 2)
    fin = bool(b1 & 0x80)
    if b1 & 0x70:
        raise WsError("RSV bits set without a negotiated extension")
    opcode = b1 & 0x0F
    masked = bool(b2 & 0x80)
    n = b2 & 0x7F
    if opcode in _CONTROL_OPS and (n > 125 or not fin):
        raise WsError("control frames must be short and unfragmented")
    if n == 126:
        (n,) = struct.unpack(">H", _read_exact(rfile, 2))
    elif n == 127:
        (n,) = struct.unpack(">Q", _read_exact(rfile, 8))
    if n > MAX_MESSAGE_BYTES:
        raise WsError("frame too large")
    if require_mask and not masked:
        raise WsError("client frames must be masked")
    key = _read_exact(rfile, 4) if masked else b""
    payload = _read_exact(rfile, n)
    if masked:
        payload = _apply_mask(payload, key)
    return opcode, fin, payload


def read_message(rfile, *, require_mask: bool = True,
                 on_control=None) -> tuple[int, bytes]:
    """Assemble one data message, dispatching control frames in between.

    Returns (opcode, payload) where opcode is OP_TEXT/OP_BINARY, or
    (OP_CLOSE, payload) when the peer closes.
    """
    opcode = None
    parts: list[bytes] = []
    while True:
        op, fin, payload = read_frame(rfile, require_mask=require_mask)
        if op in _CONTROL_OPS:
            if op == OP_CLOSE:
                return OP_CLOSE, payload
            if on_control is not None:
                on_control(op, payload)
            continue
        if opcode is None:
            if op == OP_CONT:
                raise WsError("continuation frame without a start frame")
            opcode = op
        elif op != OP_CONT:
            raise WsError("new data frame inside a fragmented message")
        parts.append(payload)
        if sum(map(len, parts)) > MAX_MESSAGE_BYTES:
            raise WsError("message too large")
        if fin:
            return opcode, b"".join(parts)


def close_payload(code: int = 1000, reason: str = "") -> bytes:
    return struct.pack(">H", code) + reason.encode()[:123]
