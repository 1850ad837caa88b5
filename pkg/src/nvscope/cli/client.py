"""Blocking NDJSON client for the control server, with CLI error mapping.

Single-threaded by design: requests, responses, and subscribed events
interleave on one socket and are consumed in arrival order.  Each server
error code maps to a distinct process exit code so scripts can branch on
the failure class.
"""
from __future__ import annotations

import json
import logging
import os
import socket

log = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:8770"
ADDR_ENV_VAR = "NVSCOPE_ADDR"

EXIT_OK = 0
EXIT_USAGE = 2           # bad flags or server-side validation
EXIT_CONNECTION = 3      # server unreachable or connection lost
EXIT_ILLEGAL_STATE = 4
EXIT_BUSY = 5
EXIT_NOT_CONTROLLER = 6
EXIT_NOT_FOUND = 7
EXIT_MEASUREMENT = 8
EXIT_INTERNAL = 9

CODE_TO_EXIT = {
    "validation": EXIT_USAGE,
    "illegal-state": EXIT_ILLEGAL_STATE,
    "busy": EXIT_BUSY,
    "not-controller": EXIT_NOT_CONTROLLER,
    "not-found": EXIT_NOT_FOUND,
    "measurement-failed": EXIT_MEASUREMENT,
    "internal": EXIT_INTERNAL,
    "overflow": EXIT_INTERNAL,
}


class CliError(Exception):
    """Failure with a process exit code; message goes to stderr."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


def resolve_addr(flag_value: str | None) -> str:
    """--addr flag, else NVSCOPE_ADDR, else the default loopback port."""
    return flag_value or os.environ.get(ADDR_ENV_VAR) or DEFAULT_ADDR


def _split_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise CliError(EXIT_USAGE,
                       f"invalid server address {addr!r}; expected host:port")
    return host or "127.0.0.1", int(port)


class ServerClient:
    """One TCP connection speaking the line-delimited JSON protocol."""

    def __init__(self, addr: str, timeout: float = 600.0):
        host, port = _split_addr(addr)
        try:
            self.sock = socket.create_connection((host, port),
                                                 timeout=timeout)
        except OSError as exc:
            raise CliError(
                EXIT_CONNECTION,
                f"cannot connect to server at {addr}: {exc}") from exc
        self.addr = addr
        self.rfile = self.sock.makefile("rb")
        self._n = 0
        self._pending_events: list[dict] = []

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "ServerClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- wire ----------------------------------------------------------------

    def _read_message(self) -> dict:
        try:
            line = self.rfile.readline()
        except OSError as exc:
            raise CliError(EXIT_CONNECTION,
                           f"connection to {self.addr} lost: {exc}") from exc
        if not line:
            raise CliError(EXIT_CONNECTION,
                           f"server at {self.addr} closed the connection")
        return json.loads(line)

    def request(self, verb: str, **params) -> dict:
        """Send one request and return its raw response, buffering any
        events that arrive first."""
        self._n += 1
        rid = self._n
        payload = json.dumps({"id": rid, "verb": verb, "params": params})
        try:
            self.sock.sendall(payload.encode() + b"\n")
        except OSError as exc:
            raise CliError(EXIT_CONNECTION,
                           f"connection to {self.addr} lost: {exc}") from exc
        while True:
            msg = self._read_message()
            if "channel" in msg:
                self._pending_events.append(msg)
                continue
            if msg.get("id") != rid:
                raise CliError(EXIT_INTERNAL,
                               f"out-of-order response from server: {msg}")
            return msg

    def call(self, verb: str, **params) -> dict:
        """Request and unwrap; protocol errors become CliError."""
        resp = self.request(verb, **params)
        if resp.get("ok"):
            return resp["result"]
        error = resp.get("error") or {}
        code = error.get("code", "internal")
        raise CliError(CODE_TO_EXIT.get(code, EXIT_INTERNAL),
                       f"{verb}: {error.get('message', 'unknown error')} "
                       f"[{code}]")

    def next_event(self) -> dict:
        """Next subscribed event (responses must not be in flight)."""
        if self._pending_events:
            return self._pending_events.pop(0)
        msg = self._read_message()
        if "channel" not in msg:
            raise CliError(EXIT_INTERNAL,
                           f"unexpected response from server: {msg}")
        return msg

    # -- higher-level flows ----------------------------------------------------

    def subscribe(self, *channels: str) -> None:
        for channel in channels:
            self.call("subscribe", channel=channel)

    def take_control(self) -> None:
        self.call("take_control")

    def run_job(self, verb: str, params: dict, on_event=None) -> dict:
        """Start a job verb and pump events until it finishes.

        `on_event(channel, payload)` sees every event that arrives while
        waiting (the caller subscribes to whatever channels it wants to
        watch; the job channel is subscribed here).  Returns the terminal
        job payload; a failed job raises CliError with the mapped code.
        """
        self.subscribe("job")
        result = self.call(verb, **params)
        job_id = result["job_id"]
        while True:
            event = self.next_event()
            channel, payload = event["channel"], event["payload"]
            if on_event is not None:
                on_event(channel, payload)
            if (channel == "job" and payload.get("job_id") == job_id
                    and payload["type"] in ("completed", "failed",
                                            "aborted")):
                if payload["type"] == "completed":
                    return payload
                error = payload.get("error") or {}
                code = error.get("code", "internal")
                raise CliError(
                    CODE_TO_EXIT.get(code, EXIT_INTERNAL),
                    f"{verb} {payload['type']}: "
                    f"{error.get('message', 'job did not complete')} "
                    f"[{code}]")
