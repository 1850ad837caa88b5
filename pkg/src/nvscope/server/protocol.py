"""Wire protocol: message shapes, error codes, schema.

One JSON object per line (NDJSON) over TCP; the identical JSON payloads
travel as text frames over WebSocket.  Three message shapes:

    request   {"id": <str|int>, "verb": <str>, "params": {...}}
    response  {"id": ..., "ok": true, "result": {...}}
              {"id": ..., "ok": false, "error": {"code": ..., "message": ...}}
    event     {"seq": <int>, "channel": <str>, "payload": {...}}

Responses echo the request id; event seq is strictly increasing per
channel with no gaps within a connection.  JSON cannot carry NaN, so
non-finite floats serialize as null everywhere on the wire; stored
envelopes returned by load_data carry arrays in the base64 form
documented in the schema instead.

``build_schema()`` renders the whole contract (verbs, params, phases,
channels, error codes) as a plain dict; the repository ships it as
``protocol_schema.json`` and a test keeps file and code in sync.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .machine import PHASES, VERBS

PROTOCOL_NAME = "nvscope-control"
PROTOCOL_VERSION = 1
MAX_LINE_BYTES = 16 * 1024 * 1024

ERROR_CODES = {
    "validation": "malformed request, unknown verb, or out-of-range "
                  "parameter",
    "illegal-state": "the verb is not legal in the current session phase",
    "busy": "a job is running; the verb must wait for it or abort it",
    "not-controller": "the connection does not hold the controller token",
    "not-found": "no stored envelope with that id",
    "measurement-failed": "the acquisition ran but produced no usable "
                          "result (fit failure, safety trip)",
    "internal": "unexpected server error; the session may enter the "
                "fault phase",
    "overflow": "the consumer fell too far behind and was disconnected",
}

CHANNELS = {
    "state": "full session state snapshot on every change",
    "scan_progress": "one event per completed scan row, plus one "
                     "completion event per scan",
    "sweep_live": "decimated sweep points (~100 ms of simulated time per "
                  "batch; the final point is never dropped), then the "
                  "dip fit",
    "log": "human-readable notices (job lifecycle mirrors, consumer "
           "drops)",
    "job": "job lifecycle: started / completed / failed, with result "
           "envelope ids",
}


class ProtocolError(ValueError):
    """Request rejected before dispatch; maps to the validation code."""


# ---------------------------------------------------------------------------
# JSON-safe conversion
# ---------------------------------------------------------------------------

def jsonable(obj):
    """Recursively convert to plain JSON types; non-finite floats -> null."""
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, np.generic):
        return jsonable(obj.item())
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__} onto the wire")


def encode(message: dict) -> bytes:
    """One wire line, newline-terminated."""
    return (json.dumps(jsonable(message), separators=(",", ":"),
                       allow_nan=False) + "\n").encode()


def decode(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        if len(line) > MAX_LINE_BYTES:
            raise ProtocolError("message too large")
        line = line.decode("utf-8", errors="strict")
    try:
        msg = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed JSON: {exc}") from None
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    return msg


# ---------------------------------------------------------------------------
# message constructors / parsers
# ---------------------------------------------------------------------------

def response_ok(req_id, result: dict) -> dict:
    return {"id": req_id, "ok": True, "result": result}


def response_error(req_id, code: str, message: str) -> dict:
    if code not in ERROR_CODES:
        raise ValueError(f"unknown error code {code!r}")
    return {"id": req_id, "ok": False,
            "error": {"code": code, "message": message}}


def event(seq: int, channel: str, payload: dict) -> dict:
    return {"seq": seq, "channel": channel, "payload": payload}


def parse_request(msg: dict):
    """Validate shape and return (id, verb, params); raises ProtocolError."""
    if "id" not in msg:
        raise ProtocolError("request is missing 'id'")
    req_id = msg["id"]
    if not isinstance(req_id, (str, int)) or isinstance(req_id, bool):
        raise ProtocolError("request id must be a string or integer")
    verb = msg.get("verb")
    if not isinstance(verb, str):
        raise ProtocolError("request is missing a string 'verb'")
    params = msg.get("params", {})
    if not isinstance(params, dict):
        raise ProtocolError("'params' must be an object")
    unknown = set(msg) - {"id", "verb", "params"}
    if unknown:
        raise ProtocolError(f"unknown request fields: {sorted(unknown)}")
    return req_id, verb, params


def _coerce(name: str, ptype: str, value):
    def number(v, what):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"{what} must be a number")
        v = float(v)
        if not math.isfinite(v):
            raise ProtocolError(f"{what} must be finite")
        return v

    if ptype == "number":
        return number(value, name)
    if ptype == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ProtocolError(f"{name} must be an integer")
        return value
    if ptype == "boolean":
        if not isinstance(value, bool):
            raise ProtocolError(f"{name} must be a boolean")
        return value
    if ptype == "string":
        if not isinstance(value, str):
            raise ProtocolError(f"{name} must be a string")
        return value
    if ptype.startswith("number["):
        if not isinstance(value, (list, tuple)):
            raise ProtocolError(f"{name} must be an array of numbers")
        want = ptype[len("number["):-1]
        if want and len(value) != int(want):
            raise ProtocolError(f"{name} must have exactly {want} elements")
        return [number(v, f"{name}[{i}]") for i, v in enumerate(value)]
    raise ValueError(f"unknown param type {ptype!r}")  # table bug


def validate_params(verb: str, params: dict) -> dict:
    """Coerce request params against the verb table; fill defaults."""
    if verb not in VERBS:
        raise ProtocolError(f"unknown verb {verb!r}")
    spec = VERBS[verb].params
    unknown = set(params) - set(spec)
    if unknown:
        raise ProtocolError(f"unknown {verb} params: {sorted(unknown)}")
    out = {}
    for name, p in spec.items():
        if name in params:
            value = params[name]
            if value is None:
                if not p.nullable:
                    raise ProtocolError(f"{name} must not be null")
                out[name] = None
                continue
            value = _coerce(name, p.type, value)
            if p.choices and value not in p.choices:
                raise ProtocolError(
                    f"{name} must be one of {', '.join(map(str, p.choices))}")
            out[name] = value
        elif p.required:
            raise ProtocolError(f"{verb} requires param {name!r}")
        else:
            out[name] = p.default
    return out


# ---------------------------------------------------------------------------
# machine-readable schema
# ---------------------------------------------------------------------------

def build_schema() -> dict:
    verbs = {}
    for name, v in VERBS.items():
        params = {}
        for pname, p in v.params.items():
            entry = {"type": p.type, "required": p.required,
                     "nullable": p.nullable}
            if not p.required:
                entry["default"] = jsonable(p.default)
            if p.unit:
                entry["unit"] = p.unit
            if p.choices:
                entry["choices"] = list(p.choices)
            if p.desc:
                entry["desc"] = p.desc
            params[pname] = entry
        verbs[name] = {
            "mutating": v.mutating,
            "job": v.job,
            "phases": list(v.phases) if v.phases is not None else None,
            "params": params,
            "result": v.result,
        }
    return {
        "protocol": PROTOCOL_NAME,
        "version": PROTOCOL_VERSION,
        "transports": ["ndjson-tcp", "websocket"],
        "message_shapes": {
            "request": {"id": "string|integer", "verb": "string",
                        "params": "object"},
            "response": {"id": "echo of the request id", "ok": "boolean",
                         "result": "object, when ok",
                         "error": {"code": "string", "message": "string"}},
            "event": {"seq": "integer, strictly increasing per channel "
                             "with no gaps within a connection",
                      "channel": "string", "payload": "object"},
        },
        "phases": list(PHASES),
        "channels": dict(CHANNELS),
        "error_codes": dict(ERROR_CODES),
        "verbs": verbs,
        "conventions": {
            "non_finite_floats": "serialized as null in wire messages",
            "units": "SI throughout; every physical param documents its "
                     "unit",
            "arrays_in_envelopes": "stored envelopes returned by "
                                   "load_data embed arrays as "
                                   "{'__ndarray__': {'dtype': '<f8', "
                                   "'shape': [...], 'data': base64 of "
                                   "little-endian row-major bytes}}",
        },
    }


if __name__ == "__main__":  # regenerate the shipped schema file
    print(json.dumps(build_schema(), indent=2, sort_keys=True))
