"""Control server: session state machine, wire protocol, transports."""

from .broker import Broker, Connection
from .machine import PHASES, VERBS, MachineError
from .protocol import (
    CHANNELS,
    ERROR_CODES,
    PROTOCOL_VERSION,
    ProtocolError,
    build_schema,
)
from .service import Service, VerbError
from .transport import ServerHandle, serve

__all__ = [
    "Broker", "Connection", "PHASES", "VERBS", "MachineError",
    "CHANNELS", "ERROR_CODES", "PROTOCOL_VERSION", "ProtocolError",
    "build_schema", "Service", "VerbError", "ServerHandle", "serve",
]
