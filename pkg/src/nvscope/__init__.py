"""nvscope: a virtual scanning NV magnetometer.

Physics simulation, calibration and ODMR analysis pipelines, a control
server with live telemetry, and an operator CLI.
"""

__version__ = "0.1.0"
