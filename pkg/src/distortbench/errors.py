"""Exception types shared across the engine."""


class DistortBenchError(Exception):
    """Base class for engine errors."""


class InvalidArgumentError(DistortBenchError, ValueError):
    """A caller violated an operation's contract."""


class ProtocolError(DistortBenchError):
    """A wire frame was malformed or semantically inconsistent."""


class TransportError(DistortBenchError):
    """A remote classifier could not be reached after bounded retries."""


class CalibrationError(DistortBenchError):
    """A filter cannot reach the requested per-application distortion."""


class ConfigError(DistortBenchError, ValueError):
    """A run configuration file or override could not be resolved."""
