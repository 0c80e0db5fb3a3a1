"""Exception hierarchy shared across the package."""


class FlcoreError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FlcoreError):
    """Invalid or inconsistent configuration."""


class ShapeError(FlcoreError):
    """Array dimensions do not match the model or message contract."""


class NumericError(FlcoreError):
    """A non-finite value appeared where finite arithmetic is required."""


class IngestionError(FlcoreError):
    """A data file is malformed; message includes the failing byte offset."""


class ProtocolError(FlcoreError):
    """A wire frame violates the protocol; message includes the byte offset."""


class TransportError(FlcoreError):
    """A carrier failed (lost client, timeout, handshake failure)."""
