"""Errors with machine-parsable codes, printed by the CLI as ``CODE: message``."""


class BridgeError(Exception):
    """Base class for all converter errors."""

    code = "E_INTERNAL"


class UsageError(BridgeError):
    """Bad invocation or manifest: unknown key, missing required field."""

    code = "E_USAGE"


class FormatError(BridgeError):
    """The source container cannot be parsed as h5ad."""

    code = "E_FORMAT"


class MissingColumnError(BridgeError):
    """A column named by the manifest does not exist in the source."""

    code = "E_MISSING_COLUMN"


class ValueSpaceError(BridgeError):
    """The matrix contents contradict the declared value space."""

    code = "E_VALUE_SPACE"
