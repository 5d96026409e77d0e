"""Exception types mapped onto CLI exit codes."""


class ShadingNetError(Exception):
    exit_code = 1


class UsageError(ShadingNetError):
    exit_code = 1


class DataError(ShadingNetError):
    """Unreadable, malformed or inconsistent files."""

    exit_code = 2


class FormatError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(ShadingNetError):
    """Non-finite loss during training."""

    exit_code = 3
