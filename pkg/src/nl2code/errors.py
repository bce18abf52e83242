"""Exception types that map onto CLI exit codes."""


class ConfigError(Exception):
    """Bad flags, bad config file, or inconsistent run parameters (exit 1)."""


class DataError(Exception):
    """Unreadable, unparsable, or invalid dataset / vocabulary / checkpoint files (exit 2)."""


class NumericsError(Exception):
    """Non-finite values encountered during training or evaluation (exit 3)."""
