"""Exception types that the CLI maps to distinct exit codes."""


class ConfigError(Exception):
    """Invalid configuration: unknown keys, bad types, violated constraints."""


class DataError(Exception):
    """Data ingestion or partitioning failure (bad files, impossible splits)."""
