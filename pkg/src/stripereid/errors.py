"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3.
Bad arguments to individual operations (shape/range violations) raise
plain ValueError.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (bad key, bad landmark, ...)."""


class DataError(Exception):
    """Dataset-level problem (missing folder, unparsable filename, ...)."""


class TrainingAborted(RuntimeError):
    """Raised when training hits a non-finite loss; names the loss term."""
