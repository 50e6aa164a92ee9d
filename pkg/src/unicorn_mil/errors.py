"""Exception hierarchy shared across the package.

Every error carries a short machine-parsable class string and the process
exit code the CLI maps it to (0 success, 2 config, 3 data, 4 numeric,
5 version mismatch).
"""


class UnicornError(Exception):
    exit_code = 1
    error_class = "error"


class ConfigError(UnicornError):
    """Invalid, unknown, or inconsistent configuration."""

    exit_code = 2
    error_class = "config"


class ConfigMismatchError(ConfigError):
    """Checkpoint and data/config disagree (e.g. feature width)."""

    error_class = "config-mismatch"


class DataError(UnicornError):
    """Problems with input data files."""

    exit_code = 3
    error_class = "data"


class FormatError(DataError):
    """Malformed binary file: bad magic, truncation, bad extents."""

    error_class = "format"


class ManifestError(DataError):
    """Malformed dataset manifest."""

    error_class = "manifest"


class ShapeError(DataError):
    """Tensor extents do not satisfy an operation's contract."""

    error_class = "shape"


class NumericError(UnicornError):
    """A non-finite value was produced where finiteness is guaranteed."""

    exit_code = 4
    error_class = "numeric"


class VersionError(UnicornError):
    """Unsupported file format version."""

    exit_code = 5
    error_class = "version-mismatch"
