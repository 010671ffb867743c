"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, DataError -> 3,
NumericError -> 4.
"""


class CasediagError(Exception):
    pass


class UsageError(CasediagError):
    """Bad arguments, bad config, incompatible inputs."""


class DataError(CasediagError):
    """Malformed manifests, missing assets, invalid records."""


class ManifestError(DataError):
    """Parse failure in a manifest file; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingAssetError(DataError):
    """A record references a voxel file that does not exist."""


class NumericError(CasediagError):
    """Non-finite values where finite ones are required (NaN loss, bad voxels)."""
