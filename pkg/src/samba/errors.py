"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingArtifactError -> 3, ValidationError (and subclasses) -> 4,
anything else -> 5.
"""


class SambaError(Exception):
    """Base class for all package errors."""


class ValidationError(SambaError, ValueError):
    """Invalid data: bad shapes, label values, out-of-bounds prompts."""


class ShapeError(ValidationError):
    """Array shape violates an operation's contract."""


class ConfigError(SambaError, ValueError):
    """Invalid configuration (schema violation, impossible geometry)."""


class MissingArtifactError(SambaError, FileNotFoundError):
    """A required on-disk artifact (dataset, checkpoint) is absent."""


class SvolError(ValidationError):
    """Base for SVOL container format errors."""


class SvolMagicError(SvolError):
    """File does not start with the SVOL magic bytes."""


class SvolVersionError(SvolError):
    """Unsupported SVOL container version."""


class SvolPayloadError(SvolError):
    """Declared shape and payload byte length disagree."""


class SvolModalityError(SvolError):
    """Modality names in the file are not the expected set."""


class CheckpointError(ValidationError):
    """Checkpoint directory is malformed or inconsistent."""
