"""Shared exception types."""


class DivergenceError(RuntimeError):
    """Training loss blew past the divergence guard."""


class CheckpointError(ValueError):
    """Malformed checkpoint or config-hash mismatch."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage was run before its inputs exist."""
