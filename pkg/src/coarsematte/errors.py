"""Exception types shared by the library and mapped to CLI exit codes."""


class MattingError(Exception):
    """Base class for all errors raised by coarsematte."""


class DataError(MattingError):
    """Bad or missing input data (files, manifests, config)."""


class ImageIOError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


class ManifestError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(DataError):
    pass


class NumericalError(MattingError):
    """Training produced a non-finite loss or parameter."""
