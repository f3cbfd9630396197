"""Exception types raised across the pipeline."""


class F2PError(Exception):
    """Base class for all pipeline errors."""


class InvalidArgument(F2PError, ValueError):
    pass


class DegenerateInput(F2PError, ValueError):
    pass


class SegmentationFailed(F2PError):
    pass


class CoreNotFound(F2PError):
    pass


class MiningFailed(F2PError):
    pass


class TrainingFailed(F2PError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class IngestError(F2PError):
    def __init__(self, message: str, files=()):
        self.files = list(files)
        detail = "".join(f"\n  {f}" for f in self.files)
        super().__init__(message + detail)


class StageError(F2PError):
    pass


class ChecksumError(F2PError):
    pass


class CheckpointFormatError(F2PError):
    pass


class CheckpointTypeError(F2PError, TypeError):
    pass


class ConfigError(F2PError, ValueError):
    pass
