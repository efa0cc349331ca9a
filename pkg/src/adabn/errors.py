"""Exception hierarchy shared by every module."""


class AdaBNError(Exception):
    """Base class for all library errors."""


class DimensionError(AdaBNError, ValueError):
    pass


class PreconditionError(AdaBNError, ValueError):
    pass


class DegenerateStatisticsError(PreconditionError):
    pass


class ContractViolationError(AdaBNError, RuntimeError):
    """Backward called with a cache that does not belong to the last forward."""


class SingularityError(AdaBNError, ValueError):
    pass


class IncompleteBankError(AdaBNError, KeyError):
    def __init__(self, layer: str, domain_id: str):
        self.layer = layer
        self.domain_id = domain_id
        super().__init__(f"bank has no statistics for layer {layer!r} under domain {domain_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(AdaBNError, ValueError):
    pass


class DegenerateLayerError(AdaBNError, ValueError):
    pass


class CheckpointError(AdaBNError):
    pass


class FormatError(CheckpointError):
    """Bad magic bytes or malformed header."""


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    def __init__(self, path, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: truncated payload, expected {expected} bytes but file has {actual}")


class ShapeMismatchError(CheckpointError):
    pass


class ValidationError(CheckpointError):
    pass
