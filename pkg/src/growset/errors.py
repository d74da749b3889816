"""Exception hierarchy shared by every growset module."""


class GrowsetError(Exception):
    """Base class for all errors raised by growset."""


class DataError(GrowsetError):
    """Input data violates a format or domain contract (CLI exit code 2)."""


class ZeroVector(DataError):
    pass


class NonFinite(DataError):
    pass


class DimMismatch(DataError):
    pass


class CorruptSnapshot(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class EmptyNeighborhood(GrowsetError):
    pass


class MissingPart(GrowsetError):
    pass


class MissingPair(DataError):
    pass


class EmptyCleanSet(GrowsetError):
    """No admitted neighbors yet; the classification cleaner cannot vote."""


class HookFailure(GrowsetError):
    pass


class TargetTooLarge(GrowsetError):
    pass


class OutOfRange(GrowsetError):
    pass


class BadSpec(DataError):
    pass


class ConfigError(GrowsetError):
    """Invalid configuration value (CLI exit code 1)."""


class FormatError(DataError):
    """Base for binary/JSONL format violations."""


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedRecord(FormatError):
    def __init__(self, offset: int, message: str = ""):
        self.offset = offset
        super().__init__(message or f"truncated record at byte offset {offset}")


class MalformedLine(FormatError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")
