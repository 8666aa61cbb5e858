"""Exception types shared across the package."""


class BamnetError(Exception):
    pass


class ShapeError(BamnetError):
    """Incompatible or invalid tensor shapes; message carries the shapes involved."""


class NumericError(BamnetError):
    """Non-finite values where finite ones are required (loss blow-up, bad grad check input)."""


class DataFormatError(BamnetError):
    """Malformed dataset or checkpoint bytes."""


class UsageError(BamnetError):
    """Invalid CLI / configuration input."""
