"""Exception hierarchy.

The three top-level classes map onto CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class IQTError(Exception):
    exit_code = 1


class ConfigError(IQTError, ValueError):
    exit_code = 2


class DataError(IQTError, ValueError):
    exit_code = 3


class NumericError(IQTError, ArithmeticError):
    exit_code = 4


class IQTVFormatError(DataError):
    """Malformed IQTV file."""


class BadMagicError(IQTVFormatError):
    pass


class TruncatedPayloadError(IQTVFormatError):
    pass


class InvalidHeaderError(IQTVFormatError):
    """Non-positive dimensions/spacing, or an unsupported version."""


class ChannelCountError(IQTVFormatError):
    pass


class ShapeError(DataError):
    pass


class EmptyTissueError(NumericError):
    def __init__(self, tissue: str):
        super().__init__(f"tissue {tissue!r} has zero mask mass")
        self.tissue = tissue


class CoverageError(DataError):
    def __init__(self, coord):
        super().__init__(f"voxel {tuple(int(c) for c in coord)} is not covered by any patch")
        self.coord = tuple(int(c) for c in coord)


class NoNonzeroDifferencesError(NumericError):
    def __init__(self):
        super().__init__("no nonzero differences")
