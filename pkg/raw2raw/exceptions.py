# raw2raw/exceptions.py
"""Error types. Every error carries the CLI exit code it maps to."""


class Raw2RawError(Exception):
    exit_code = 1


# ---- exit 2: input format ----
class FormatError(Raw2RawError):
    exit_code = 2


class ShapeMismatchError(FormatError):
    pass


# ---- exit 3: metadata / config ----
class MetadataError(Raw2RawError):
    exit_code = 3


class ConfigError(Raw2RawError):
    exit_code = 3


# ---- exit 4: empty result ----
class EmptyResultError(Raw2RawError):
    exit_code = 4


class NoFlatPatchesError(EmptyResultError):
    pass


class NoKeypointsError(EmptyResultError):
    pass


class NoConsensusError(EmptyResultError):
    pass


class CropBoundaryError(EmptyResultError):
    pass


# ---- exit 5: numerical failure ----
class NumericalError(Raw2RawError):
    exit_code = 5


class InsufficientSamplesError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    pass


class DegenerateConfigurationError(NumericalError):
    pass
