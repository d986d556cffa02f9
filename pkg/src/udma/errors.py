""" Exception kinds raised by the udma package.

    ValidationError and its children mean the inputs were wrong (bad file,
    bad config, out-of-range label); the CLI exits 1 on those.
    Everything else is a runtime failure and exits 2.
"""


class UDMAError(Exception):
    pass


class ValidationError(UDMAError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class LabelRangeError(ValidationError):
    pass


class ShapeError(UDMAError):
    pass


class NumericError(UDMAError):
    pass


class DegeneratePointError(UDMAError):
    pass


class NoGroundError(UDMAError):
    pass


class EmptyNodeError(UDMAError):
    pass


class EmptyCategoryError(UDMAError):
    pass


class UndefinedMetricError(UDMAError):
    pass
