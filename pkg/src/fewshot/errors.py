"""Exception hierarchy for the package.

exit_code follows the CLI contract: 1 config error, 2 data error,
3 runtime/numeric error.
"""


class FewshotError(Exception):
    exit_code = 3


class ConfigError(FewshotError):
    exit_code = 1


class DataError(FewshotError):
    exit_code = 2


class CheckpointError(DataError):
    pass


class DimensionError(FewshotError):
    pass


class ContractError(FewshotError):
    pass


class StateError(FewshotError):
    pass


class LabelIndexError(FewshotError):
    pass


class NumericError(FewshotError):
    pass


class DegenerateVectorError(FewshotError):
    pass


class DegeneratePrototypeError(FewshotError):
    pass


class DegenerateTransformError(FewshotError):
    pass


class DegenerateDistributionError(FewshotError):
    pass
