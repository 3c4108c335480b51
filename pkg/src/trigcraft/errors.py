"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""


class TrigcraftError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TrigcraftError):
    """A configuration value is invalid or inconsistent."""


class DataError(TrigcraftError):
    """A dataset or artifact on disk is missing or malformed."""


class DatasetNotFoundError(DataError):
    """The dataset root (or an expected split directory) does not exist."""


class DatasetStructureError(DataError):
    """The directory tree does not match the requested dataset profile."""


class ImageDecodeError(DataError):
    """An image file could not be decoded; the message names the file."""


class ChecksumError(DataError):
    """A downloaded or supplied archive failed checksum verification."""


class InvalidTargetError(ConfigError):
    """The target class index is outside the dataset's class range."""


class InsufficientDataError(DataError):
    """A class does not hold enough images; the message names the class."""


class InfeasibleRateError(ConfigError):
    """The poisoning rate exceeds what the target class can supply.

    Attributes:
        max_feasible_lambda: largest rate the target class supports.
    """

    def __init__(self, msg, max_feasible_lambda):
        super().__init__(msg)
        self.max_feasible_lambda = max_feasible_lambda


class PlanMismatchError(DataError):
    """A poison plan does not agree with the dataset it is applied to."""


class ShapeMismatchError(TrigcraftError):
    """Image, trigger or model shapes are incompatible."""


class UndefinedMetricError(TrigcraftError):
    """A metric was requested on an empty or degenerate input set."""


class PairingError(TrigcraftError):
    """Clean/poisoned image lists cannot be paired up."""


class PerceptualWeightsError(ConfigError):
    """Pretrained perceptual-network weights are unavailable at startup."""


class TrainingDiverged(TrigcraftError):
    """Training hit a non-finite loss.

    Carries the last state that was still finite so callers can persist it.

    Attributes:
        last_good_state: state dict from the most recent completed epoch,
            or None when divergence happened in the first epoch.
        log: whatever per-step records were collected before the abort.
    """

    def __init__(self, msg, last_good_state=None, log=None):
        super().__init__(msg)
        self.last_good_state = last_good_state
        self.log = log


class IncompleteSweepError(TrigcraftError):
    """A sweep is missing inputs for some grid points.

    Attributes:
        missing: the grid values that have no artifact.
    """

    def __init__(self, msg, missing):
        super().__init__(msg)
        self.missing = list(missing)
