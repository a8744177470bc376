"""Error taxonomy shared across the package.

DataError covers malformed or missing user inputs (exit code 1 from the
CLI); ContractError covers violated API preconditions and FormatError
covers unreadable artifact files (both exit code 2).
"""


class DataError(Exception):
    pass


class ContractError(Exception):
    pass


class FormatError(ContractError):
    pass


class TrainingAbort(Exception):
    """Raised when a training step produces non-finite values."""
