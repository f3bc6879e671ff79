"""
Exceptions raised across the toolkit. Each one also subclasses the builtin it refines.
"""


class TeedError(Exception):
    pass


class ContractError(TeedError, ValueError):
    """An operation was called outside its preconditions"""


class ConfigError(ContractError):
    """Invalid run configuration or command line usage"""


class NonFiniteError(TeedError, ArithmeticError):
    """NaN or Inf reached a tensor, gradient or loss.

    Args:
        message (str): description
        where (str, optional): offending parameter or tensor name
        batch_ids (list, optional): ids of the samples in the offending batch
    """

    def __init__(self, message: str, where: str = None, batch_ids: list = None):
        super().__init__(message)
        self.where = where
        self.batch_ids = list(batch_ids) if batch_ids is not None else []


class DataError(TeedError):
    """Unreadable, missing or inconsistent input data"""


class CheckpointError(DataError):
    pass


class ChecksumError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass
