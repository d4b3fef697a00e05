"""Error types shared across the pipeline.

DataError covers malformed or degenerate inputs (empty corpora, broken logs,
failed joins, unreadable artifacts).  NumericError covers non-finite losses or
parameters during training.  The command line maps them to exit codes 2 and 3.
"""


class DataError(ValueError):
    """Input data is missing, malformed, or degenerate."""


class NumericError(ArithmeticError):
    """A numeric quantity that must stay finite did not."""
