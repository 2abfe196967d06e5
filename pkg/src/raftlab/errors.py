"""Exception hierarchy shared across the package.

Two top-level families matter for the CLI exit codes: DataError (bad input
data, exit 2) and ContractError (caller broke an API contract, exit 3).
"""


class RaftLabError(Exception):
    """Base class for all package errors."""


class DataError(RaftLabError):
    """Malformed or inconsistent input data (files, masks, labels)."""


class ContractError(RaftLabError):
    """An API precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class NonFiniteError(ContractError):
    """A forward op produced NaN or Inf; carries the op name."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
