"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class AssemblyError(ValueError):
    """A method specification combines incompatible modules.

    The message names the offending pair and is stable across versions so
    that it can be golden-tested.
    """
