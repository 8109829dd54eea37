"""Exception hierarchy shared by all modules."""


class AlphaFairError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpec(AlphaFairError, ValueError):
    pass


class NotUnderloaded(AlphaFairError):
    pass


class SolverDidNotConverge(AlphaFairError):
    pass


class StateCapExceeded(AlphaFairError):
    pass


class CapTooLargeForBudget(AlphaFairError):
    pass


class EmptySample(AlphaFairError):
    pass


class NotNormalizable(AlphaFairError):
    pass


class CertificationFailed(AlphaFairError):
    """No drift threshold could be certified within the search range."""
