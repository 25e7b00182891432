"""Exception types raised by the simulator."""


class Multid2Error(Exception):
    """Base class for all simulator errors."""


class DimensionError(Multid2Error, ValueError):
    pass


class ConfigurationError(Multid2Error, ValueError):
    pass


class ContractViolation(Multid2Error, ValueError):
    pass


class PartitionError(Multid2Error):
    pass


class EvaluationError(Multid2Error, FloatingPointError):
    """Non-finite Hamiltonian matrix element."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = list(pairs)


class SingularSystemError(Multid2Error, ArithmeticError):
    """The variational linear system could not be factorized.

    ``rcond`` is the reciprocal condition estimate of the matrix that failed,
    ``closest_pair`` the pair of coherent states with the smallest mutual
    distance (a missed apoptosis is the usual cause).
    """

    def __init__(self, message, rcond=0.0, closest_pair=None, distance=None):
        super().__init__(message)
        self.rcond = rcond
        self.closest_pair = closest_pair
        self.distance = distance


class PropagationAborted(Multid2Error, RuntimeError):
    """Integration stopped before ``t_final``; ``output`` holds the partial run."""

    def __init__(self, message, output=None, diagnostics=None):
        super().__init__(message)
        self.output = output
        self.diagnostics = diagnostics or {}
