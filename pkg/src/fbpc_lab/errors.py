"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FBPCError(Exception):
    exit_code = 1


class ConfigurationError(FBPCError, ValueError):
    pass


class ValidationError(FBPCError, ValueError):
    pass


class DimensionError(FBPCError, ValueError):
    pass


class UnsupportedError(FBPCError, ValueError):
    pass


class CapabilityError(FBPCError):
    pass


class NumericalRankError(FBPCError, ArithmeticError):
    pass


class DivergenceError(FBPCError, ArithmeticError):
    exit_code = 2


class TrainingDivergenceError(DivergenceError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class NonConvergenceError(FBPCError, RuntimeError):
    exit_code = 2

    def __init__(self, message, last_loss=None):
        super().__init__(message)
        self.last_loss = last_loss


class InvariantViolation(FBPCError, AssertionError):
    pass
