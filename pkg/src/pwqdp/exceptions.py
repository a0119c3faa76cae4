"""Exception types shared across the package."""


class PwqdpError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PwqdpError):
    """Malformed configuration file or unknown preset/flag value."""


class InfeasibleError(PwqdpError):
    """An optimization problem (QP, MPC, one-step DP) has no feasible point."""


class SolverError(PwqdpError):
    """The QP solver failed to certify an optimum (cycling / iteration cap)."""


class ConvergenceError(PwqdpError):
    """An iterative routine did not converge within its iteration budget."""


class DegeneracyError(PwqdpError):
    """Active constraint rows are rank deficient where independence is required."""


class DataConsistencyError(PwqdpError):
    """Generated training data violates an internal identity."""


class SparseSamplingError(PwqdpError):
    """Sample spacing too coarse for the error-bound formula (beta*d >= 1)."""


class TrainingDivergedError(PwqdpError):
    """Training loss became non-finite (learning rate too high)."""
