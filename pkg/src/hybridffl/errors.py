"""Exception types raised across the package."""

import numpy as np


class ValidationError(ValueError):
    """A model or configuration violates one or more invariants."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StepSizeError(ValueError):
    """A switching probability per step reached the 0.5 guard."""

    def __init__(self, gene, time, rate_dt):
        self.gene = gene
        self.time = time
        self.rate_dt = rate_dt
        super().__init__(
            f"rate*dt = {rate_dt:.3g} >= 0.5 for gene {gene} at t = {time:.6g}; "
            "reduce dt"
        )


class ConvergenceError(RuntimeError):
    """An inner optimisation did not converge; ``state`` holds the last iterate."""

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)


class InternalConsistencyError(RuntimeError):
    """The free energy increased beyond round-off slack (bug trap)."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations of the kinetic fit are singular."""

    def __init__(self, regressor, message=None):
        self.regressor = regressor
        super().__init__(message or f"normal equations singular: regressor '{regressor}' is degenerate")


class GridCoverageError(RuntimeError):
    """Probability mass escaped the bounds of a discretisation grid."""


class ConfigError(ValueError):
    """Configuration file could not be parsed or validated."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
