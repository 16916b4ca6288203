"""Exception hierarchy shared by all modules."""


class PilotWaveError(Exception):
    pass


class NodeProximity(PilotWaveError):
    """A stencil or path vertex touched the node mask."""


class PhaseAliasing(PilotWaveError):
    """A neighbour phase step was too large to unwrap reliably."""


class AliasingError(PilotWaveError):
    """Stepper phases exceed the resolvable bound."""


class GridMismatch(PilotWaveError):
    pass


class NormalizationError(PilotWaveError):
    pass


class ConfigError(PilotWaveError):
    pass


class EquivarianceError(PilotWaveError):
    """Too many trajectories halted for a distribution comparison to mean anything."""


class NonHermitianError(PilotWaveError):
    pass
