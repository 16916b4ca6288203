"""Pilot-wave and stochastic-mechanics simulation of identical-particle exchange symmetry."""
from .configspace import (BranchCut, ExchangePath, Field, GridSpec, Initializer, Orbital, ParticleSpec,
                          SpinorField, build_field, exchange, read_pwf1, write_pwf1)
from .ensemble import EquilibriumMetric, equivariance_test, nelson_stationarity_test, sample_density
from .errors import (AliasingError, ConfigError, EquivarianceError, GridMismatch, NodeProximity,
                     NonHermitianError, NormalizationError, PhaseAliasing, PilotWaveError)
from .evolution import MagneticSpec, PotentialSpec, SplitStepper, StepperConfig
from .guidance import NelsonParams, TrajectoryEnsemble, bohm_velocity, integrate_bohm, integrate_nelson, nelson_drift
from .symmetry import SymmetryReport, classify

__version__ = "0.1.0"

__all__ = [
    "AliasingError", "BranchCut", "ConfigError", "EquilibriumMetric", "EquivarianceError", "ExchangePath",
    "Field", "GridMismatch", "GridSpec", "Initializer", "MagneticSpec", "NelsonParams", "NodeProximity",
    "NonHermitianError", "NormalizationError", "Orbital", "ParticleSpec", "PhaseAliasing", "PilotWaveError",
    "PotentialSpec", "SplitStepper", "SpinorField", "StepperConfig", "SymmetryReport", "TrajectoryEnsemble",
    "bohm_velocity", "build_field", "classify", "equivariance_test", "exchange", "integrate_bohm",
    "integrate_nelson", "nelson_drift", "nelson_stationarity_test", "read_pwf1", "sample_density",
    "write_pwf1",
]
