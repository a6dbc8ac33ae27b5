"""
bohmvel: Bohmian velocity fields from two sequential position measurements.

States are superpositions of complex Gaussians, which Gaussian detector
windows and free evolution keep in closed form; a spectral grid backend
serves as an independent check. Modules:

``wavecore``  states, free evolution, local fields, grid backend
``povm``      Gaussian Kraus operators and outcome densities
``protocol``  joint probabilities, ensemble velocity, variance, error bounds
``sampler``   Monte Carlo measurement records and binned estimates
``scenario``  JSON scenarios and the double-slit builder
``cli``       command line drivers
"""
from .protocol import (VelocityProfile, compute_profile, ensemble_current, ensemble_velocity,
                       regime_report, required_samples, velocity_variance)
from .scenario import Scenario, build_double_slit, load_scenario
from .wavecore import ProtocolParams, WavePacket, free_evolve

__all__ = [
    "ProtocolParams", "WavePacket", "free_evolve", "VelocityProfile", "compute_profile",
    "ensemble_velocity", "ensemble_current", "velocity_variance", "regime_report",
    "required_samples", "Scenario", "build_double_slit", "load_scenario",
]
