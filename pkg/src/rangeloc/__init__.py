"""Range-only collaborative localization for fleets of planar ground vehicles.

Modules
-------
kinematics      unicycle model, range model, noise injection
observability   Lie-derivative observability matrices and rank analysis
initializer     MDS frame establishment, stress refinement, heading initialization
estimator       centralized error-state Kalman filter
uwb_net         simulated UWB TDMA network with clock synchronization
scenario, simulation, metrics, outputs, plotting, cli
                scenario files, end-to-end driver and command line
"""
from .errors import (DegenerateConfiguration, InconsistentRanges, InitializationError, InvalidArgument, NotReady,
                     ScenarioError, StaleInput)
from .kinematics import MotionMeasurement, NoiseSpec, RangeMeasurement, VehicleState

__version__ = "0.1.0"

__all__ = [
    "DegenerateConfiguration", "InconsistentRanges", "InitializationError", "InvalidArgument", "NotReady",
    "ScenarioError", "StaleInput", "MotionMeasurement", "NoiseSpec", "RangeMeasurement", "VehicleState",
]
