"""Multi-pitch estimation with an optimal-transport harmonic regularizer."""
from .estimators import (
    DETERMINISTIC_AUDIO,
    DETERMINISTIC_SIM,
    STOCHASTIC_AUDIO,
    STOCHASTIC_SIM,
    EstimationResult,
    Hyperparams,
    estimate_deterministic,
    estimate_stochastic,
)
from .grids import uniform_frequency_grid, uniform_pitch_grid

__version__ = "0.1.0"

__all__ = [
    "Hyperparams",
    "EstimationResult",
    "STOCHASTIC_SIM",
    "DETERMINISTIC_SIM",
    "STOCHASTIC_AUDIO",
    "DETERMINISTIC_AUDIO",
    "estimate_stochastic",
    "estimate_deterministic",
    "uniform_frequency_grid",
    "uniform_pitch_grid",
]
