"""Motion tracking on a planar biped.

Teacher: PPO on privileged observations. Student: CVAE with a learned
conditional prior, distilled online from the teacher. Plus the tooling
around them: clip generation and retargeting, evaluation metrics,
robustness sweeps and ablation grids.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DependencyError, InputValidationError,
                     InvalidClipError, OptimizationError, PlanartrackError,
                     SimulationDivergedError)

__all__ = [
    "__version__",
    "PlanartrackError",
    "InputValidationError",
    "ConfigError",
    "InvalidClipError",
    "DependencyError",
    "SimulationDivergedError",
    "OptimizationError",
]
