"""Volume and surface-area estimation for watertight 3D shapes.

The package covers the full desk-scale pipeline: procedural watertight
mesh generation with exact ground truth, simulated multi-view point-map
capture with per-point confidence, fusion into 4-D feature clouds, a
graph-convolutional regressor with twin uncertainty heads trained under
a hybrid probabilistic/deterministic loss, and an evaluation suite.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
