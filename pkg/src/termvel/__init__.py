"""Terminal-velocity flow-map training on a self-contained autodiff engine."""
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError, TermvelError, UnsupportedOpError

__version__ = "0.1.0"

__all__ = ["TermvelError", "ShapeError", "NonFiniteError", "UnsupportedOpError", "CheckpointError",
           "ConfigError", "__version__"]
