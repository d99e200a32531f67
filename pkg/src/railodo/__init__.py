"""Rail odometry workbench: simulator, visual-inertial window estimator, segment evaluation."""
from .errors import RailOdoError

__version__ = "0.1.0"
__all__ = ["RailOdoError", "__version__"]
