"""Camera pose regression with graph neural networks over precomputed image features."""
from .kernels import BACKEND
from .pose import Pose

__version__ = "0.1.0"

__all__ = ["BACKEND", "Pose", "__version__"]
