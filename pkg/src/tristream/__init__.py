"""Three-pathway spatio-temporal video network on a from-scratch numpy autograd.

Set ``TRISTREAM_NUMBA=0`` before import to run the pure-numpy kernels.
"""

from .backbone import Backbone, NetworkConfig, PathwayConfig
from .detector import ActionDetector, BoxAnnotation, Detection
from .metrics import MetricsReport
from .network import ThreeStreamNet, build_model
from .sampler import StrideTriple, VideoClip
from .tensor import Tensor

__all__ = [
    "ActionDetector", "Backbone", "BoxAnnotation", "Detection", "MetricsReport", "NetworkConfig",
    "PathwayConfig", "StrideTriple", "Tensor", "ThreeStreamNet", "VideoClip", "build_model",
]
__version__ = "0.1.0"
