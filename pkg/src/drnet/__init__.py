"""Deformable residual network for change detection on speckled image pairs."""

__version__ = "0.1.0"

from .network import NetworkConfig, build, variant_config  # noqa: F401
from .pipeline import MetricsReport, evaluate, predict_map, train  # noqa: F401
from .synth import ImagePair, PatchSet, generate_pair  # noqa: F401
from .tensor import Rng  # noqa: F401
