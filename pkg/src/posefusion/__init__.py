"""posefusion: 6DoF camera pose regression from image windows and optical
flow, fused by recurrent layers.

The pipeline has three trainable stages: an absolute regressor over three
consecutive center-cropped frames, a relative regressor over zone-reduced
optical flow of the three frame pairs, and a recurrent fusion stage that
combines both into the final pose. A synthetic trajectory simulator with an
exact analytic flow model supports desk-scale training and the evaluation
harness reproduces the median-error protocol.
"""

from . import apr, checkpoint, cli, config, dataset, evaluation, flow, geometry, pe, rpr, simulate
from .geometry import Pose, RelativePose

__all__ = [
    "apr",
    "checkpoint",
    "cli",
    "config",
    "dataset",
    "evaluation",
    "flow",
    "geometry",
    "pe",
    "rpr",
    "simulate",
    "Pose",
    "RelativePose",
]

__version__ = "0.1.0"
