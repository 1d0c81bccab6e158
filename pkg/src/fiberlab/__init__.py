"""fiberlab: fiber-morphology toolkit.

Ground-truth generation for fiber images (semiautomatic annotation and
synthetic scenes), keypoint normalization and ordering, keypoint-pruning
error correction for detections, loss arithmetic for width/length
regression, and a detection evaluation stack (AP/mAP, percentage errors,
divergence of width/length distributions).
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    DEFAULT_KEYPOINT_COUNT,
    Fiber,
    KeypointChain,
    SSRConfig,
    bic,
    optimal_keypoint_count,
    order_keypoints,
    rasterize_fiber,
    resample_keypoints,
    spline_interpolate,
    spline_length,
    ssr,
)
