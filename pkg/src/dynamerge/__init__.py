"""Dynamic-aware multi-session LiDAR map merging."""

from .geometry import Pose, compose, exp_map, inverse, log_map, relative, svd_align

__version__ = "0.1.0"

__all__ = ["Pose", "compose", "exp_map", "inverse", "log_map", "relative", "svd_align", "__version__"]
