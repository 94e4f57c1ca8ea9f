"""Desk-scale spike-camera stereo depth pipeline.

Spike streams in, disparity and depth out: an integrate-and-fire codec,
correlation-pyramid matching over binned spike features, and a recurrent
refinement loop built on adaptive leaky integrate-and-fire units, plus a
small dynamics laboratory for checking the update operator's contraction
behaviour numerically.
"""

from .backend import BACKEND_NAME, NUMBA_AVAILABLE

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "NUMBA_AVAILABLE", "__version__"]
