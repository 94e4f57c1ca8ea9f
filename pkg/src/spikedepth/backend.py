"""Kernel backend selection.

The hot numeric kernels exist twice: a numba-jitted version and a pure
numpy fallback. Selection happens once at import time via the
SPIKEDEPTH_BACKEND environment variable:

    SPIKEDEPTH_BACKEND=numba   force numba (ImportError if unavailable)
    SPIKEDEPTH_BACKEND=numpy   force the pure-numpy path
    unset / auto               numba if importable, else numpy

`kernels` is the selected module; the rest of the package imports it
from here. benchmarks/bench_kernels.py compares the two paths directly.
"""

import os

from . import _kernels_numpy

_choice = os.environ.get("SPIKEDEPTH_BACKEND", "auto").lower()

NUMBA_AVAILABLE = False
if _choice in ("auto", "numba"):
    try:
        import numba
        # workqueue is always present and schedules prange blocks
        # deterministically; TBB/OMP availability varies by host.
        numba.config.THREADING_LAYER = "workqueue"
        from . import _kernels_numba
        NUMBA_AVAILABLE = True
    except ImportError:
        _kernels_numba = None
        if _choice == "numba":
            raise

if _choice == "numpy" or not NUMBA_AVAILABLE:
    kernels = _kernels_numpy
else:
    kernels = _kernels_numba

BACKEND_NAME = kernels.NAME


def warmup():
    """Trigger JIT compilation of every dispatched kernel on tiny inputs.

    No-op on the numpy backend. Useful before timed sections so that
    one-time compilation cost is not attributed to the computation.
    """
    import numpy as np
    k = kernels
    x = np.random.default_rng(0).standard_normal((2, 6, 6))
    w = np.random.default_rng(1).standard_normal((3, 2, 3, 3))
    y = k.conv2d_fwd(x, w, 1, 1)
    k.conv2d_bwd_w(y, x, 3, 3, 1, 1)
    k.conv2d_bwd_x(y, w, 1, 1, 6, 6)
    x2 = x.reshape(2, 36)
    y2 = k.avgpool_fwd(x2, 2, 2)
    k.avgpool_bwd(y2, 36, 2, 2)
    vol = k.corr_fwd(x, x)
    k.corr_bwd(vol, x, x)
    d = np.zeros((6, 6))
    lo = k.lookup_fwd(vol, d, 1.0, 2)
    k.lookup_bwd(lo, vol, d, 1.0, 2)
    u = k.up2_fwd(x)
    k.up2_bwd(u, 6, 6)
    wts = np.full((9, 16, 6, 6), 1.0 / 9.0)
    cf = k.convex_fwd(d, wts)
    k.convex_bwd(cf, d, wts)
    frames = np.full((4, 3, 3), 0.5)
    sp, _ = k.encode_fwd(frames, 1.0, None)
    k.encode_fwd(frames, 1.0, np.zeros_like(frames))
    k.tfi_fwd(sp, 2, 4)
