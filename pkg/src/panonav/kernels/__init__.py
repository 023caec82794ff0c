"""Hot numeric kernels with selectable backend.

Two implementations of the same kernel API live side by side:

* ``numba_backend`` -- ``@njit`` compiled loops (default when numba imports);
* ``numpy_backend`` -- vectorized pure-numpy fallback.

Set ``PANONAV_NO_NUMBA=1`` to force the numpy path.  Both backends are
deterministic run-to-run on a fixed machine: ray casting assigns each output
element to exactly one fixed-order reduction regardless of thread count, and
the convolutions hand their contractions to a fixed GEMM/einsum path.

``benchmarks/bench_kernels.py`` compares the two backends directly.
"""

import os
import warnings

from . import numpy_backend

_FORCED_NUMPY = os.environ.get("PANONAV_NO_NUMBA", "0").lower() in ("1", "true", "yes")

if not _FORCED_NUMPY:
    try:
        from . import numba_backend as _impl
        BACKEND = "numba"
    except ImportError:
        warnings.warn(
            "numba unavailable; falling back to pure-numpy kernels "
            "(set PANONAV_NO_NUMBA=1 to silence)", RuntimeWarning)
        _impl = numpy_backend
        BACKEND = "numpy"
else:
    _impl = numpy_backend
    BACKEND = "numpy"

raycast_depth = _impl.raycast_depth
raycast_scene = _impl.raycast_scene
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def set_num_threads(n: int) -> None:
    """Limit kernel worker threads (no-op on the numpy backend)."""
    if BACKEND == "numba":
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
