"""Backend selection for the scoring kernels.

The compiled extension is used when it imports; setting ``HIST_PURE_PYTHON=1``
forces the numpy fallback.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

if os.environ.get("HIST_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        log.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py
        BACKEND = "python"

first_overlap = _impl.first_overlap
points_in_polygon = _impl.points_in_polygon
project_to_polyline = _impl.project_to_polyline

BACKENDS = {"python": _kernels_py}
try:
    from . import _kernels

    BACKENDS["cython"] = _kernels
except ImportError:
    pass
