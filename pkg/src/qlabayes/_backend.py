"""Kernel selection at import time.

The compiled extension is used when it imports; setting ``QLA_PURE_PYTHON=1``
forces the pure-Python fallback.
"""

import os

from . import _fallback

BACKEND = "python"
euler_polytrig = _fallback.euler_polytrig
polytrig_stats = _fallback.polytrig_stats

if os.environ.get("QLA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        euler_polytrig = _kernels.euler_polytrig
        polytrig_stats = _kernels.polytrig_stats
