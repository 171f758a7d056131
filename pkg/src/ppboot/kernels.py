"""Backend selection for the resampling kernels.

The compiled module is used when it was built; ``PPBOOT_PURE_PYTHON=1`` in the
environment forces the NumPy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("PPBOOT_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

pareto_select = _impl.pareto_select
cps_qtable = _impl.cps_qtable
cps_first_order = _impl.cps_first_order
cps_sequential_select = _impl.cps_sequential_select
hajek_stats = _impl.hajek_stats

__all__ = [
    "BACKEND",
    "pareto_select",
    "cps_qtable",
    "cps_first_order",
    "cps_sequential_select",
    "hajek_stats",
]
