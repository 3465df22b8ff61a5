"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``MOSFUSE_DISABLE_NUMBA`` is set to a truthy value. Both modules are
importable directly (``_np`` always, ``_nb`` when numba is present) so tests
and the benchmark can compare them side by side.
"""
from __future__ import annotations

import importlib
import os

from . import _np

_DISABLED = os.environ.get("MOSFUSE_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

_nb = None
if not _DISABLED:
    try:
        _nb = importlib.import_module(f"{__name__}._nb")
    except ImportError:  # numba missing or broken
        _nb = None

BACKEND = "numba" if _nb is not None else "numpy"
_impl = _nb if _nb is not None else _np

pair_counts = _impl.pair_counts
nearest_centroid = _impl.nearest_centroid
batch_gradients = _impl.batch_gradients
sgd_epoch = _impl.sgd_epoch
rmsprop_epoch = _impl.rmsprop_epoch

__all__ = [
    "BACKEND",
    "pair_counts",
    "nearest_centroid",
    "batch_gradients",
    "sgd_epoch",
    "rmsprop_epoch",
]
