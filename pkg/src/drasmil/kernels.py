"""Hot-loop kernels, compiled when available.

Set ``DRASMIL_PURE_PYTHON=1`` to force the numpy fallback. Both backends
produce bit-identical results; only speed differs.
"""

import os

from drasmil import _pykernels

if os.environ.get("DRASMIL_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from drasmil import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.NAME

knn_propagate = _impl.knn_propagate
weighted_draw = _impl.weighted_draw
bootstrap_epochs = _impl.bootstrap_epochs


def available_backends():
    """Map backend name -> kernel module, for comparison and benchmarking."""
    found = {"python": _pykernels}
    try:
        from drasmil import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
