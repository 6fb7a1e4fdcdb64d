"""Hot-loop kernels, compiled when available.

The Cython extension ``mitml._kernels`` is preferred. Setting ``MITML_PURE_PYTHON=1``
or running from an unbuilt checkout selects the NumPy fallback in ``mitml._kernels_py``.
Both expose ``im2col``, ``col2im`` and ``ranked_hits`` with identical semantics.
"""

import os

from mitml import _kernels_py

if os.environ.get("MITML_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from mitml import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

im2col = _impl.im2col
col2im = _impl.col2im
ranked_hits = _impl.ranked_hits
