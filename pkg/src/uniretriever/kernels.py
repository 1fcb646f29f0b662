"""Kernel selection: compiled extension when available, numpy fallback otherwise.

Set ``UNIRETRIEVER_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
impl = _kernels_py

if not os.environ.get("UNIRETRIEVER_PURE_PYTHON"):
    try:
        from . import _kernels as impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        impl = _kernels_py

greedy_search_ip = impl.greedy_search_ip
robust_prune = impl.robust_prune
build_pass = impl.build_pass
