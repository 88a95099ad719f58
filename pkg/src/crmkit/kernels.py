"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``CRMKIT_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("CRMKIT_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

fnv1a_codepoints = _impl.fnv1a_codepoints
hashed_trigram_counts = _impl.hashed_trigram_counts
char_ngram_stats = _impl.char_ngram_stats

__all__ = ["BACKEND", "fnv1a_codepoints", "hashed_trigram_counts", "char_ngram_stats"]
