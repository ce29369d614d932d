"""Backend selection for the numeric kernels.

The compiled extension is used when importable; set ``TRACEKIT_PURE=1`` to
force the pure-Python fallback.
"""

from __future__ import annotations

import json
import os
from typing import Any

from . import _pykernels

BACKEND = "python"
_impl: Any = _pykernels

if os.environ.get("TRACEKIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

fnv1a64 = _impl.fnv1a64
hash_features = _impl.hash_features
clipped_surrogate = _impl.clipped_surrogate


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj: Any) -> str:
    """Stable 64-bit content hash of a JSON-serialisable value, as hex."""
    return f"{fnv1a64(canonical_json(obj).encode('utf-8')):016x}"
