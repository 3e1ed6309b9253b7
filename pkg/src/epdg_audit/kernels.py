"""Backend selection for the modular-exponentiation kernels.

The compiled GMP extension is used when importable; otherwise the pure-Python
implementation is loaded. Set ``EPDG_AUDIT_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pure

if os.environ.get("EPDG_AUDIT_PURE"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

powmod = _impl.powmod
FixedBase = _impl.FixedBase

__all__ = ["BACKEND", "FixedBase", "powmod"]
