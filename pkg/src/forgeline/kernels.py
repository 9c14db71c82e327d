"""Kernel backend selection.

Prefers the compiled extension and falls back to numpy. Set
``FORGELINE_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("FORGELINE_PURE") == "1":
    from forgeline import _pykernels as _impl
else:
    try:
        from forgeline import _ckernels as _impl
    except ImportError:  # extension not built
        from forgeline import _pykernels as _impl

BACKEND: str = _impl.BACKEND
accumulate = _impl.accumulate
f64_to_bf16 = _impl.f64_to_bf16
bf16_to_f32 = _impl.bf16_to_f32
transition_counts = _impl.transition_counts

__all__ = ["BACKEND", "accumulate", "f64_to_bf16", "bf16_to_f32", "transition_counts"]
