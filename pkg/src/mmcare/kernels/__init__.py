"""Hot-kernel backend selection.

Imports the compiled Cython extension when present, otherwise falls back
to the numpy reference implementation. Set MMCARE_BACKEND=python to force
the fallback (useful for kernel parity tests and benchmarks).
"""

import os

from . import _ref

BACKEND = "python"

if os.environ.get("MMCARE_BACKEND", "").lower() not in ("python", "ref", "numpy"):
    try:
        from . import _fast  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _fast = None
else:
    _fast = None

_impl = _fast if BACKEND == "compiled" else _ref

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd

reference = _ref
compiled = _fast
