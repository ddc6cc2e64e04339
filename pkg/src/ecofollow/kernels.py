"""Backend selection for the hot augmented-system kernels.

Imports the compiled Cython core when it is built, otherwise the numpy
reference implementation.  Set ``ECOFOLLOW_PURE=1`` to force the fallback
(used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import _core_py as pure
from ._core_py import N_PARAMS, pack_params, state_dim  # noqa: F401

if os.environ.get("ECOFOLLOW_PURE", "0") == "1":
    _backend = pure
else:
    try:
        from . import _core as _backend  # type: ignore[attr-defined]
    except ImportError:
        _backend = pure

COMPILED = bool(getattr(_backend, "COMPILED", False))

step = _backend.step
step_jacobian = _backend.step_jacobian
rollout = _backend.rollout
adjoint = _backend.adjoint
