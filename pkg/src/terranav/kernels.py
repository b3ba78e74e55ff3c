"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise, or when the
environment variable ``TERRANAV_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy fallback is used. ``BACKEND`` names the active choice.
"""

import os

from . import _pykernels
from ._pykernels import (  # noqa: F401
    RAY_BAD_ORIGIN,
    RAY_HIT,
    RAY_MISS,
    RAY_OUTSIDE,
    TRACK_OK,
    TRACK_OUT_OF_BOUNDS,
    TRACK_SINGULAR,
)

_force_python = os.environ.get("TERRANAV_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

cast_rays = _impl.cast_rays
track_level = _impl.track_level


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
