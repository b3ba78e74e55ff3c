"""Terrain-aided visual navigation.

Optical flow between two aerial frames, a digital terrain map and an initial
guess from dead reckoning are combined to estimate the camera pose and the
frame-to-frame motion.

Modules: :mod:`terranav.terrain`, :mod:`terranav.geometry`,
:mod:`terranav.flow`, :mod:`terranav.estimator`, :mod:`terranav.sim` and the
command-line front end :mod:`terranav.cli`.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
