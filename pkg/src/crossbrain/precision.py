"""Global numeric precision mode.

Training runs in 32-bit for speed; gradient checks run in 64-bit for
accuracy. The mode is a process-wide setting, initialized from the
MB_PRECISION environment variable (``f32`` or ``f64``, default ``f32``).
"""

import contextlib
import os

import numpy as np

from .errors import ConfigError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_active = os.environ.get("MB_PRECISION", "f32")
if _active not in _DTYPES:
    raise ConfigError(f"MB_PRECISION must be 'f32' or 'f64', got {_active!r}")


def set_precision(mode: str) -> None:
    """Select the active mode, one of ``f32`` or ``f64``."""
    global _active
    if mode not in _DTYPES:
        raise ConfigError(f"precision must be 'f32' or 'f64', got {mode!r}")
    _active = mode


def active_precision() -> str:
    return _active


def dtype() -> type:
    """numpy scalar type for the active mode."""
    return _DTYPES[_active]


@contextlib.contextmanager
def use_precision(mode: str):
    """Temporarily switch precision (used by gradient-check tests)."""
    previous = _active
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)
