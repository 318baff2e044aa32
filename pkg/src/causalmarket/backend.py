"""Kernel backend selection.

Hot numeric kernels ship in two flavours: numba-jitted loops and pure-numpy
fallbacks. The active backend is chosen once at import time from the
``CAUSALMARKET_BACKEND`` environment variable:

    CAUSALMARKET_BACKEND=numba   force the jitted kernels (error if numba missing)
    CAUSALMARKET_BACKEND=numpy   force the pure-numpy path

Unset, the jitted path is used when numba imports cleanly. Both paths are
numerically identical (same accumulation order); tests assert agreement.
"""

import os

from .errors import ConfigError

_ENV_VAR = "CAUSALMARKET_BACKEND"


def _detect() -> str:
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise ConfigError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numpy"
    return "numba"


ACTIVE = _detect()


def use_numba() -> bool:
    return ACTIVE == "numba"
