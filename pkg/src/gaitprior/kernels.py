"""Kernel dispatch: the compiled extension when it is built, numpy otherwise.

Set ``GAITPRIOR_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GAITPRIOR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

centered_moving_average = _impl.centered_moving_average
gae = _impl.gae
plant_step = _impl.plant_step
