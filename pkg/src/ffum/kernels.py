"""Kernel selection.

The compiled extension is used when it was built and ``FFUM_PURE_PYTHON`` is
not set; otherwise the numpy fallback is used. ``BACKEND`` names the choice.
"""

import os

from . import _pykernels

KL, CHI2, JS = _pykernels.KL, _pykernels.CHI2, _pykernels.JS

if os.environ.get("FFUM_PURE_PYTHON", "") not in ("", "0"):
    fdiv_rows = _pykernels.fdiv_rows
    BACKEND = "python"
else:
    try:
        from ._ckernels import fdiv_rows
        BACKEND = "cython"
    except ImportError:
        fdiv_rows = _pykernels.fdiv_rows
        BACKEND = "python"

__all__ = ["fdiv_rows", "BACKEND", "KL", "CHI2", "JS"]
