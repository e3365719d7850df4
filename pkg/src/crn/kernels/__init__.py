"""Recurrent sequence kernels: compiled core with a numpy fallback.

The compiled extension is tried first; if it is missing (no compiler at
install time) the numpy implementation is used. Set CRN_KERNELS=numpy to
force the fallback or CRN_KERNELS=compiled to insist on the extension.
"""

import os

from ..errors import ConfigError
from . import _ref

_choice = os.environ.get("CRN_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ConfigError(
        f"CRN_KERNELS must be auto/compiled/numpy, got {_choice!r}"
    )

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "compiled":
            raise ConfigError(
                "CRN_KERNELS=compiled but the extension is not built;"
                " reinstall with a C compiler available"
            ) from None
        _impl = None
if _impl is None:
    _impl = _ref

BACKEND = "numpy" if _impl is _ref else "compiled"

lstm_seq_forward = _impl.lstm_seq_forward
lstm_seq_backward = _impl.lstm_seq_backward


def backend() -> str:
    """Name of the active kernel backend."""
    return BACKEND
