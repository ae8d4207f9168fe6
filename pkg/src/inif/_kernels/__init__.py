"""Hot-kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``INIF_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("INIF_PURE_PYTHON", "") not in ("", "0"):
    from ._pykernels import decode_symbols, encode_symbols, siren_forward_points

    BACKEND = "python"
else:
    try:
        from ._ckernels import decode_symbols, encode_symbols, siren_forward_points

        BACKEND = "cython"
    except ImportError:
        from ._pykernels import decode_symbols, encode_symbols, siren_forward_points

        BACKEND = "python"

__all__ = ["BACKEND", "decode_symbols", "encode_symbols", "siren_forward_points"]
