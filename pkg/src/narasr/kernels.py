"""Backend selection for the CTC kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is. Set ``NARASR_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
ctc_forward_backward = _pykernels.ctc_forward_backward
prefix_extend = _pykernels.prefix_extend

if os.environ.get("NARASR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    if _ckernels is not None:
        BACKEND = "cython"
        ctc_forward_backward = _ckernels.ctc_forward_backward
        prefix_extend = _ckernels.prefix_extend


def available_backends():
    """Mapping of backend name to module, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels as ck
        out["cython"] = ck
    except ImportError:
        pass
    return out
