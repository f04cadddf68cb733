"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are used.  Set ``GVPOLAB_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("GVPOLAB_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

log_softmax = _impl.log_softmax
flat_weighted_grad = _impl.flat_weighted_grad
sample_inverse_cdf = _impl.sample_inverse_cdf
centered_weights = _impl.centered_weights
scatter_coefficients = _impl.scatter_coefficients
exact_gvpo_flat = _impl.exact_gvpo_flat
policy_metrics = _impl.policy_metrics


def backends():
    """Map backend name -> module for every backend importable in this process."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
